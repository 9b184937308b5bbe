//! Unprotected reference attention: the standard two-pass softmax form and
//! the blocked online-softmax recurrence. Every protected path is checked
//! against these.

use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::tensor::{gemm_raw, Matrix};

/// Running row statistics of the online softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxState {
    /// Running row maximum m.
    pub m: Vec<f32>,
    /// Running row sum ℓ, relative to `m`.
    pub l: Vec<f32>,
}

impl SoftmaxState {
    /// `m = -inf`, `ℓ = 0`: the first block becomes a plain assignment.
    pub fn new(rows: usize) -> Self {
        SoftmaxState { m: vec![f32::NEG_INFINITY; rows], l: vec![0.0; rows] }
    }
}

pub(crate) fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttnConfig) -> Result<()> {
    cfg.validate()?;
    for (name, m) in [("Q", q), ("K", k), ("V", v)] {
        if m.rows() != cfg.seq_len || m.cols() != cfg.head_dim {
            return Err(Error::shape(format!(
                "{name} is {}x{}, expected {}x{}",
                m.rows(),
                m.cols(),
                cfg.seq_len,
                cfg.head_dim
            )));
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn row_max(row: &[f32]) -> f32 {
    row.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

#[inline]
pub(crate) fn row_sum(row: &[f32]) -> f32 {
    row.iter().fold(0.0f32, |a, &x| a + x)
}

/// `scale * A·Bᵀ` given `Bᵀ` already materialised.
pub(crate) fn scaled_scores(a: &Matrix, bt: &Matrix, scale: f32) -> Result<Matrix> {
    let mut s = gemm_raw(a, bt, None)?;
    s.data_mut().iter_mut().for_each(|x| *x *= scale);
    Ok(s)
}

/// `softmax(scale·QKᵀ)·V` with a stable per-row softmax, all in 32-bit.
pub fn standard_attention(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttnConfig) -> Result<Matrix> {
    check_qkv(q, k, v, cfg)?;
    let mut p = scaled_scores(q, &k.transpose(), cfg.scale)?;
    let mut l = vec![0.0f32; cfg.seq_len];
    for (r, lr) in l.iter_mut().enumerate() {
        let row = p.row_mut(r);
        let m = row_max(row);
        row.iter_mut().for_each(|x| *x = (*x - m).exp());
        *lr = row_sum(row);
    }
    let mut o = gemm_raw(&p, v, None)?;
    for (r, &lr) in l.iter().enumerate() {
        o.row_mut(r).iter_mut().for_each(|x| *x /= lr);
    }
    Ok(o)
}

/// Blocked flash attention. With `B = N` the result is bit-identical to
/// [`standard_attention`].
pub fn flash_attention(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttnConfig) -> Result<Matrix> {
    flash_attention_with(q, k, v, cfg, None, None).map(|(o, _)| o)
}

/// Hook receiving `(row_block, kv_block, running_max)` right after each max
/// update, before the max is used.
pub type MaxHook<'a> = &'a mut dyn FnMut(usize, usize, &mut [f32]);

/// Flash attention with an optional K/V block visiting order and a hook on
/// the running maximum. Returns the output and the final softmax state of
/// every row.
pub fn flash_attention_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttnConfig,
    kv_order: Option<&[usize]>,
    mut max_hook: Option<MaxHook<'_>>,
) -> Result<(Matrix, SoftmaxState)> {
    check_qkv(q, k, v, cfg)?;
    let n = cfg.num_blocks();
    let b = cfg.block;
    let default_order: Vec<usize> = (0..n).collect();
    let order = kv_order.unwrap_or(&default_order);
    {
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&j| j >= n || std::mem::replace(&mut seen[j], true)) {
            return Err(Error::config("kv_order must be a permutation of the column blocks"));
        }
    }
    let kt_blocks: Vec<Matrix> = (0..n).map(|j| k.slice(j * b, b, 0, cfg.head_dim).transpose()).collect();
    let v_blocks: Vec<Matrix> = (0..n).map(|j| v.slice(j * b, b, 0, cfg.head_dim)).collect();

    let mut out = Matrix::zeros(cfg.seq_len, cfg.head_dim);
    let mut state = SoftmaxState::new(cfg.seq_len);
    for i in 0..n {
        let qi = q.slice(i * b, b, 0, cfg.head_dim);
        let mut st = SoftmaxState::new(b);
        let mut o = Matrix::zeros(b, cfg.head_dim);
        for &j in order {
            let mut s = scaled_scores(&qi, &kt_blocks[j], cfg.scale)?;
            let mut m_new: Vec<f32> =
                (0..b).map(|r| st.m[r].max(row_max(s.row(r)))).collect();
            if let Some(hook) = max_hook.as_mut() {
                hook(i, j, &mut m_new);
            }
            for (r, &mr) in m_new.iter().enumerate() {
                s.row_mut(r).iter_mut().for_each(|x| *x = (*x - mr).exp());
            }
            let p = s;
            let alpha: Vec<f32> = (0..b).map(|r| (st.m[r] - m_new[r]).exp()).collect();
            for (r, &a) in alpha.iter().enumerate() {
                st.l[r] = a * st.l[r] + row_sum(p.row(r));
                o.row_mut(r).iter_mut().for_each(|x| *x *= a);
            }
            o = gemm_raw(&p, &v_blocks[j], Some(&o))?;
            st.m = m_new;
        }
        for r in 0..b {
            let lr = st.l[r];
            o.row_mut(r).iter_mut().for_each(|x| *x /= lr);
        }
        out.write_block(i * b, 0, &o);
        state.m[i * b..(i + 1) * b].copy_from_slice(&st.m);
        state.l[i * b..(i + 1) * b].copy_from_slice(&st.l);
    }
    Ok((out, state))
}
