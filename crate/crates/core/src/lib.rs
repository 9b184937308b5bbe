//! Fault-tolerant blocked attention.
//!
//! Flash attention protected end to end: strided tensor checksums on both
//! GEMMs, log-domain checks and range restriction on the softmax, guarded
//! row statistics. A decoupled three-stage baseline, a bit-flip injector and
//! a campaign harness sit alongside.

pub mod abft;
pub mod campaign;
pub mod config;
pub mod counters;
pub mod error;
pub mod inject;
pub mod kernel;
pub mod oracles;
pub mod report;
pub mod snvr;
pub mod tensor;

pub use config::AttnConfig;
pub use counters::Counters;
pub use error::{Error, Result};
pub use inject::{FaultPlan, FaultSpec, Site};
pub use kernel::{efta_forward, FTMode, FTReport};
pub use snvr::Thresholds;
pub use tensor::{Matrix, StorageClass};
