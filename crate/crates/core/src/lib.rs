//! Statistical-CSI energy-efficiency optimization for movable-antenna MIMO
//! links: channel synthesis, deterministic-equivalent rate evaluation,
//! covariance and antenna-placement optimizers, an alternating-optimization
//! driver with benchmark schemes, and a batch experiment CLI.

pub mod error;
pub mod linalg;
pub mod scenario;
pub mod oracle;
pub mod de_core;
pub mod qp;
pub mod tx_design;

pub use error::{Error, Result};
