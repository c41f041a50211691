//! Online continual learning on single-pass class-incremental streams.
//!
//! The crate implements the OnPro training scheme: per-batch online class
//! prototypes, a prototype-equilibrium contrastive objective (OPE), and
//! confusion-driven replay sampling with mixup (APF), together with an
//! experience-replay baseline, the usual class-incremental metrics, and a
//! config-driven experiment runner.

pub mod apf;
pub mod error;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod prototypes;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
