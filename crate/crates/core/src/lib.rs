//! Adversarial training with a hidden-representation divergence penalty for
//! binary free-space segmentation, together with the tooling around it:
//! a PGD attack, a positive/unlabeled telemetry annotator, a synthetic indoor
//! scene generator and an mIoU evaluation harness.

pub mod annotation;
pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
