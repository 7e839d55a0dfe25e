//! Knowledge-mixture continual pre-training for tiny decoder-only language
//! models: unified data mixing, logit swap self-distillation, easy-sample
//! selection, SFT/DPO format alignment, and a desk-scale experiment harness.

pub mod align;
pub mod datapipe;
pub mod error;
pub mod evalharness;
pub mod lssd;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
