//! Fine-grained recognition settings with counterfactual attention and
//! attention-guided augmentation, plus a cost-aware benchmark harness.
//!
//! The numeric core is data-parallel over samples through rayon when the
//! `parallel` feature is enabled (the default) and runs sequentially
//! otherwise. Per-sample partial results are always reduced in sample
//! order, so both paths produce bit-identical parameters.

pub mod attention;
pub mod augment;
pub mod backbones;
pub mod bench;
pub mod datasets;
pub mod error;
pub mod nn;
pub mod par;
pub mod scalar;
pub mod settings;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use settings::{build_model, infer, train_step, ModelBundle, TrEvSetting};
