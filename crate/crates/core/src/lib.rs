//! Two-modality encoder-decoder training with unimodal supervision,
//! per-group gradient deconfliction and decoupled foreground/background
//! adapters, at a scale small enough to check every gradient numerically.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod datakit;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod gradsurgery;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
