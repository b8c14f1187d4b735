//! Translate-to-recognize training: a shared convolutional encoder optimized
//! jointly for scene classification and cross-modal image translation under
//! layer-wise content supervision.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
