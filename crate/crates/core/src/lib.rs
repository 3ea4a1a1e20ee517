//! Source-free domain adaptation for structure-preserving image enhancement.
//!
//! The pipeline trains an [`enhancer::EnhancerModel`] on synthesized
//! degraded/clean pairs, then adapts it to unlabeled target images with a
//! mean-teacher distillation loop whose pseudo-labels are gated by a frozen
//! [`picker::Picker`].

pub mod checkpoint;
pub mod degrade;
pub mod enhancer;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod picker;
pub mod sfuda;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, MaskKind, MaskTensor};
