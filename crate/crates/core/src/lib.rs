//! Pseudo-labeling for semi-supervised learning when the unlabeled pool holds
//! samples from classes that never appear in the labeled set.
//!
//! High-confidence samples get class-balanced pseudo-labels ([`pseudo_label`]);
//! low-confidence samples are clustered onto extra classes with a balanced
//! optimal-transport assignment ([`sec`]). The remaining modules provide the
//! analysis toolkit, a small trainable classifier and the experiment harness.

pub mod confidence;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod label_space;
pub mod pseudo_label;
pub mod sec;
pub mod strategies;
pub mod trainer;

pub use error::{Error, Result};
pub use label_space::{LabelSpace, PredictionMatrix, PseudoLabelSet, SampleBatch};
