//! Co-attention classification for weakly supervised semantic segmentation.
//!
//! Images are paired by shared classes; co-attention between their feature
//! maps supervises the classifier with the common labels, and a contrastive
//! gate supervises it with the labels each image does not share. The trained
//! classifier then yields per-class localization maps, either from one image
//! or averaged over co-attention with related images, which are thresholded
//! into pseudo segmentation masks.

pub mod autodiff;
pub mod classifier;
pub mod coattention;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod labels;
pub mod netpbm;
pub mod seeding;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use labels::LabelVector;
pub use tensor::Tensor;
