//! Dual-channel structural covariance network classification of structural
//! MRI: NIfTI input, robust normalisation, ROI descriptors, covariance
//! networks, a fused CNN/MLP classifier trained with a small reverse-mode
//! engine, seed-ensemble cross-validation and Grad-CAM ROI attribution.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod interpret;
pub mod model;
pub mod nifti;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod scn;
pub mod synth;

pub use error::{Error, NiftiError, Result};
