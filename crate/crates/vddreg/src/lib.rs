//! Temporary build scaffold.
pub mod core;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod segmentation;
pub(crate) mod filters;
pub mod util;

pub use crate::core::{
    binarize, vessel_density, BinaryMask, CorrespondenceSet, GrayImage, Modality,
    PartialAffine2D, ProbabilityMap, RegistrationResult, StyleTarget,
};
pub use error::{Result, VddError};

// Pull in the system BLAS for ndarray's GEMM path.
use blas_src as _;
