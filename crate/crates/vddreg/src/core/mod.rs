//! Domain types shared by every pipeline stage.
//!
//! All types are immutable after construction and validated on entry, so
//! downstream code can rely on their invariants without re-checking. The
//! coordinate convention used everywhere in this crate is: `x` is the column
//! index, `y` is the row index, and the origin sits at the center of the
//! top-left pixel.

mod affine;
mod correspondence;

pub use affine::PartialAffine2D;
pub use correspondence::CorrespondenceSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VddError};

/// Imaging modality an image came from. Loss weights and stream assignment
/// in two-stage training bind to this tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Erythrocyte-mediated angiography (low vessel density).
    Ema,
    /// OCT angiography (high vessel density).
    Octa,
    /// Color fundus photograph, grayscale-converted.
    Cf,
    /// Fluorescein angiography.
    Fa,
    /// Synthetic low-vessel-density modality.
    SynthA,
    /// Synthetic high-vessel-density modality.
    SynthB,
}

impl Modality {
    /// Whether this modality plays the low-vessel-density ("e" stream) role.
    pub fn is_low_vd(self) -> bool {
        matches!(self, Modality::Ema | Modality::Cf | Modality::SynthA)
    }
}

/// A single-channel raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrayImage {
    pixels: Array2<f64>,
    modality: Modality,
    pixel_size_um: Option<f64>,
    network_ready: bool,
}

impl GrayImage {
    /// Builds an image from row-major pixel data, validating the value range.
    pub fn new(pixels: Array2<f64>, modality: Modality) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(VddError::Dimension(format!(
                "image must be non-empty, got {w}x{h}"
            )));
        }
        for &v in pixels.iter() {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(VddError::Validation(format!(
                    "pixel intensity {v} outside [0, 1]"
                )));
            }
        }
        let network_ready = w >= 8 && h >= 8 && w % 8 == 0 && h % 8 == 0;
        Ok(Self {
            pixels,
            modality,
            pixel_size_um: None,
            network_ready,
        })
    }

    /// Sets the physical pixel pitch in micrometers per pixel.
    pub fn with_pixel_size(mut self, um_per_px: f64) -> Self {
        self.pixel_size_um = Some(um_per_px);
        self
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn pixel_size_um(&self) -> Option<f64> {
        self.pixel_size_um
    }

    /// Width in pixels (number of columns).
    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// Height in pixels (number of rows).
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    /// True when both dimensions are at least 8 and multiples of 8, the
    /// shape contract of the segmentation networks.
    pub fn is_network_ready(&self) -> bool {
        self.network_ready
    }

    /// Bilinear sample at sub-pixel coordinates; returns 0 outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        sample_bilinear(&self.pixels, x, y)
    }
}

/// Bilinear interpolation on a raw array with zero padding outside.
pub(crate) fn sample_bilinear(values: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = values.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xi = x0 as i64 + dx;
            let yi = y0 as i64 + dy;
            if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                acc += wy * wx * values[(yi as usize, xi as usize)];
            }
        }
    }
    acc
}

/// Per-pixel vessel probabilities produced by a segmentation network.
/// Dimensions always equal the source image it was predicted from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbabilityMap {
    values: Array2<f64>,
}

impl ProbabilityMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(VddError::Dimension("probability map is empty".into()));
        }
        for &v in values.iter() {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(VddError::Validation(format!(
                    "probability {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }
}

/// A strictly binary raster; 1 marks vessel pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    values: Array2<u8>,
}

impl BinaryMask {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.is_empty() {
            return Err(VddError::Dimension("mask is empty".into()));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(VddError::Validation(
                "mask values must be strictly 0 or 1".into(),
            ));
        }
        Ok(Self { values })
    }

    /// Builds a mask from anything truthy (nonzero -> 1).
    pub fn from_bool<F: Fn(f64) -> bool>(values: &Array2<f64>, pred: F) -> Self {
        Self {
            values: values.map(|&v| u8::from(pred(v))),
        }
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    /// The mask as 0.0/1.0 floats, for arithmetic with images and maps.
    pub fn to_f64(&self) -> Array2<f64> {
        self.values.map(|&v| f64::from(v))
    }

    /// Number of vessel (value 1) pixels.
    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// A stand-alone binary vessel mask used as the joint style reference during
/// unsupervised training. Never part of the train/test pair splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleTarget {
    pub mask: BinaryMask,
    /// Identifier of the source the mask was annotated from.
    pub source_id: String,
}

impl StyleTarget {
    pub fn new(mask: BinaryMask, source_id: impl Into<String>) -> Self {
        Self {
            mask,
            source_id: source_id.into(),
        }
    }
}

/// Outcome of registering one image pair: the estimated transform plus
/// matcher/estimator diagnostics and (when ground truth is available)
/// reprojection metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Map from fixed-image coordinates to moving-image coordinates.
    pub transform: PartialAffine2D,
    pub n_keypoints_fixed: usize,
    pub n_keypoints_moving: usize,
    pub n_matches: usize,
    pub n_inliers: usize,
    /// Reprojection RMSE in pixels over ground-truth points, when available.
    pub rmse: Option<f64>,
    /// Maximum reprojection error in pixels over ground-truth points.
    pub mae: Option<f64>,
}

impl RegistrationResult {
    /// Validates the diagnostic invariants (inliers within matches,
    /// rmse <= mae over the same point set).
    pub fn validate(&self) -> Result<()> {
        if self.n_inliers > self.n_matches {
            return Err(VddError::Validation(format!(
                "n_inliers {} exceeds n_matches {}",
                self.n_inliers, self.n_matches
            )));
        }
        if let (Some(r), Some(m)) = (self.rmse, self.mae) {
            if r > m + 1e-12 {
                return Err(VddError::Validation(format!(
                    "rmse {r} exceeds mae {m}"
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of pixels occupied by vessels: ones divided by total pixel count.
pub fn vessel_density(mask: &BinaryMask) -> Result<f64> {
    let total = mask.values().len();
    if total == 0 {
        return Err(VddError::Dimension("vessel density of empty mask".into()));
    }
    Ok(mask.count_ones() as f64 / total as f64)
}

/// Thresholds a probability map into a binary mask. A pixel becomes vessel
/// when its probability is greater than *or equal to* the threshold, which
/// makes the all-0.5 degenerate map deterministic.
pub fn binarize(map: &ProbabilityMap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(VddError::Config(format!(
            "binarize threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(BinaryMask::from_bool(map.values(), |v| v >= threshold))
}

/// Default binarization threshold used throughout the pipeline.
pub const BINARIZE_THRESHOLD: f64 = 0.5;
