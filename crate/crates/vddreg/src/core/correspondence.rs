//! Paired 2D points across two images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VddError};

/// Number of annotated point pairs per image pair in the supported
/// ground-truth formats.
pub const GT_PAIR_COUNT: usize = 6;

/// Matched point pairs: `points_a[i]` in image A corresponds to
/// `points_b[i]` in image B. For dataset ground truth, A is the fixed
/// (OCTA/FA role) image and B the moving (EMA/CF role) image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    points_a: Vec<(f64, f64)>,
    points_b: Vec<(f64, f64)>,
}

impl CorrespondenceSet {
    pub fn new(points_a: Vec<(f64, f64)>, points_b: Vec<(f64, f64)>) -> Result<Self> {
        if points_a.len() != points_b.len() {
            return Err(VddError::Validation(format!(
                "correspondence lists differ in length: {} vs {}",
                points_a.len(),
                points_b.len()
            )));
        }
        for &(x, y) in points_a.iter().chain(points_b.iter()) {
            if !(x.is_finite() && y.is_finite()) {
                return Err(VddError::Validation("non-finite point coordinate".into()));
            }
        }
        Ok(Self { points_a, points_b })
    }

    pub fn len(&self) -> usize {
        self.points_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_a.is_empty()
    }

    pub fn points_a(&self) -> &[(f64, f64)] {
        &self.points_a
    }

    pub fn points_b(&self) -> &[(f64, f64)] {
        &self.points_b
    }

    pub fn iter(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        self.points_a.iter().copied().zip(self.points_b.iter().copied())
    }

    /// Checks every point against its image bounds (width, height in pixels).
    pub fn check_bounds(&self, dims_a: (usize, usize), dims_b: (usize, usize)) -> Result<()> {
        let inside = |(x, y): (f64, f64), (w, h): (usize, usize)| {
            x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64
        };
        for (i, (pa, pb)) in self.iter().enumerate() {
            if !inside(pa, dims_a) {
                return Err(VddError::Validation(format!(
                    "point {i} ({}, {}) outside image A bounds {}x{}",
                    pa.0, pa.1, dims_a.0, dims_a.1
                )));
            }
            if !inside(pb, dims_b) {
                return Err(VddError::Validation(format!(
                    "point {i} ({}, {}) outside image B bounds {}x{}",
                    pb.0, pb.1, dims_b.0, dims_b.1
                )));
            }
        }
        Ok(())
    }

    /// Applies per-axis scale factors to both point lists (preprocessing).
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        let map = |pts: &[(f64, f64)]| pts.iter().map(|&(x, y)| (x * sx, y * sy)).collect();
        Self {
            points_a: map(&self.points_a),
            points_b: map(&self.points_b),
        }
    }

    /// Parses the plain-text format: one line per pair, four
    /// whitespace-separated reals `x_a y_a x_b y_b`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut points_a = Vec::new();
        let mut points_b = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(VddError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected 4 fields, found {}", fields.len()),
                });
            }
            let mut vals = [0.0f64; 4];
            for (i, f) in fields.iter().enumerate() {
                vals[i] = f.parse::<f64>().map_err(|e| VddError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("bad number '{f}': {e}"),
                })?;
            }
            points_a.push((vals[0], vals[1]));
            points_b.push((vals[2], vals[3]));
        }
        Self::new(points_a, points_b)
    }

    /// Renders the plain-text format parsed by [`CorrespondenceSet::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (pa, pb) in self.iter() {
            out.push_str(&format!("{} {} {} {}\n", pa.0, pa.1, pb.0, pb.1));
        }
        out
    }

    /// Loads and parses a correspondence file.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(VddError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }

    /// Validates the ground-truth contract: exactly six pairs.
    pub fn require_gt_count(&self, path: &Path) -> Result<()> {
        if self.len() != GT_PAIR_COUNT {
            return Err(VddError::Parse {
                path: path.to_path_buf(),
                line: self.len() + 1,
                msg: format!(
                    "ground-truth file must contain exactly {GT_PAIR_COUNT} point pairs, found {}",
                    self.len()
                ),
            });
        }
        Ok(())
    }
}
