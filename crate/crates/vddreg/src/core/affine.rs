//! The 4-degree-of-freedom planar transform used for global registration:
//! uniform scale, rotation, and translation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VddError};

/// Tolerance for the scaled-rotation structure of the 2x2 block.
const STRUCTURE_TOL: f64 = 1e-9;

/// A partial affine transform stored as the 2x3 matrix
/// `[[a, -b, tx], [b, a, ty]]`, i.e. `p' = s R(theta) p + t` with
/// `s = sqrt(a^2 + b^2)` and `theta = atan2(b, a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialAffine2D {
    a: f64,
    b: f64,
    tx: f64,
    ty: f64,
}

impl PartialAffine2D {
    /// Builds a transform from the four free parameters. Fails when the
    /// implied scale is zero or non-finite.
    pub fn from_ab(a: f64, b: f64, tx: f64, ty: f64) -> Result<Self> {
        let s = a.hypot(b);
        if !s.is_finite() || s <= 0.0 {
            return Err(VddError::Validation(format!(
                "partial affine scale must be positive and finite, got {s}"
            )));
        }
        if !(tx.is_finite() && ty.is_finite()) {
            return Err(VddError::Validation(
                "partial affine translation must be finite".into(),
            ));
        }
        Ok(Self { a, b, tx, ty })
    }

    /// Builds a transform from (scale, rotation, translation).
    pub fn from_params(scale: f64, theta: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(VddError::Validation(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        Self::from_ab(scale * theta.cos(), scale * theta.sin(), tx, ty)
    }

    /// Validates a full 2x3 matrix against the scaled-rotation constraint
    /// (equal diagonal, antisymmetric off-diagonal within 1e-9).
    pub fn from_matrix(m: [[f64; 3]; 2]) -> Result<Self> {
        let scale = m[0][0].hypot(m[1][0]).max(1.0);
        if (m[0][0] - m[1][1]).abs() > STRUCTURE_TOL * scale
            || (m[0][1] + m[1][0]).abs() > STRUCTURE_TOL * scale
        {
            return Err(VddError::Validation(
                "matrix is not a scaled rotation plus translation".into(),
            ));
        }
        Self::from_ab(m[0][0], m[1][0], m[0][2], m[1][2])
    }

    pub fn identity() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    /// The 2x3 row-major matrix `[[a, -b, tx], [b, a, ty]]`.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.a, -self.b, self.tx], [self.b, self.a, self.ty]]
    }

    pub fn params_ab(&self) -> (f64, f64, f64, f64) {
        (self.a, self.b, self.tx, self.ty)
    }

    /// Uniform scale factor.
    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    /// Rotation angle in radians, in (-pi, pi].
    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn translation(&self) -> (f64, f64) {
        (self.tx, self.ty)
    }

    /// Decomposes into (scale, rotation, tx, ty).
    pub fn decompose(&self) -> (f64, f64, f64, f64) {
        (self.scale(), self.rotation(), self.tx, self.ty)
    }
}

/// Serialized form: `{ "matrix": [[a,-b,tx],[b,a,ty]], "dof": 4 }`.
#[derive(Serialize, Deserialize)]
struct AffineWire {
    matrix: [[f64; 3]; 2],
    dof: u8,
}

impl Serialize for PartialAffine2D {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        AffineWire {
            matrix: self.matrix(),
            dof: 4,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PartialAffine2D {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = AffineWire::deserialize(deserializer)?;
        if wire.dof != 4 {
            return Err(serde::de::Error::custom(format!(
                "expected dof 4, got {}",
                wire.dof
            )));
        }
        PartialAffine2D::from_matrix(wire.matrix).map_err(serde::de::Error::custom)
    }
}
