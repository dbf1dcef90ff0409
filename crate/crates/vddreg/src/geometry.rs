//! Construction, fitting, application, and composition of partial-affine
//! transforms, plus image warping.
//!
//! Coordinates follow the crate convention: x = column, y = row, origin at
//! the top-left pixel center. [`warp_image`] takes the map from *output*
//! coordinates to *source* coordinates, which is the direction estimated by
//! the registration module (fixed frame -> moving frame).

use ndarray::Array2;

use crate::core::{sample_bilinear, CorrespondenceSet, GrayImage, PartialAffine2D};
use crate::error::{Result, VddError};

/// Applies the transform to a point: `(a x - b y + tx, b x + a y + ty)`.
pub fn apply(t: &PartialAffine2D, p: (f64, f64)) -> (f64, f64) {
    let (a, b, tx, ty) = t.params_ab();
    (a * p.0 - b * p.1 + tx, b * p.0 + a * p.1 + ty)
}

/// Composes two transforms: `compose(t1, t2)` maps `p` to `t1(t2(p))`.
pub fn compose(t1: &PartialAffine2D, t2: &PartialAffine2D) -> PartialAffine2D {
    let (a1, b1, tx1, ty1) = t1.params_ab();
    let (a2, b2, tx2, ty2) = t2.params_ab();
    // Complex multiplication of (a + ib) terms plus translated offset.
    let a = a1 * a2 - b1 * b2;
    let b = b1 * a2 + a1 * b2;
    let tx = a1 * tx2 - b1 * ty2 + tx1;
    let ty = b1 * tx2 + a1 * ty2 + ty1;
    PartialAffine2D::from_ab(a, b, tx, ty).expect("composition of valid transforms is valid")
}

/// Inverts the transform. Fails only for (numerically) zero scale, which a
/// validated `PartialAffine2D` cannot carry.
pub fn invert(t: &PartialAffine2D) -> Result<PartialAffine2D> {
    let (a, b, tx, ty) = t.params_ab();
    let s2 = a * a + b * b;
    if s2 <= f64::EPSILON {
        return Err(VddError::DegenerateSample(
            "cannot invert transform with zero scale".into(),
        ));
    }
    let ia = a / s2;
    let ib = -b / s2;
    let itx = -(ia * tx - ib * ty);
    let ity = -(ib * tx + ia * ty);
    PartialAffine2D::from_ab(ia, ib, itx, ity)
}

/// Least-squares fit over the parameters (a, b, tx, ty) minimizing
/// `sum ||t(p_a) - p_b||^2`. Solving in this parameterization keeps the
/// scaled-rotation constraint satisfied by construction.
pub fn fit_partial_affine(c: &CorrespondenceSet) -> Result<PartialAffine2D> {
    if c.len() < 2 {
        return Err(VddError::DegenerateSample(format!(
            "partial affine needs at least 2 point pairs, got {}",
            c.len()
        )));
    }
    // Normal equations of the linear system
    //   [x, -y, 1, 0] u = x'
    //   [y,  x, 0, 1] u = y'   with u = (a, b, tx, ty).
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for ((x, y), (xp, yp)) in c.iter() {
        let rows = [([x, -y, 1.0, 0.0], xp), ([y, x, 0.0, 1.0], yp)];
        for (r, rhs) in rows {
            for i in 0..4 {
                for j in 0..4 {
                    ata[i][j] += r[i] * r[j];
                }
                atb[i] += r[i] * rhs;
            }
        }
    }
    let u = solve4(ata, atb).ok_or_else(|| {
        VddError::DegenerateSample("coincident points, normal equations singular".into())
    })?;
    PartialAffine2D::from_ab(u[0], u[1], u[2], u[3])
        .map_err(|_| VddError::DegenerateSample("fitted transform has zero scale".into()))
}

/// Gaussian elimination with partial pivoting for the 4x4 normal system.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    // Scale-aware singularity threshold.
    let norm = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = norm.max(1.0) * 1e-12;
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < tol {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Warps an image by inverse-mapped bilinear resampling: for each output
/// pixel `p`, the result is `img` sampled at `t(p)`; samples falling outside
/// the source are zero.
pub fn warp_image(
    img: &GrayImage,
    t: &PartialAffine2D,
    out_dims: (usize, usize),
) -> Result<GrayImage> {
    let (out_w, out_h) = out_dims;
    if out_w == 0 || out_h == 0 {
        return Err(VddError::Dimension("warp output dims must be positive".into()));
    }
    let warped = warp_array(img.pixels(), t, out_dims);
    // Bilinear blends of in-range values stay in [0, 1].
    GrayImage::new(warped, img.modality())
}

/// Array-level warp used for images, masks, and probability maps alike.
pub fn warp_array(values: &Array2<f64>, t: &PartialAffine2D, out_dims: (usize, usize)) -> Array2<f64> {
    let (out_w, out_h) = out_dims;
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (sx, sy) = apply(t, (x as f64, y as f64));
        sample_bilinear(values, sx, sy)
    })
}
