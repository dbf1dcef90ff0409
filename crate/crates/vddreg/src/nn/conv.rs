//! Convolution kernels: stride-1 conv via im2col + GEMM, and the
//! stride-s/kernel-2s transposed convolution used for learned upsampling.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD};

/// `.dot()` may hand back an F-order result when an operand is transposed;
/// reshapes and row slices below need C order.
fn std2(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}


/// Unfolds x (Cin,H,W) into a (Cin*k*k, Ho*Wo) matrix for a stride-1
/// convolution with square kernel k and padding `pad` (zeros outside).
fn im2col(x: &Array3<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                let mut out_row = cols.row_mut(row);
                let out_slice = out_row.as_slice_mut().unwrap();
                for oy in 0..ho {
                    let iy = oy + di;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    // Valid output-x range for this kernel offset.
                    let ox_lo = pad.saturating_sub(dj);
                    let ox_hi = (w + pad - dj).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = ox_lo + dj - pad;
                    let src = x.slice(ndarray::s![ci, iy, ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    let dst = &mut out_slice[oy * wo + ox_lo..oy * wo + ox_hi];
                    dst.copy_from_slice(src.as_slice().unwrap());
                }
            }
        }
    }
    cols
}

/// Folds a (Cin*k*k, Ho*Wo) matrix back onto an (Cin,H,W) array with
/// accumulation; the adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, dims: (usize, usize, usize), k: usize, pad: usize) -> Array3<f64> {
    let (c, h, w) = dims;
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                let col_row = cols.row(row);
                let col_slice = col_row.as_slice().unwrap();
                for oy in 0..ho {
                    let iy = oy + di;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let ox_lo = pad.saturating_sub(dj);
                    let ox_hi = (w + pad - dj).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = ox_lo + dj - pad;
                    let mut dst = x.slice_mut(ndarray::s![ci, iy, ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    let dst = dst.as_slice_mut().unwrap();
                    for (d, s) in dst.iter_mut().zip(&col_slice[oy * wo + ox_lo..oy * wo + ox_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    x
}

pub(super) fn conv2d_forward(
    x: &Array3<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    pad: usize,
) -> Array3<f64> {
    let w: ndarray::ArrayView4<'_, f64> = w.view().into_dimensionality().unwrap();
    let b: ndarray::ArrayView1<'_, f64> = b.view().into_dimensionality().unwrap();
    let (co, ci, k, _) = w.dim();
    let (xc, h, wdt) = x.dim();
    assert_eq!(ci, xc, "conv2d channel mismatch");
    let ho = h + 2 * pad + 1 - k;
    let wo = wdt + 2 * pad + 1 - k;
    let cols = im2col(x, k, pad);
    let wmat = w.into_shape_with_order((co, ci * k * k)).unwrap();
    let mut out = std2(wmat.dot(&cols));
    for (mut row, &bias) in out.rows_mut().into_iter().zip(b.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    out.into_shape_with_order((co, ho, wo)).unwrap()
}

/// Returns (grad_x, grad_w, grad_b); each side is computed only when needed.
pub(super) fn conv2d_backward(
    x: &Array3<f64>,
    w: &ArrayD<f64>,
    gy: &Array3<f64>,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Array3<f64>>, Option<ArrayD<f64>>, Option<Array1<f64>>) {
    let w4: ndarray::ArrayView4<'_, f64> = w.view().into_dimensionality().unwrap();
    let (co, ci, k, _) = w4.dim();
    let (gc, ho, wo) = gy.dim();
    assert_eq!(gc, co);
    let gymat = gy.view().into_shape_with_order((co, ho * wo)).unwrap();
    let wmat = w4.into_shape_with_order((co, ci * k * k)).unwrap();

    let gx = need_gx.then(|| {
        let gcols = std2(wmat.t().dot(&gymat));
        col2im(&gcols, x.dim(), k, pad)
    });
    let (gw, gb) = if need_gw {
        let cols = im2col(x, k, pad);
        let gw = std2(gymat.dot(&cols.t()));
        let gb = gymat.sum_axis(ndarray::Axis(1));
        (
            Some(gw.into_shape_with_order((co, ci, k, k)).unwrap().into_dyn()),
            Some(gb),
        )
    } else {
        (None, None)
    };
    (gx, gw, gb)
}

/// Transposed convolution: x (Cin,H,W), w (Cin,Cout,2s,2s), stride s,
/// padding s/2 -> output (Cout, H*s, W*s).
pub(super) fn convt2d_forward(
    x: &Array3<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    stride: usize,
) -> Array3<f64> {
    let w4: ndarray::ArrayView4<'_, f64> = w.view().into_dimensionality().unwrap();
    let b1: ndarray::ArrayView1<'_, f64> = b.view().into_dimensionality().unwrap();
    let (ci, co, k, _) = w4.dim();
    let (xc, h, wdt) = x.dim();
    assert_eq!(ci, xc, "conv_transpose2d channel mismatch");
    assert_eq!(k, 2 * stride);
    assert!(stride >= 2 && stride % 2 == 0, "upsampling stride must be even");
    let pad = stride / 2;
    let (ho, wo) = (h * stride, wdt * stride);
    let mut out = Array3::<f64>::zeros((co, ho, wo));
    for c_out in 0..co {
        out.index_axis_mut(ndarray::Axis(0), c_out).fill(b1[c_out]);
    }
    // Scatter per kernel tap: output row oy = iy*s + a - p, column stride s.
    for c_in in 0..ci {
        for c_out in 0..co {
            for a in 0..k {
                for bk in 0..k {
                    let wv = w4[(c_in, c_out, a, bk)];
                    if wv == 0.0 {
                        continue;
                    }
                    for iy in 0..h {
                        let oy = (iy * stride + a) as i64 - pad as i64;
                        if oy < 0 || oy >= ho as i64 {
                            continue;
                        }
                        let oy = oy as usize;
                        // Valid ix range so that ox = ix*s + bk - p lies in [0, wo).
                        let (ix0, ox0) = if bk >= pad {
                            (0usize, bk - pad)
                        } else {
                            (1usize, bk + stride - pad)
                        };
                        if ix0 >= wdt {
                            continue;
                        }
                        let n = wdt - ix0;
                        let n = n.min((wo - ox0).div_ceil(stride));
                        if n == 0 {
                            continue;
                        }
                        let xr = x.slice(ndarray::s![c_in, iy, ix0..ix0 + n]);
                        let mut orow = out.slice_mut(ndarray::s![
                            c_out,
                            oy,
                            ox0..ox0 + (n - 1) * stride + 1; stride
                        ]);
                        orow.zip_mut_with(&xr, |o, &xv| *o += wv * xv);
                    }
                }
            }
        }
    }
    out
}

pub(super) fn convt2d_backward(
    x: &Array3<f64>,
    w: &ArrayD<f64>,
    gy: &Array3<f64>,
    stride: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Array3<f64>>, Option<ArrayD<f64>>, Option<Array1<f64>>) {
    let w4: ndarray::ArrayView4<'_, f64> = w.view().into_dimensionality().unwrap();
    let (ci, co, k, _) = w4.dim();
    let (xc, h, wdt) = x.dim();
    assert_eq!(ci, xc);
    let pad = stride / 2;
    let (gc, ho, wo) = gy.dim();
    assert_eq!(gc, co);

    let gx = need_gx.then(|| {
        let mut gx = Array3::<f64>::zeros((ci, h, wdt));
        for c_in in 0..ci {
            for c_out in 0..co {
                for a in 0..k {
                    for bk in 0..k {
                        let wv = w4[(c_in, c_out, a, bk)];
                        if wv == 0.0 {
                            continue;
                        }
                        for iy in 0..h {
                            let oy = (iy * stride + a) as i64 - pad as i64;
                            if oy < 0 || oy >= ho as i64 {
                                continue;
                            }
                            let oy = oy as usize;
                            let (ix0, ox0) = if bk >= pad {
                                (0usize, bk - pad)
                            } else {
                                (1usize, bk + stride - pad)
                            };
                            if ix0 >= wdt {
                                continue;
                            }
                            let n = (wdt - ix0).min((wo - ox0).div_ceil(stride));
                            if n == 0 {
                                continue;
                            }
                            let grow = gy.slice(ndarray::s![
                                c_out,
                                oy,
                                ox0..ox0 + (n - 1) * stride + 1; stride
                            ]);
                            let mut gxr = gx.slice_mut(ndarray::s![c_in, iy, ix0..ix0 + n]);
                            gxr.zip_mut_with(&grow, |g, &gv| *g += wv * gv);
                        }
                    }
                }
            }
        }
        gx
    });

    let (gw, gb) = if need_gw {
        let mut gw = Array4::<f64>::zeros((ci, co, k, k));
        for c_in in 0..ci {
            for c_out in 0..co {
                for a in 0..k {
                    for bk in 0..k {
                        let mut acc = 0.0;
                        for iy in 0..h {
                            let oy = (iy * stride + a) as i64 - pad as i64;
                            if oy < 0 || oy >= ho as i64 {
                                continue;
                            }
                            let oy = oy as usize;
                            let (ix0, ox0) = if bk >= pad {
                                (0usize, bk - pad)
                            } else {
                                (1usize, bk + stride - pad)
                            };
                            if ix0 >= wdt {
                                continue;
                            }
                            let n = (wdt - ix0).min((wo - ox0).div_ceil(stride));
                            if n == 0 {
                                continue;
                            }
                            let xr = x.slice(ndarray::s![c_in, iy, ix0..ix0 + n]);
                            let grow = gy.slice(ndarray::s![
                                c_out,
                                oy,
                                ox0..ox0 + (n - 1) * stride + 1; stride
                            ]);
                            acc += xr
                                .iter()
                                .zip(grow.iter())
                                .map(|(&xv, &gv)| xv * gv)
                                .sum::<f64>();
                        }
                        gw[(c_in, c_out, a, bk)] = acc;
                    }
                }
            }
        }
        let mut gb = Array1::<f64>::zeros(co);
        for c_out in 0..co {
            gb[c_out] = gy.index_axis(ndarray::Axis(0), c_out).sum();
        }
        (Some(gw.into_dyn()), Some(gb))
    } else {
        (None, None)
    };
    (gx, gw, gb)
}
