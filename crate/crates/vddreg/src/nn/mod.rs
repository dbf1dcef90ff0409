//! Minimal reverse-mode autodiff over `f64` tensors, sized for the small
//! convolutional networks this crate trains on CPU.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value; [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Feature maps are `(C, H, W)` arrays with batch size fixed at
//! one, matching the training protocol.

mod adam;
mod conv;
mod params;

pub use adam::Adam;
pub use params::{load_tensors, save_tensors, ParamSet};

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};

use crate::error::{Result, VddError};

pub type NodeId = usize;

enum Op {
    Leaf,
    /// 3x3 or 1x1 convolution, stride 1: x (Cin,H,W), w (Cout,Cin,k,k), b (Cout).
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
    },
    /// Transposed convolution for learned upsampling: stride s, kernel 2s,
    /// padding s/2, so the output is exactly s times larger.
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    /// 2x2 max pooling with stride 2; `argmax` stores the flat input index
    /// chosen for each output element.
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    /// Channel concatenation of (C_i, H, W) maps.
    ConcatC {
        xs: Vec<NodeId>,
    },
    /// Exact 90-degree rotation of the spatial axes (counter-clockwise when
    /// `ccw`, clockwise otherwise).
    Rot90 {
        x: NodeId,
        ccw: bool,
    },
    /// (1, H, W) -> (C, H, W) channel replication.
    Replicate {
        x: NodeId,
        n: usize,
    },
    /// Per-channel affine normalization (x - mean) / std; backward only
    /// needs the per-channel scale.
    Normalize {
        x: NodeId,
        std: Vec<f64>,
    },
    /// Channel Gram matrix of a (C, H, W) map, normalized by C*H*W.
    Gram {
        x: NodeId,
    },
    /// Squared Frobenius norm of (x - target); scalar output.
    FrobSqDiff {
        x: NodeId,
        target: Array2<f64>,
    },
    /// Mean squared error against a constant target; scalar output.
    MseConst {
        x: NodeId,
        target: ArrayD<f64>,
    },
    /// Mean squared error between two graph values; scalar output.
    MseBetween {
        x: NodeId,
        y: NodeId,
    },
    /// Weighted sum of scalar nodes.
    WeightedSum {
        terms: Vec<(f64, NodeId)>,
    },
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Autodiff tape. Build a fresh graph per training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Inserts a value that will not receive a gradient (inputs, frozen weights).
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a trainable value; its gradient is available after `backward`.
    pub fn param(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 0-dim node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[IxDyn(&[])]
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.nodes[id].grad.as_ref()
    }

    fn value3(&self, id: NodeId) -> ndarray::ArrayView3<'_, f64> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality()
            .expect("expected a (C, H, W) value")
    }

    // ---- operations ---------------------------------------------------

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> NodeId {
        let out = conv::conv2d_forward(
            &self.value3(x).to_owned(),
            &self.nodes[w].value,
            &self.nodes[b].value,
            pad,
        );
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, pad }, rg)
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        let out = conv::convt2d_forward(
            &self.value3(x).to_owned(),
            &self.nodes[w].value,
            &self.nodes[b].value,
            stride,
        );
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(out.into_dyn(), Op::ConvT2d { x, w, b, stride }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(|&v| v.max(0.0));
        let rg = self.requires(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(|&v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.requires(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let v = self.value3(x);
        let (c, h, w) = v.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array3::<f64>::zeros((c, ho, wo));
        let mut argmax = vec![0u32; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                            let val = v[(ci, iy, ix)];
                            if val > best {
                                best = val;
                                best_idx = (ci * h + iy) * w + ix;
                            }
                        }
                    }
                    out[(ci, oy, ox)] = best;
                    argmax[(ci * ho + oy) * wo + ox] = best_idx as u32;
                }
            }
        }
        let rg = self.requires(x);
        self.push(out.into_dyn(), Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<_> = xs.iter().map(|&id| self.value3(id)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("channel concat shape mismatch");
        let rg = xs.iter().any(|&id| self.requires(id));
        self.push(out.into_dyn(), Op::ConcatC { xs: xs.to_vec() }, rg)
    }

    pub fn rot90(&mut self, x: NodeId, ccw: bool) -> NodeId {
        let out = rot90_3(&self.value3(x).to_owned(), ccw);
        let rg = self.requires(x);
        self.push(out.into_dyn(), Op::Rot90 { x, ccw }, rg)
    }

    pub fn replicate_channels(&mut self, x: NodeId, n: usize) -> NodeId {
        let v = self.value3(x);
        let (c, h, w) = v.dim();
        assert_eq!(c, 1, "replicate expects a single-channel input");
        let mut out = Array3::<f64>::zeros((n, h, w));
        for ci in 0..n {
            out.index_axis_mut(Axis(0), ci).assign(&v.index_axis(Axis(0), 0));
        }
        let rg = self.requires(x);
        self.push(out.into_dyn(), Op::Replicate { x, n }, rg)
    }

    pub fn normalize(&mut self, x: NodeId, mean: &[f64], std: &[f64]) -> NodeId {
        let v = self.value3(x);
        let (c, _, _) = v.dim();
        assert_eq!(c, mean.len());
        assert_eq!(c, std.len());
        let mut out = v.to_owned();
        for ci in 0..c {
            let (m, s) = (mean[ci], std[ci]);
            out.index_axis_mut(Axis(0), ci).mapv_inplace(|p| (p - m) / s);
        }
        let rg = self.requires(x);
        self.push(
            out.into_dyn(),
            Op::Normalize {
                x,
                std: std.to_vec(),
            },
            rg,
        )
    }

    pub fn gram(&mut self, x: NodeId) -> NodeId {
        let out = gram_of(&self.value3(x).to_owned());
        let rg = self.requires(x);
        self.push(out.into_dyn(), Op::Gram { x }, rg)
    }

    pub fn frobenius_sq_diff(&mut self, x: NodeId, target: Array2<f64>) -> NodeId {
        let v: ndarray::ArrayView2<'_, f64> = self.nodes[x]
            .value
            .view()
            .into_dimensionality()
            .expect("frobenius_sq_diff expects a matrix");
        assert_eq!(v.dim(), target.dim());
        let s: f64 = v
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rg = self.requires(x);
        self.push(scalar_tensor(s), Op::FrobSqDiff { x, target }, rg)
    }

    pub fn mse_const(&mut self, x: NodeId, target: ArrayD<f64>) -> NodeId {
        assert_eq!(self.nodes[x].value.shape(), target.shape());
        let n = target.len() as f64;
        let s: f64 = self.nodes[x]
            .value
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rg = self.requires(x);
        self.push(scalar_tensor(s / n), Op::MseConst { x, target }, rg)
    }

    pub fn mse_between(&mut self, x: NodeId, y: NodeId) -> NodeId {
        assert_eq!(self.nodes[x].value.shape(), self.nodes[y].value.shape());
        let n = self.nodes[x].value.len() as f64;
        let s: f64 = self.nodes[x]
            .value
            .iter()
            .zip(self.nodes[y].value.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rg = self.requires(x) || self.requires(y);
        self.push(scalar_tensor(s / n), Op::MseBetween { x, y }, rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        let s: f64 = terms.iter().map(|&(w, id)| w * self.scalar(id)).sum();
        let rg = terms.iter().any(|&(_, id)| self.requires(id));
        self.push(
            scalar_tensor(s),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        )
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates gradients of `loss` (a scalar node) into every node that
    /// requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.shape().is_empty() {
            return Err(VddError::Training(
                "backward requires a scalar loss node".into(),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss].grad = Some(scalar_tensor(1.0));
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, contribution: ArrayD<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => *g += &contribution,
            slot => *slot = Some(contribution),
        }
    }

    fn step_backward(&mut self, id: NodeId) {
        let gy = self.nodes[id].grad.clone().expect("grad present");
        // Ops are matched by moving lightweight metadata out of the node.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (x, w, b, pad) = (*x, *w, *b, *pad);
                let gy3: Array3<f64> = gy.into_dimensionality().unwrap();
                let (gx, gw, gb) = conv::conv2d_backward(
                    &self.value3(x).to_owned(),
                    &self.nodes[w].value,
                    &gy3,
                    pad,
                    self.requires(x),
                    self.requires(w) || self.requires(b),
                );
                if let Some(gx) = gx {
                    self.add_grad(x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    self.add_grad(w, gw);
                }
                if let Some(gb) = gb {
                    self.add_grad(b, gb.into_dyn());
                }
            }
            Op::ConvT2d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let gy3: Array3<f64> = gy.into_dimensionality().unwrap();
                let (gx, gw, gb) = conv::convt2d_backward(
                    &self.value3(x).to_owned(),
                    &self.nodes[w].value,
                    &gy3,
                    stride,
                    self.requires(x),
                    self.requires(w) || self.requires(b),
                );
                if let Some(gx) = gx {
                    self.add_grad(x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    self.add_grad(w, gw);
                }
                if let Some(gb) = gb {
                    self.add_grad(b, gb.into_dyn());
                }
            }
            Op::Relu { x } => {
                let x = *x;
                let mut gx = gy;
                for (g, &v) in gx.iter_mut().zip(self.nodes[x].value.iter()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                self.add_grad(x, gx);
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let mut gx = gy;
                for (g, &y) in gx.iter_mut().zip(self.nodes[id].value.iter()) {
                    *g *= y * (1.0 - y);
                }
                self.add_grad(x, gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let shape = self.nodes[x].value.shape().to_vec();
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                {
                    let gx_flat = gx.as_slice_mut().unwrap();
                    for (&idx, &g) in argmax.iter().zip(gy.iter()) {
                        gx_flat[idx as usize] += g;
                    }
                }
                self.add_grad(x, gx);
            }
            Op::ConcatC { xs } => {
                let xs = xs.clone();
                let gy3: Array3<f64> = gy.into_dimensionality().unwrap();
                let mut offset = 0;
                for xid in xs {
                    let c = self.value3(xid).dim().0;
                    let part = gy3.slice(ndarray::s![offset..offset + c, .., ..]).to_owned();
                    self.add_grad(xid, part.into_dyn());
                    offset += c;
                }
            }
            Op::Rot90 { x, ccw } => {
                let (x, ccw) = (*x, *ccw);
                let gy3: Array3<f64> = gy.into_dimensionality().unwrap();
                // Gradient rotates the opposite way.
                let gx = rot90_3(&gy3, !ccw);
                self.add_grad(x, gx.into_dyn());
            }
            Op::Replicate { x, n } => {
                let (x, n) = (*x, *n);
                let gy3: Array3<f64> = gy.into_dimensionality().unwrap();
                let (_, h, w) = gy3.dim();
                let mut gx = Array3::<f64>::zeros((1, h, w));
                for ci in 0..n {
                    gx.index_axis_mut(Axis(0), 0)
                        .scaled_add(1.0, &gy3.index_axis(Axis(0), ci));
                }
                self.add_grad(x, gx.into_dyn());
            }
            Op::Normalize { x, std } => {
                let x = *x;
                let std = std.clone();
                let mut gx: Array3<f64> = gy.into_dimensionality().unwrap();
                for (ci, s) in std.iter().enumerate() {
                    gx.index_axis_mut(Axis(0), ci).mapv_inplace(|g| g / s);
                }
                self.add_grad(x, gx.into_dyn());
            }
            Op::Gram { x } => {
                let x = *x;
                let gg: Array2<f64> = gy.into_dimensionality().unwrap();
                let v = self.value3(x).to_owned();
                let (c, h, w) = v.dim();
                let f = v.into_shape_with_order((c, h * w)).unwrap();
                let norm = (c * h * w) as f64;
                // d/dF of tr(Gg^T F F^T)/n = (Gg + Gg^T) F / n.
                let sym = &gg + &gg.t();
                let gf = sym.dot(&f) / norm;
                let gf = if gf.is_standard_layout() {
                    gf
                } else {
                    gf.as_standard_layout().into_owned()
                };
                let gx = gf.into_shape_with_order((c, h, w)).unwrap();
                self.add_grad(x, gx.into_dyn());
            }
            Op::FrobSqDiff { x, target } => {
                let x = *x;
                let g = gy[IxDyn(&[])];
                let v: ndarray::ArrayView2<'_, f64> =
                    self.nodes[x].value.view().into_dimensionality().unwrap();
                let gx = (&v - target) * (2.0 * g);
                self.add_grad(x, gx.into_dyn());
            }
            Op::MseConst { x, target } => {
                let x = *x;
                let g = gy[IxDyn(&[])];
                let n = target.len() as f64;
                let gx = (&self.nodes[x].value - target) * (2.0 * g / n);
                self.add_grad(x, gx);
            }
            Op::MseBetween { x, y } => {
                let (x, y) = (*x, *y);
                let g = gy[IxDyn(&[])];
                let n = self.nodes[x].value.len() as f64;
                let diff = (&self.nodes[x].value - &self.nodes[y].value) * (2.0 * g / n);
                self.add_grad(y, -diff.clone());
                self.add_grad(x, diff);
            }
            Op::WeightedSum { terms } => {
                let terms = terms.clone();
                let g = gy[IxDyn(&[])];
                for (w, tid) in terms {
                    self.add_grad(tid, scalar_tensor(w * g));
                }
            }
        }
    }
}

fn scalar_tensor(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Exact 90-degree rotation of the spatial axes of a (C, H, W) array.
/// CCW maps input (y, x) to output (W-1-x, y); CW is its inverse.
pub fn rot90_3(v: &Array3<f64>, ccw: bool) -> Array3<f64> {
    let (c, h, w) = v.dim();
    let mut out = Array3::<f64>::zeros((c, w, h));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                if ccw {
                    out[(ci, w - 1 - x, y)] = v[(ci, y, x)];
                } else {
                    out[(ci, x, h - 1 - y)] = v[(ci, y, x)];
                }
            }
        }
    }
    out
}

/// Exact rotation for 2D rasters (images outside the graph).
pub fn rot90_2(v: &Array2<f64>, ccw: bool) -> Array2<f64> {
    let (h, w) = v.dim();
    let mut out = Array2::<f64>::zeros((w, h));
    for y in 0..h {
        for x in 0..w {
            if ccw {
                out[(w - 1 - x, y)] = v[(y, x)];
            } else {
                out[(x, h - 1 - y)] = v[(y, x)];
            }
        }
    }
    out
}

/// Channel Gram matrix normalized by C*H*W.
pub fn gram_of(v: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = v.dim();
    let f = v.view().into_shape_with_order((c, h * w)).unwrap();
    f.dot(&f.t()) / (c * h * w) as f64
}

/// He-normal initialization for a conv weight of shape (out, in, k, k).
pub fn he_normal<R: rand::Rng>(rng: &mut R, shape: (usize, usize, usize, usize)) -> ArrayD<f64> {
    let fan_in = (shape.1 * shape.2 * shape.3) as f64;
    let std = (2.0 / fan_in).sqrt();
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let samples = gaussian_samples(rng, n, std);
    ArrayD::from_shape_vec(IxDyn(&[shape.0, shape.1, shape.2, shape.3]), samples).unwrap()
}

/// Seeded Gaussian samples via Box-Muller, bit-reproducible across platforms.
pub fn gaussian_samples<R: rand::Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos() * std);
        if out.len() < n {
            out.push(r * theta.sin() * std);
        }
    }
    out
}

/// Bilinear-interpolation weights for a transposed-conv upsampler of factor
/// `s` (kernel 2s), the standard initialization for learned upsampling.
pub fn bilinear_upsample_weights(c_in: usize, c_out: usize, stride: usize) -> ArrayD<f64> {
    let k = 2 * stride;
    let mut w = ndarray::Array4::<f64>::zeros((c_in, c_out, k, k));
    let f = stride as f64;
    let center = f - 0.5;
    for a in 0..k {
        for b in 0..k {
            let wy = 1.0 - ((a as f64 - center).abs() / f);
            let wx = 1.0 - ((b as f64 - center).abs() / f);
            let v = wy.max(0.0) * wx.max(0.0);
            for c in 0..c_in.min(c_out) {
                w[(c, c, a, b)] = v;
            }
        }
    }
    w.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Central finite differences on every element of every leaf, compared
    /// against the analytic gradient from `backward`.
    fn check_gradients<F>(leaves: &[ArrayD<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| g.param(l.clone())).collect();
        let loss = build(&mut g, &ids);
        g.backward(loss).unwrap();
        let analytic: Vec<ArrayD<f64>> = ids
            .iter()
            .map(|&id| g.grad(id).cloned().unwrap_or_else(|| ArrayD::zeros(g.value(id).raw_dim())))
            .collect();

        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            for flat in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, l)| {
                            let mut l = l.clone();
                            if i == li {
                                l.as_slice_mut().unwrap()[flat] += delta;
                            }
                            g.param(l)
                        })
                        .collect();
                    let loss = build(&mut g, &ids);
                    g.scalar(loss)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[li].as_slice().unwrap()[flat];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "leaf {li} elem {flat}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 5, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check_gradients(&[x, w, b], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1);
            let t = ArrayD::zeros(g.value(y).raw_dim());
            g.mse_const(y, t)
        }, 1e-6);
    }

    #[test]
    fn conv2d_1x1_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[4, 3, 3]);
        let w = rand_tensor(&mut rng, &[1, 4, 1, 1]);
        let b = rand_tensor(&mut rng, &[1]);
        check_gradients(&[x, w, b], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 0);
            let t = ArrayD::from_elem(g.value(y).raw_dim(), 0.3);
            g.mse_const(y, t)
        }, 1e-6);
    }

    #[test]
    fn conv_transpose2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let b = rand_tensor(&mut rng, &[2]);
        check_gradients(&[x, w, b], |g, ids| {
            let y = g.conv_transpose2d(ids[0], ids[1], ids[2], 2);
            let t = ArrayD::zeros(g.value(y).raw_dim());
            g.mse_const(y, t)
        }, 1e-6);
    }

    #[test]
    fn conv_transpose2d_output_shape_and_bilinear_identity() {
        // A bilinear-initialized upsampler maps a constant map to the same
        // constant away from the border.
        let mut g = Graph::new();
        let x = g.constant(Array3::from_elem((1, 4, 4), 0.7).into_dyn());
        let w = g.constant(bilinear_upsample_weights(1, 1, 4));
        let b = g.constant(ArrayD::zeros(IxDyn(&[1])));
        let y = g.conv_transpose2d(x, w, b, 4);
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 16, 16]);
        let v3: Array3<f64> = v.clone().into_dimensionality().unwrap();
        for yy in 4..12 {
            for xx in 4..12 {
                assert!((v3[(0, yy, xx)] - 0.7).abs() < 1e-12, "at ({yy},{xx})");
            }
        }
    }

    #[test]
    fn pool_relu_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);
        check_gradients(&[x], |g, ids| {
            let p = g.max_pool2(ids[0]);
            let r = g.relu(p);
            let s = g.sigmoid(r);
            let t = ArrayD::from_elem(g.value(s).raw_dim(), 0.25);
            g.mse_const(s, t)
        }, 1e-6);
    }

    #[test]
    fn gram_and_frobenius_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4, 4]);
        let target = ndarray::Array2::from_shape_fn((3, 3), |(i, j)| 0.1 * (i + j) as f64);
        check_gradients(&[x], move |g, ids| {
            let gram = g.gram(ids[0]);
            g.frobenius_sq_diff(gram, target.clone())
        }, 1e-6);
    }

    #[test]
    fn rot_replicate_normalize_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[1, 3, 4]);
        check_gradients(&[x], |g, ids| {
            let r = g.replicate_channels(ids[0], 3);
            let n = g.normalize(r, &[0.4, 0.5, 0.6], &[0.2, 0.25, 0.3]);
            let rot = g.rot90(n, true);
            let back = g.rot90(rot, false);
            let cat = g.concat_channels(&[n, back]);
            let t = ArrayD::zeros(g.value(cat).raw_dim());
            g.mse_const(cat, t)
        }, 1e-6);
    }

    #[test]
    fn mse_between_and_weighted_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 3, 3]);
        let y = rand_tensor(&mut rng, &[2, 3, 3]);
        check_gradients(&[x, y], |g, ids| {
            let m1 = g.mse_between(ids[0], ids[1]);
            let t = ArrayD::zeros(g.value(ids[0]).raw_dim());
            let m2 = g.mse_const(ids[0], t);
            g.weighted_sum(&[(2.0, m1), (0.5, m2)])
        }, 1e-6);
    }

    #[test]
    fn rot90_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Array3<f64> = rand_tensor(&mut rng, &[2, 5, 7]).into_dimensionality().unwrap();
        assert_eq!(rot90_3(&rot90_3(&x, true), false), x);
        let x2: ndarray::Array2<f64> =
            rand_tensor(&mut rng, &[4, 6]).into_dimensionality().unwrap();
        assert_eq!(rot90_2(&rot90_2(&x2, true), false), x2);
    }

    #[test]
    fn frozen_constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(ArrayD::from_elem(IxDyn(&[1, 4, 4]), 0.5));
        let w = g.constant(ArrayD::from_elem(IxDyn(&[2, 1, 3, 3]), 0.1));
        let b = g.constant(ArrayD::zeros(IxDyn(&[2])));
        let y = g.conv2d(x, w, b, 1);
        let t = ArrayD::zeros(g.value(y).raw_dim());
        let loss = g.mse_const(y, t);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(b).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn gram_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Array3<f64> = rand_tensor(&mut rng, &[4, 5, 6]).into_dimensionality().unwrap();
        let g = gram_of(&x);
        let (c, h, w) = x.dim();
        for a in 0..c {
            for b in 0..c {
                let mut acc = 0.0;
                for yy in 0..h {
                    for xx in 0..w {
                        acc += x[(a, yy, xx)] * x[(b, yy, xx)];
                    }
                }
                acc /= (c * h * w) as f64;
                assert!((g[(a, b)] - acc).abs() < 1e-10);
            }
        }
    }
}
