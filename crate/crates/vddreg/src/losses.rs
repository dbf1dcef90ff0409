//! Training losses: supervised MSE, rotation self-comparison, Gram-matrix
//! style loss, and the stage-1/stage-2 composites.
//!
//! Every loss exists in two forms: a value-level function returning `f64`
//! (the public contract, used by tests and evaluation) and a graph builder
//! used by the trainer so a whole composite can be differentiated in one
//! backward pass. Both forms share the same node construction, so they agree
//! to machine precision.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::core::{BinaryMask, GrayImage, ProbabilityMap, StyleTarget};
use crate::error::{Result, VddError};
use crate::nn::{gram_of, Graph, NodeId};
use crate::segmentation::{to_chw, PerceptualBackbone, SegmentationNetwork};

/// Weights and tap selection for the style-based stage-2 objective.
///
/// Defaults: four taps of the 16-layer-class backbone, style weight 100 for
/// the low-density stream and 1 for the high-density stream, 1e-3 for the
/// self-comparison terms, and 1 for the supervised MSE term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleLossConfig {
    /// Ordered names of the four backbone taps the style loss sums over.
    pub tap_layers: [String; 4],
    /// Style-loss weight for the low-vessel-density stream.
    pub w_st_e: f64,
    /// Style-loss weight for the high-vessel-density stream.
    pub w_st_o: f64,
    /// Self-comparison weight.
    pub w_sc: f64,
    /// Supervised MSE weight (stage 1).
    pub w_v: f64,
}

impl Default for StyleLossConfig {
    fn default() -> Self {
        Self {
            tap_layers: [
                "relu1_2".into(),
                "relu2_2".into(),
                "relu3_3".into(),
                "relu4_3".into(),
            ],
            w_st_e: 100.0,
            w_st_o: 1.0,
            w_sc: 1e-3,
            w_v: 1.0,
        }
    }
}

impl StyleLossConfig {
    /// Uses the given backbone's own tap names (handy for the reduced
    /// architectures whose taps are named differently).
    pub fn for_backbone(backbone: &PerceptualBackbone) -> Self {
        Self {
            tap_layers: backbone.spec().taps.clone(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in [self.w_st_e, self.w_st_o, self.w_sc, self.w_v] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(VddError::Config(format!(
                    "loss weights must be non-negative and finite, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// An intermediate activation of the backbone: (C, H, W) values plus the
/// tap it was read from.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub tap_name: String,
}

/// Mean squared error between a probability map and a binary mask.
pub fn mse_loss(pred: &ProbabilityMap, gt: &BinaryMask) -> Result<f64> {
    if pred.values().dim() != gt.values().dim() {
        return Err(VddError::Dimension(format!(
            "mse_loss dims {:?} vs {:?}",
            pred.values().dim(),
            gt.values().dim()
        )));
    }
    let n = pred.values().len() as f64;
    let s: f64 = pred
        .values()
        .iter()
        .zip(gt.values().iter())
        .map(|(&p, &m)| {
            let d = p - f64::from(m);
            d * d
        })
        .sum();
    Ok(s / n)
}

/// Rotation-consistency penalty: MSE between the prediction on a 90-degree
/// rotated input (rotated back) and the prediction on the original input.
/// The rotation is an exact array permutation, so the loss is exactly zero
/// for rotation-equivariant functions.
pub fn self_comparison_loss(net: &SegmentationNetwork, img: &GrayImage) -> Result<f64> {
    net.check_dims(img.width(), img.height())?;
    let mut g = Graph::new();
    let ids = net.params().bind(&mut g, false);
    let sc = self_comparison_node(&mut g, net, &ids, img);
    Ok(g.scalar(sc))
}

fn self_comparison_node(
    g: &mut Graph,
    net: &SegmentationNetwork,
    ids: &[NodeId],
    img: &GrayImage,
) -> NodeId {
    let input = g.constant(to_chw(img.pixels()));
    let pred = net.forward(g, ids, input);
    let rotated_in = g.rot90(input, true);
    let pred_rot = net.forward(g, ids, rotated_in);
    let unrot = g.rot90(pred_rot, false);
    g.mse_between(unrot, pred)
}

/// Channel Gram matrix of a feature map, normalized by C*H*W. Symmetric and
/// positive semi-definite by construction.
pub fn gram_matrix(f: &FeatureMap) -> Array2<f64> {
    gram_of(&f.values)
}

/// Precomputed Gram matrices of the style target, one per configured tap.
/// The target never changes during training, so these are computed once.
#[derive(Debug, Clone)]
pub struct TargetGrams {
    grams: Vec<(String, Array2<f64>)>,
}

impl TargetGrams {
    pub fn compute(
        backbone: &PerceptualBackbone,
        target: &StyleTarget,
        cfg: &StyleLossConfig,
    ) -> Result<Self> {
        let maps = backbone.feature_maps(&target.mask.to_f64());
        let mut grams = Vec::with_capacity(cfg.tap_layers.len());
        for tap in &cfg.tap_layers {
            let fm = maps
                .iter()
                .find(|m| &m.tap_name == tap)
                .ok_or_else(|| VddError::MissingTap(tap.clone()))?;
            grams.push((tap.clone(), gram_matrix(fm)));
        }
        Ok(Self { grams })
    }

    fn get(&self, tap: &str) -> Option<&Array2<f64>> {
        self.grams
            .iter()
            .find(|(name, _)| name == tap)
            .map(|(_, g)| g)
    }
}

/// Builds the style-loss node for a prediction node: the sum over configured
/// taps of the squared Frobenius distance between prediction and target
/// Gram matrices.
fn style_node(
    g: &mut Graph,
    backbone: &PerceptualBackbone,
    pred: NodeId,
    targets: &TargetGrams,
    cfg: &StyleLossConfig,
) -> Result<NodeId> {
    let taps = backbone.tap_nodes(g, pred);
    let mut terms = Vec::with_capacity(cfg.tap_layers.len());
    for tap in &cfg.tap_layers {
        let (_, node) = taps
            .iter()
            .find(|(name, _)| name == tap)
            .ok_or_else(|| VddError::MissingTap(tap.clone()))?;
        let target = targets
            .get(tap)
            .ok_or_else(|| VddError::MissingTap(tap.clone()))?;
        let gram = g.gram(*node);
        let term = g.frobenius_sq_diff(gram, target.clone());
        terms.push((1.0, term));
    }
    Ok(g.weighted_sum(&terms))
}

/// Style loss of a prediction against the joint style target: Gram-matrix
/// Frobenius distances summed over the four configured backbone taps.
pub fn style_loss(
    pred: &ProbabilityMap,
    target: &StyleTarget,
    backbone: &PerceptualBackbone,
    cfg: &StyleLossConfig,
) -> Result<f64> {
    let targets = TargetGrams::compute(backbone, target, cfg)?;
    let mut g = Graph::new();
    let pred_node = g.constant(to_chw(pred.values()));
    let node = style_node(&mut g, backbone, pred_node, &targets, cfg)?;
    Ok(g.scalar(node))
}

/// Component nodes of a stage-1 step, for loss reporting.
pub struct Stage1Nodes {
    pub loss: NodeId,
    pub mse: NodeId,
    pub sc: NodeId,
}

pub fn stage1_loss_node(
    g: &mut Graph,
    net: &SegmentationNetwork,
    ids: &[NodeId],
    img: &GrayImage,
    gt: &BinaryMask,
    cfg: &StyleLossConfig,
) -> Result<Stage1Nodes> {
    if (img.height(), img.width()) != gt.values().dim() {
        return Err(VddError::Dimension(format!(
            "image {}x{} vs mask {:?}",
            img.width(),
            img.height(),
            gt.values().dim()
        )));
    }
    let input = g.constant(to_chw(img.pixels()));
    let pred = net.forward(g, ids, input);
    let gt_chw = to_chw(&gt.to_f64());
    let mse = g.mse_const(pred, gt_chw);

    let rotated_in = g.rot90(input, true);
    let pred_rot = net.forward(g, ids, rotated_in);
    let unrot = g.rot90(pred_rot, false);
    let sc = g.mse_between(unrot, pred);

    let loss = g.weighted_sum(&[(cfg.w_v, mse), (cfg.w_sc, sc)]);
    Ok(Stage1Nodes { loss, mse, sc })
}

/// Supervised stage-1 objective: `w_v * MSE + w_sc * self-comparison`.
pub fn stage1_loss(
    net: &SegmentationNetwork,
    img: &GrayImage,
    gt: &BinaryMask,
    cfg: &StyleLossConfig,
) -> Result<f64> {
    net.check_dims(img.width(), img.height())?;
    cfg.validate()?;
    let mut g = Graph::new();
    let ids = net.params().bind(&mut g, false);
    let nodes = stage1_loss_node(&mut g, net, &ids, img, gt, cfg)?;
    Ok(g.scalar(nodes.loss))
}

/// Component nodes of a stage-2 step, for loss reporting.
pub struct Stage2Nodes {
    pub loss: NodeId,
    pub st_e: NodeId,
    pub st_o: NodeId,
    pub sc_e: NodeId,
    pub sc_o: NodeId,
}

#[allow(clippy::too_many_arguments)]
pub fn stage2_loss_node(
    g: &mut Graph,
    net_e: &SegmentationNetwork,
    ids_e: &[NodeId],
    net_o: &SegmentationNetwork,
    ids_o: &[NodeId],
    img_e: &GrayImage,
    img_o: &GrayImage,
    targets: &TargetGrams,
    backbone: &PerceptualBackbone,
    cfg: &StyleLossConfig,
) -> Result<Stage2Nodes> {
    let input_e = g.constant(to_chw(img_e.pixels()));
    let pred_e = net_e.forward(g, ids_e, input_e);
    let input_o = g.constant(to_chw(img_o.pixels()));
    let pred_o = net_o.forward(g, ids_o, input_o);

    let st_e = style_node(g, backbone, pred_e, targets, cfg)?;
    let st_o = style_node(g, backbone, pred_o, targets, cfg)?;

    let rot_e = g.rot90(input_e, true);
    let pred_e_rot = net_e.forward(g, ids_e, rot_e);
    let unrot_e = g.rot90(pred_e_rot, false);
    let sc_e = g.mse_between(unrot_e, pred_e);

    let rot_o = g.rot90(input_o, true);
    let pred_o_rot = net_o.forward(g, ids_o, rot_o);
    let unrot_o = g.rot90(pred_o_rot, false);
    let sc_o = g.mse_between(unrot_o, pred_o);

    let loss = g.weighted_sum(&[
        (cfg.w_st_e, st_e),
        (cfg.w_st_o, st_o),
        (cfg.w_sc, sc_e),
        (cfg.w_sc, sc_o),
    ]);
    Ok(Stage2Nodes {
        loss,
        st_e,
        st_o,
        sc_e,
        sc_o,
    })
}

/// Unsupervised stage-2 objective over one image pair:
/// `w_st_e * style(low-VD pred) + w_st_o * style(high-VD pred)
///  + w_sc * (self-comparison of both streams)`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    net_e: &SegmentationNetwork,
    net_o: &SegmentationNetwork,
    img_e: &GrayImage,
    img_o: &GrayImage,
    target: &StyleTarget,
    backbone: &PerceptualBackbone,
    cfg: &StyleLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    if !img_e.modality().is_low_vd() {
        return Err(VddError::Validation(format!(
            "stage-2 'e' stream expects the low-vessel-density modality, got {:?}",
            img_e.modality()
        )));
    }
    net_e.check_dims(img_e.width(), img_e.height())?;
    net_o.check_dims(img_o.width(), img_o.height())?;
    let targets = TargetGrams::compute(backbone, target, cfg)?;
    let mut g = Graph::new();
    let ids_e = net_e.params().bind(&mut g, false);
    let ids_o = net_o.params().bind(&mut g, false);
    let nodes = stage2_loss_node(
        &mut g, net_e, &ids_e, net_o, &ids_o, img_e, img_o, &targets, backbone, cfg,
    )?;
    Ok(g.scalar(nodes.loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Modality;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let values = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0));
        FeatureMap {
            values,
            tap_name: "t".into(),
        }
    }

    fn image_from(values: Array2<f64>, modality: Modality) -> GrayImage {
        GrayImage::new(values, modality).unwrap()
    }

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize, modality: Modality) -> GrayImage {
        image_from(
            Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0)),
            modality,
        )
    }

    fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
        BinaryMask::new(Array2::from_shape_fn((h, w), |_| rng.gen_range(0..2u8))).unwrap()
    }

    #[test]
    fn mse_loss_exact_cases() {
        let ones = BinaryMask::new(Array2::from_elem((4, 4), 1)).unwrap();
        let zeros_map = ProbabilityMap::new(Array2::zeros((4, 4))).unwrap();
        assert_eq!(mse_loss(&zeros_map, &ones).unwrap(), 1.0);

        let gt0 = BinaryMask::new(Array2::zeros((4, 4))).unwrap();
        let half = ProbabilityMap::new(Array2::from_elem((4, 4), 0.5)).unwrap();
        assert_eq!(mse_loss(&half, &gt0).unwrap(), 0.25);

        let exact = ProbabilityMap::new(ones.to_f64()).unwrap();
        assert_eq!(mse_loss(&exact, &ones).unwrap(), 0.0);
    }

    #[test]
    fn mse_loss_rejects_dim_mismatch() {
        let gt = BinaryMask::new(Array2::zeros((4, 4))).unwrap();
        let p = ProbabilityMap::new(Array2::zeros((4, 8))).unwrap();
        assert!(mse_loss(&p, &gt).is_err());
    }

    #[test]
    fn gram_matrix_trivial_cases() {
        let zero = FeatureMap {
            values: Array3::zeros((3, 4, 4)),
            tap_name: "z".into(),
        };
        assert!(gram_matrix(&zero).iter().all(|&v| v == 0.0));

        // All-ones map with C=2, H=2, W=2: every entry is 4 / (2*2*2) = 0.5.
        let ones = FeatureMap {
            values: Array3::from_elem((2, 2, 2), 1.0),
            tap_name: "o".into(),
        };
        let g = gram_matrix(&ones);
        for &v in g.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn gram_matrix_matches_naive_loop_and_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let f = rand_map(&mut rng, 5, 3, 4);
            let g = gram_matrix(&f);
            let (c, h, w) = f.values.dim();
            // Naive double loop oracle.
            for a in 0..c {
                for b in 0..c {
                    let mut acc = 0.0;
                    for y in 0..h {
                        for x in 0..w {
                            acc += f.values[(a, y, x)] * f.values[(b, y, x)];
                        }
                    }
                    acc /= (c * h * w) as f64;
                    assert!((g[(a, b)] - acc).abs() < 1e-10);
                }
            }
            // Symmetry and PSD (v^T G v >= 0 for probe vectors).
            for a in 0..c {
                for b in 0..c {
                    assert_eq!(g[(a, b)], g[(b, a)]);
                }
            }
            for _ in 0..10 {
                let v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut q = 0.0;
                for a in 0..c {
                    for b in 0..c {
                        q += v[a] * g[(a, b)] * v[b];
                    }
                }
                assert!(q >= -1e-8, "quadratic form {q}");
            }
        }
    }

    /// Forces the fusion layer to ignore its inputs, making the network a
    /// constant-output (hence rotation-equivariant) function.
    fn make_constant_output(net: &mut SegmentationNetwork, bias: f64) {
        let idx_w = net
            .params()
            .names()
            .iter()
            .position(|n| n == "fuse.weight")
            .unwrap();
        net.params_mut().value_mut(idx_w).fill(0.0);
        let idx_b = net
            .params()
            .names()
            .iter()
            .position(|n| n == "fuse.bias")
            .unwrap();
        net.params_mut().value_mut(idx_b).fill(bias);
    }

    #[test]
    fn self_comparison_zero_for_identity_round_trip() {
        // The rotation pair is an exact permutation: un-rotating a rotated
        // input reproduces it bit for bit, so an identity function scores 0.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raster = Array2::from_shape_fn((12, 20), |_| rng.gen_range(0.0..1.0));
        let mut g = Graph::new();
        let x = g.constant(crate::segmentation::to_chw(&raster));
        let rot = g.rot90(x, true);
        let unrot = g.rot90(rot, false);
        let loss = g.mse_between(unrot, x);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn self_comparison_zero_for_constant_output_function() {
        let bb = PerceptualBackbone::tiny(1);
        let mut net = SegmentationNetwork::from_backbone(&bb, 1, 2);
        make_constant_output(&mut net, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_image(&mut rng, 16, 16, Modality::SynthA);
        let loss = self_comparison_loss(&net, &img).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn self_comparison_positive_finite_on_random_input() {
        let bb = PerceptualBackbone::tiny(3);
        let net = SegmentationNetwork::from_backbone(&bb, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = rand_image(&mut rng, 16, 16, Modality::SynthA);
        let loss = self_comparison_loss(&net, &img).unwrap();
        assert!(loss.is_finite());
        assert!(loss > 0.0);
    }

    #[test]
    fn style_loss_zero_against_self() {
        let bb = PerceptualBackbone::tiny(1);
        let cfg = StyleLossConfig::for_backbone(&bb);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = rand_mask(&mut rng, 16, 16);
        let target = StyleTarget::new(mask.clone(), "self");
        let pred = ProbabilityMap::new(mask.to_f64()).unwrap();
        let loss = style_loss(&pred, &target, &bb, &cfg).unwrap();
        assert!(loss.abs() < 1e-20, "loss {loss}");
    }

    #[test]
    fn style_loss_nonnegative_and_decomposes_per_layer() {
        let bb = PerceptualBackbone::tiny(2);
        let cfg = StyleLossConfig::for_backbone(&bb);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mask = rand_mask(&mut rng, 16, 16);
        let target = StyleTarget::new(mask, "t");
        let pred = ProbabilityMap::new(Array2::from_shape_fn((16, 16), |_| {
            rng.gen_range(0.0..1.0)
        }))
        .unwrap();
        let loss = style_loss(&pred, &target, &bb, &cfg).unwrap();
        assert!(loss >= 0.0);

        // Per-layer decomposition oracle: sum of single-tap losses equals
        // the four-tap loss. Single taps are checked by repeating one name.
        let targets = TargetGrams::compute(&bb, &target, &cfg).unwrap();
        let maps = bb.feature_maps(pred.values());
        let mut total = 0.0;
        for tap in &cfg.tap_layers {
            let fm = maps.iter().find(|m| &m.tap_name == tap).unwrap();
            let g = gram_matrix(fm);
            let t = targets.get(tap).unwrap();
            total += (&g - t).iter().map(|d| d * d).sum::<f64>();
        }
        assert!((loss - total).abs() <= 1e-9 * (1.0 + total.abs()));
    }

    #[test]
    fn style_loss_missing_tap_errors() {
        let bb = PerceptualBackbone::tiny(2);
        let mut cfg = StyleLossConfig::for_backbone(&bb);
        cfg.tap_layers[2] = "relu9_9".into();
        let mask = BinaryMask::new(Array2::from_elem((16, 16), 1)).unwrap();
        let target = StyleTarget::new(mask.clone(), "t");
        let pred = ProbabilityMap::new(mask.to_f64()).unwrap();
        let err = style_loss(&pred, &target, &bb, &cfg).unwrap_err();
        assert!(matches!(err, VddError::MissingTap(_)));
    }

    #[test]
    fn stage1_recomposes_from_components() {
        let bb = PerceptualBackbone::tiny(7);
        let net = SegmentationNetwork::from_backbone(&bb, 1, 8);
        let cfg = StyleLossConfig::for_backbone(&bb);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = rand_image(&mut rng, 16, 16, Modality::SynthA);
        let gt = rand_mask(&mut rng, 16, 16);

        let composite = stage1_loss(&net, &img, &gt, &cfg).unwrap();
        let pred = net.predict(&img).unwrap();
        let independent =
            cfg.w_v * mse_loss(&pred, &gt).unwrap() + cfg.w_sc * self_comparison_loss(&net, &img).unwrap();
        assert!(
            (composite - independent).abs() < 1e-12,
            "{composite} vs {independent}"
        );

        // Weight ablation: w_sc = 0 reduces to the MSE term exactly.
        let cfg0 = StyleLossConfig {
            w_sc: 0.0,
            ..cfg.clone()
        };
        let only_mse = stage1_loss(&net, &img, &gt, &cfg0).unwrap();
        assert!((only_mse - mse_loss(&pred, &gt).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn stage2_recomposes_from_components() {
        let bb = PerceptualBackbone::tiny(13);
        let net_e = SegmentationNetwork::from_backbone(&bb, 1, 14);
        let net_o = net_e.clone_weights();
        let cfg = StyleLossConfig::for_backbone(&bb);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let img_e = rand_image(&mut rng, 16, 16, Modality::SynthA);
        let img_o = rand_image(&mut rng, 16, 16, Modality::SynthB);
        let target = StyleTarget::new(rand_mask(&mut rng, 16, 16), "t");

        let composite =
            stage2_loss(&net_e, &net_o, &img_e, &img_o, &target, &bb, &cfg).unwrap();

        let pred_e = net_e.predict(&img_e).unwrap();
        let pred_o = net_o.predict(&img_o).unwrap();
        let independent = cfg.w_st_e * style_loss(&pred_e, &target, &bb, &cfg).unwrap()
            + cfg.w_st_o * style_loss(&pred_o, &target, &bb, &cfg).unwrap()
            + cfg.w_sc
                * (self_comparison_loss(&net_e, &img_e).unwrap()
                    + self_comparison_loss(&net_o, &img_o).unwrap());
        assert!(
            (composite - independent).abs() <= 1e-9 * (1.0 + independent.abs()),
            "{composite} vs {independent}"
        );

        // Ablation: only the low-VD style term survives.
        let cfg_e = StyleLossConfig {
            w_st_o: 0.0,
            w_sc: 0.0,
            ..cfg.clone()
        };
        let only_e = stage2_loss(&net_e, &net_o, &img_e, &img_o, &target, &bb, &cfg_e).unwrap();
        let expect = 100.0 * style_loss(&pred_e, &target, &bb, &cfg).unwrap();
        assert!((only_e - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
    }

    #[test]
    fn stage2_zero_when_predictions_match_target_and_rotation_consistent() {
        // A constant-output network is rotation-consistent; when its output
        // also reproduces the style target's Gram statistics (all-ones
        // target, output forced to 1), the whole composite vanishes.
        let bb = PerceptualBackbone::tiny(17);
        let mut net_e = SegmentationNetwork::from_backbone(&bb, 1, 18);
        make_constant_output(&mut net_e, 40.0); // sigmoid(40) == 1.0 in f64
        let net_o = net_e.clone_weights();
        let cfg = StyleLossConfig::for_backbone(&bb);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let img_e = rand_image(&mut rng, 16, 16, Modality::SynthA);
        let img_o = rand_image(&mut rng, 16, 16, Modality::SynthB);
        let target = StyleTarget::new(
            BinaryMask::new(Array2::from_elem((16, 16), 1)).unwrap(),
            "t",
        );
        let loss = stage2_loss(&net_e, &net_o, &img_e, &img_o, &target, &bb, &cfg).unwrap();
        assert!(loss.abs() < 1e-20, "loss {loss}");
    }

    /// Central-difference gradient check of the full composite losses on a
    /// sub-1k-parameter network with 8x8 inputs.
    fn gradcheck_composite(stage2: bool) {
        let bb = PerceptualBackbone::tiny(21);
        let net_e = SegmentationNetwork::from_backbone(&bb, 1, 22);
        let net_o = net_e.clone_weights();
        let cfg = StyleLossConfig::for_backbone(&bb);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img_e = rand_image(&mut rng, 8, 8, Modality::SynthA);
        let img_o = rand_image(&mut rng, 8, 8, Modality::SynthB);
        let gt = rand_mask(&mut rng, 8, 8);
        let target = StyleTarget::new(rand_mask(&mut rng, 8, 8), "t");
        let targets = TargetGrams::compute(&bb, &target, &cfg).unwrap();

        // Analytic gradients for net_e's parameters.
        let mut g = Graph::new();
        let ids_e = net_e.params().bind(&mut g, true);
        let ids_o = net_o.params().bind(&mut g, true);
        let loss_node = if stage2 {
            stage2_loss_node(
                &mut g, &net_e, &ids_e, &net_o, &ids_o, &img_e, &img_o, &targets, &bb, &cfg,
            )
            .unwrap()
            .loss
        } else {
            stage1_loss_node(&mut g, &net_e, &ids_e, &img_e, &gt, &cfg)
                .unwrap()
                .loss
        };
        g.backward(loss_node).unwrap();

        let eval = |net_mod: &SegmentationNetwork| -> f64 {
            if stage2 {
                stage2_loss(net_mod, &net_o, &img_e, &img_o, &target, &bb, &cfg).unwrap()
            } else {
                stage1_loss(net_mod, &img_e, &gt, &cfg).unwrap()
            }
        };

        // Probe a spread of parameters across every tensor.
        let h = 1e-5;
        let mut checked = 0;
        for (ti, &id) in ids_e.iter().enumerate() {
            let analytic = g
                .grad(id)
                .cloned()
                .unwrap_or_else(|| ndarray::ArrayD::zeros(g.value(id).raw_dim()));
            let len = net_e.params().value(ti).len();
            let stride = (len / 3).max(1);
            for flat in (0..len).step_by(stride) {
                let mut plus = net_e.clone_weights();
                plus.params_mut().value_mut(ti).as_slice_mut().unwrap()[flat] += h;
                let mut minus = net_e.clone_weights();
                minus.params_mut().value_mut(ti).as_slice_mut().unwrap()[flat] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[flat];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-3,
                    "tensor {ti} ({}) elem {flat}: analytic {a} vs numeric {numeric}",
                    net_e.params().names()[ti]
                );
                checked += 1;
            }
        }
        assert!(checked > 30, "checked only {checked} parameters");
    }

    #[test]
    fn stage1_gradients_match_finite_differences() {
        gradcheck_composite(false);
    }

    #[test]
    fn stage2_gradients_match_finite_differences() {
        gradcheck_composite(true);
    }
}
