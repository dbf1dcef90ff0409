//! The vessel-segmentation networks and the frozen perceptual backbone they
//! share.
//!
//! Both networks use the same 4-stage convolutional pyramid: blocks of 3x3
//! convolutions with ReLU, 2x2 max pooling between blocks. The backbone
//! exposes one named tap per block for Gram-style losses and is never
//! trained. The segmentation network starts from the backbone's encoder
//! weights, adds one side output per stage (3x3 conv, then learned
//! transposed-convolution upsampling back to input resolution), concatenates
//! the side outputs, and fuses them with a 1x1 convolution followed by a
//! logistic squash onto [0, 1].
//!
//! Grayscale inputs are replicated to three channels and normalized with
//! the backbone's fixed per-channel statistics before entering any encoder.

use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::core::{GrayImage, ProbabilityMap};
use crate::error::{Result, VddError};
use crate::nn::{
    bilinear_upsample_weights, gaussian_samples, he_normal, Graph, NodeId, ParamSet,
};
use crate::util::rng_for;

/// Encoder/backbone architecture description, serialized as the manifest
/// that accompanies every weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Architecture tag, e.g. "vgg16", "small", "tiny".
    pub arch: String,
    /// Output channels of each of the four blocks.
    pub channels: [usize; 4],
    /// Number of 3x3 convolutions per block.
    pub convs_per_block: [usize; 4],
    /// Fixed input normalization (3-channel mean/std).
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
    /// Names of the per-block taps, in depth order.
    pub taps: [String; 4],
}

impl EncoderSpec {
    /// The 16-layer-class configuration with the standard perceptual-loss
    /// taps after the 2nd, 4th, 7th, and 10th convolutional activations.
    pub fn vgg16() -> Self {
        Self {
            arch: "vgg16".into(),
            channels: [64, 128, 256, 512],
            convs_per_block: [2, 2, 3, 3],
            input_mean: [0.485, 0.456, 0.406],
            input_std: [0.229, 0.224, 0.225],
            taps: [
                "relu1_2".into(),
                "relu2_2".into(),
                "relu3_3".into(),
                "relu4_3".into(),
            ],
        }
    }

    /// Small randomly-initialized configuration for CI and desk-scale runs.
    pub fn small() -> Self {
        Self {
            arch: "small".into(),
            channels: [8, 16, 32, 64],
            convs_per_block: [2, 2, 3, 3],
            input_mean: [0.5; 3],
            input_std: [0.5; 3],
            taps: [
                "relu1_2".into(),
                "relu2_2".into(),
                "relu3_3".into(),
                "relu4_3".into(),
            ],
        }
    }

    /// Sub-1k-parameter configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            arch: "tiny".into(),
            channels: [2, 2, 2, 2],
            convs_per_block: [1, 1, 1, 1],
            input_mean: [0.5; 3],
            input_std: [0.5; 3],
            taps: [
                "relu1_1".into(),
                "relu2_1".into(),
                "relu3_1".into(),
                "relu4_1".into(),
            ],
        }
    }

    fn block_in_channels(&self, block: usize) -> usize {
        if block == 0 {
            3
        } else {
            self.channels[block - 1]
        }
    }
}

/// Builds the encoder parameter tensors in declaration order.
fn init_encoder_params(spec: &EncoderSpec, seed: u64, params: &mut ParamSet) {
    let mut rng = rng_for(seed, &format!("encoder-init-{}", spec.arch));
    for (bi, &n_convs) in spec.convs_per_block.iter().enumerate() {
        for ci in 0..n_convs {
            let c_in = if ci == 0 {
                spec.block_in_channels(bi)
            } else {
                spec.channels[bi]
            };
            let c_out = spec.channels[bi];
            params.push(
                format!("enc.b{}.c{}.weight", bi + 1, ci + 1),
                he_normal(&mut rng, (c_out, c_in, 3, 3)),
            );
            params.push(
                format!("enc.b{}.c{}.bias", bi + 1, ci + 1),
                ArrayD::zeros(IxDyn(&[c_out])),
            );
        }
    }
}

/// Walks an encoder forward; returns the four tap nodes (post-ReLU, one per
/// block). `ids` must be bound in the same order the params were declared.
fn encoder_taps(
    spec: &EncoderSpec,
    g: &mut Graph,
    ids: &[NodeId],
    input_3ch: NodeId,
) -> Vec<NodeId> {
    let mut taps = Vec::with_capacity(4);
    let mut x = input_3ch;
    let mut idx = 0;
    for (bi, &n_convs) in spec.convs_per_block.iter().enumerate() {
        if bi > 0 {
            x = g.max_pool2(x);
        }
        for _ in 0..n_convs {
            let w = ids[idx];
            let b = ids[idx + 1];
            idx += 2;
            x = g.conv2d(x, w, b, 1);
            x = g.relu(x);
        }
        taps.push(x);
    }
    taps
}

fn encoder_param_count(spec: &EncoderSpec) -> usize {
    spec.convs_per_block.iter().map(|&n| n * 2).sum()
}

/// Prepares a grayscale (1, H, W) node for an encoder: replicate to three
/// channels and apply the fixed input normalization.
fn prepare_input(spec: &EncoderSpec, g: &mut Graph, gray: NodeId) -> NodeId {
    let rep = g.replicate_channels(gray, 3);
    g.normalize(rep, &spec.input_mean, &spec.input_std)
}

/// A frozen feature extractor exposing four named taps for style losses.
#[derive(Debug, Clone)]
pub struct PerceptualBackbone {
    spec: EncoderSpec,
    params: ParamSet,
}

impl PerceptualBackbone {
    /// Randomly initialized small backbone; deterministic in `seed`.
    pub fn small(seed: u64) -> Self {
        Self::random(EncoderSpec::small(), seed)
    }

    /// Sub-1k-parameter backbone for gradient checks.
    pub fn tiny(seed: u64) -> Self {
        Self::random(EncoderSpec::tiny(), seed)
    }

    fn random(spec: EncoderSpec, seed: u64) -> Self {
        let mut params = ParamSet::new();
        init_encoder_params(&spec, seed, &mut params);
        Self { spec, params }
    }

    /// Loads backbone weights plus the manifest JSON that sits next to them
    /// (same path with extension `.manifest.json`).
    pub fn load(weights: &Path) -> Result<Self> {
        let spec = read_manifest(weights)?;
        let mut template = ParamSet::new();
        init_encoder_params(&spec, 0, &mut template);
        let params = ParamSet::load_like(weights, &template)?;
        Ok(Self { spec, params })
    }

    pub fn save(&self, weights: &Path) -> Result<()> {
        self.params.save(weights)?;
        write_manifest(weights, &self.spec)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    /// Binds the backbone as frozen constants and returns `(tap name, node)`
    /// pairs for a (1, H, W) grayscale input node.
    pub fn tap_nodes(&self, g: &mut Graph, gray: NodeId) -> Vec<(String, NodeId)> {
        let ids = self.params.bind(g, false);
        let input = prepare_input(&self.spec, g, gray);
        let taps = encoder_taps(&self.spec, g, &ids, input);
        self.spec
            .taps
            .iter()
            .cloned()
            .zip(taps)
            .collect()
    }

    /// Value-level tap extraction (no gradients) for a raw [0,1] raster.
    pub fn feature_maps(&self, raster: &ndarray::Array2<f64>) -> Vec<crate::losses::FeatureMap> {
        let mut g = Graph::new();
        let input = g.constant(to_chw(raster));
        let taps = self.tap_nodes(&mut g, input);
        taps.into_iter()
            .map(|(name, id)| crate::losses::FeatureMap {
                values: g.value(id).clone().into_dimensionality().unwrap(),
                tap_name: name,
            })
            .collect()
    }
}

/// Converts a (H, W) raster into the graph's (1, H, W) layout.
pub(crate) fn to_chw(raster: &ndarray::Array2<f64>) -> ArrayD<f64> {
    let (h, w) = raster.dim();
    raster
        .clone()
        .into_shape_with_order((1, h, w))
        .unwrap()
        .into_dyn()
}

/// Trainable vessel segmentation network: shared encoder, per-stage side
/// outputs, learned upsampling, 1x1 fusion, logistic output.
#[derive(Debug, Clone)]
pub struct SegmentationNetwork {
    spec: EncoderSpec,
    side_channels: usize,
    params: ParamSet,
}

impl SegmentationNetwork {
    /// Creates a network whose encoder weights are copied from `backbone`.
    /// Side, upsampling, and fusion layers are freshly initialized from
    /// `seed` (upsamplers start as bilinear interpolation).
    pub fn from_backbone(backbone: &PerceptualBackbone, side_channels: usize, seed: u64) -> Self {
        let spec = backbone.spec().clone();
        let mut params = ParamSet::new();
        for (name, _) in backbone
            .params()
            .names()
            .iter()
            .map(|n| (n.clone(), ()))
        {
            let v = backbone.params().by_name(&name).unwrap().clone();
            params.push(name, v);
        }
        Self::init_head(&spec, side_channels, seed, &mut params);
        Self {
            spec,
            side_channels,
            params,
        }
    }

    /// Fully random network (used by the style-only training ablation).
    pub fn random(spec: EncoderSpec, side_channels: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        init_encoder_params(&spec, seed, &mut params);
        Self::init_head(&spec, side_channels, seed, &mut params);
        Self {
            spec,
            side_channels,
            params,
        }
    }

    fn init_head(spec: &EncoderSpec, side_channels: usize, seed: u64, params: &mut ParamSet) {
        let mut rng = rng_for(seed, "segnet-head-init");
        for (si, &c) in spec.channels.iter().enumerate() {
            params.push(
                format!("side.s{}.weight", si + 1),
                he_normal(&mut rng, (side_channels, c, 3, 3)),
            );
            params.push(
                format!("side.s{}.bias", si + 1),
                ArrayD::zeros(IxDyn(&[side_channels])),
            );
            if si > 0 {
                let stride = 1usize << si;
                params.push(
                    format!("up.s{}.weight", si + 1),
                    bilinear_upsample_weights(side_channels, side_channels, stride),
                );
                params.push(
                    format!("up.s{}.bias", si + 1),
                    ArrayD::zeros(IxDyn(&[side_channels])),
                );
            }
        }
        // Fusion starts as a small random combination; output begins near 0.5.
        let n_in = 4 * side_channels;
        let w = gaussian_samples(&mut rng, n_in, 0.05);
        params.push(
            "fuse.weight",
            ArrayD::from_shape_vec(IxDyn(&[1, n_in, 1, 1]), w).unwrap(),
        );
        params.push("fuse.bias", ArrayD::zeros(IxDyn(&[1])));
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn side_channels(&self) -> usize {
        self.side_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Deep copy with value-equal parameters; training the clone never
    /// mutates the source.
    pub fn clone_weights(&self) -> Self {
        self.clone()
    }

    pub fn save(&self, weights: &Path) -> Result<()> {
        self.params.save(weights)?;
        write_segnet_manifest(weights, &self.spec, self.side_channels)
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let (spec, side_channels) = read_segnet_manifest(weights)?;
        let mut template = ParamSet::new();
        init_encoder_params(&spec, 0, &mut template);
        Self::init_head(&spec, side_channels, 0, &mut template);
        let params = ParamSet::load_like(weights, &template)?;
        Ok(Self {
            spec,
            side_channels,
            params,
        })
    }

    /// Checks the multiple-of-8 input contract, naming the offending side.
    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if width < 8 || width % 8 != 0 {
            return Err(VddError::Dimension(format!(
                "input width {width} is not a positive multiple of 8"
            )));
        }
        if height < 8 || height % 8 != 0 {
            return Err(VddError::Dimension(format!(
                "input height {height} is not a positive multiple of 8"
            )));
        }
        Ok(())
    }

    /// Builds the forward graph from a bound parameter list; returns the
    /// (1, H, W) probability-map node.
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], gray: NodeId) -> NodeId {
        let input = prepare_input(&self.spec, g, gray);
        let n_enc = encoder_param_count(&self.spec);
        let taps = encoder_taps(&self.spec, g, &ids[..n_enc], input);

        let mut sides = Vec::with_capacity(4);
        let mut idx = n_enc;
        for (si, &tap) in taps.iter().enumerate() {
            let side_w = ids[idx];
            let side_b = ids[idx + 1];
            idx += 2;
            let side = g.conv2d(tap, side_w, side_b, 1);
            let side = if si > 0 {
                let up_w = ids[idx];
                let up_b = ids[idx + 1];
                idx += 2;
                let stride = 1usize << si;
                g.conv_transpose2d(side, up_w, up_b, stride)
            } else {
                side
            };
            sides.push(side);
        }
        let cat = g.concat_channels(&sides);
        let fuse_w = ids[idx];
        let fuse_b = ids[idx + 1];
        let logits = g.conv2d(cat, fuse_w, fuse_b, 0);
        g.sigmoid(logits)
    }

    /// Inference: deterministic probability map with the input's dimensions.
    pub fn predict(&self, img: &GrayImage) -> Result<ProbabilityMap> {
        self.check_dims(img.width(), img.height())?;
        let mut g = Graph::new();
        let input = g.constant(to_chw(img.pixels()));
        let ids = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &ids, input);
        let v: Array3<f64> = g.value(out).clone().into_dimensionality().unwrap();
        let (_, h, w) = v.dim();
        let map = v.into_shape_with_order((h, w)).unwrap();
        ProbabilityMap::new(map)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    spec: EncoderSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    side_channels: Option<usize>,
}

fn manifest_path(weights: &Path) -> std::path::PathBuf {
    let mut s = weights.as_os_str().to_os_string();
    s.push(".manifest.json");
    std::path::PathBuf::from(s)
}

fn write_manifest(weights: &Path, spec: &EncoderSpec) -> Result<()> {
    let m = Manifest {
        spec: spec.clone(),
        side_channels: None,
    };
    std::fs::write(manifest_path(weights), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn write_segnet_manifest(weights: &Path, spec: &EncoderSpec, side_channels: usize) -> Result<()> {
    let m = Manifest {
        spec: spec.clone(),
        side_channels: Some(side_channels),
    };
    std::fs::write(manifest_path(weights), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn read_manifest(weights: &Path) -> Result<EncoderSpec> {
    let path = manifest_path(weights);
    if !path.exists() {
        return Err(VddError::MissingFile(path));
    }
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    Ok(m.spec)
}

fn read_segnet_manifest(weights: &Path) -> Result<(EncoderSpec, usize)> {
    let path = manifest_path(weights);
    if !path.exists() {
        return Err(VddError::MissingFile(path));
    }
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    let side = m.side_channels.ok_or_else(|| {
        VddError::Weights(format!(
            "{} lacks side_channels; not a segmentation-network manifest",
            path.display()
        ))
    })?;
    Ok((m.spec, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Modality;
    use ndarray::Array2;

    fn test_image(h: usize, w: usize) -> GrayImage {
        let px = Array2::from_shape_fn((h, w), |(y, x)| {
            0.5 + 0.4 * ((x as f64 * 0.3).sin() * (y as f64 * 0.2).cos())
        });
        GrayImage::new(px.map(|v| v.clamp(0.0, 1.0)), Modality::SynthA).unwrap()
    }

    #[test]
    fn predict_shape_follows_input() {
        let bb = PerceptualBackbone::tiny(1);
        let net = SegmentationNetwork::from_backbone(&bb, 1, 2);
        for (h, w) in [(16, 16), (24, 32)] {
            let map = net.predict(&test_image(h, w)).unwrap();
            assert_eq!((map.height(), map.width()), (h, w));
        }
    }

    #[test]
    fn predict_rejects_non_multiple_of_8_naming_dimension() {
        let bb = PerceptualBackbone::tiny(1);
        let net = SegmentationNetwork::from_backbone(&bb, 1, 2);
        let img = test_image(16, 250);
        let err = net.predict(&img).unwrap_err();
        assert!(err.to_string().contains("width 250"), "{err}");
    }

    #[test]
    fn predict_is_deterministic() {
        let bb = PerceptualBackbone::small(7);
        let net = SegmentationNetwork::from_backbone(&bb, 4, 8);
        let img = test_image(16, 16);
        let a = net.predict(&img).unwrap();
        let b = net.predict(&img).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn output_range_in_unit_interval() {
        let bb = PerceptualBackbone::small(3);
        let net = SegmentationNetwork::from_backbone(&bb, 4, 4);
        let map = net.predict(&test_image(24, 24)).unwrap();
        for &v in map.values().iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn clone_weights_is_isolated() {
        let bb = PerceptualBackbone::tiny(5);
        let net = SegmentationNetwork::from_backbone(&bb, 1, 6);
        let mut clone = net.clone_weights();
        assert_eq!(net.checksum(), clone.checksum());
        let map_a = net.predict(&test_image(16, 16)).unwrap();
        let map_b = clone.predict(&test_image(16, 16)).unwrap();
        assert_eq!(map_a.values(), map_b.values());

        // Mutating the clone leaves the source untouched.
        let before = net.checksum();
        clone.params_mut().value_mut(0).mapv_inplace(|v| v + 0.1);
        assert_eq!(net.checksum(), before);
        assert_ne!(clone.checksum(), before);
    }

    #[test]
    fn tiny_network_is_under_1k_parameters() {
        let bb = PerceptualBackbone::tiny(1);
        let net = SegmentationNetwork::from_backbone(&bb, 1, 2);
        assert!(net.n_parameters() <= 1000, "{} params", net.n_parameters());
        assert!(bb.n_parameters() <= 1000, "{} params", bb.n_parameters());
    }

    #[test]
    fn small_backbone_is_100k_class() {
        let bb = PerceptualBackbone::small(1);
        let n = bb.n_parameters();
        assert!((50_000..400_000).contains(&n), "{n} params");
    }

    #[test]
    fn backbone_taps_have_expected_channel_counts() {
        let bb = PerceptualBackbone::small(1);
        let img = test_image(32, 32);
        let maps = bb.feature_maps(img.pixels());
        assert_eq!(maps.len(), 4);
        let expect = [(8, 32), (16, 16), (32, 8), (64, 4)];
        for (fm, (c, hw)) in maps.iter().zip(expect) {
            assert_eq!(fm.values.dim(), (c, hw, hw), "tap {}", fm.tap_name);
        }
    }

    #[test]
    fn save_load_round_trip_preserves_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let bb = PerceptualBackbone::small(11);
        let net = SegmentationNetwork::from_backbone(&bb, 4, 12);
        let p = dir.path().join("net.tensors");
        net.save(&p).unwrap();
        let loaded = SegmentationNetwork::load(&p).unwrap();
        assert_eq!(net.checksum(), loaded.checksum());

        let pb = dir.path().join("bb.tensors");
        bb.save(&pb).unwrap();
        let bb2 = PerceptualBackbone::load(&pb).unwrap();
        assert_eq!(bb.checksum(), bb2.checksum());
    }
}
