//! Nested dense-skip encoder-decoder with segmentation and stereo
//! disparity heads.
//!
//! Nodes are indexed `(i, j)`: `i` is the resolution level (`H / 2^i`) and
//! `j` the column. Column 0 is the encoder. Decoder node `(i, j)` consumes
//! every same-row predecessor `x_{i,0..j}`, the upsampled `x_{i+1,j-1}`
//! and, when node `(i+1, j-1)` carries disparity heads, its upsampled
//! disparities. Disparity heads sit on the anti-diagonal `i + j = 4`;
//! segmentation heads on `x_{0,1..=4}`.

mod blocks;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::{DisparityMap, ImageGrid, LabelMask, SegMap, NUM_CLASSES};
use crate::losses::{average_seg_heads, DisparityPyramid, NUM_SCALES, NUM_SEG_HEADS};
use crate::nn::{apply_bn_updates, Graph, NodeId, ParamStore, Tensor};
use blocks::{Bottleneck, ConvBn, HeadConv};

/// Number of resolution levels (encoder nodes).
pub const LEVELS: usize = 5;

/// Parameter-name prefixes of the network parts.
pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";
pub const SEG_HEAD_PREFIX: &str = "seg.";
pub const DISP_HEAD_PREFIX: &str = "disp.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Resnet50,
    Tiny,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Resnet50 => "resnet50",
            EncoderKind::Tiny => "tiny",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `(H, W)` of the network input.
    pub input_size: [usize; 2],
    pub num_classes: usize,
    pub encoder_depth: usize,
    pub encoder_kind: EncoderKind,
    /// Upper bound of predicted disparities, in fractions of the width.
    pub d_max: f64,
    /// Width of level 0 of the tiny encoder; level `i` has `base << i`.
    pub base_channels: usize,
    /// Optional checkpoint whose encoder weights replace the random init.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_weights: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: [384, 384],
            num_classes: NUM_CLASSES,
            encoder_depth: LEVELS,
            encoder_kind: EncoderKind::Resnet50,
            d_max: 0.3,
            base_channels: 16,
            encoder_weights: None,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and desk-scale runs.
    pub fn tiny(size: usize, base_channels: usize) -> Self {
        ModelConfig {
            input_size: [size, size],
            encoder_kind: EncoderKind::Tiny,
            base_channels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        let fail = |m: String| Err(Error::Config(m));
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return fail(format!("input size {h}x{w} must be positive multiples of 16"));
        }
        if self.num_classes != NUM_CLASSES {
            return fail(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.encoder_depth != LEVELS {
            return fail(format!("encoder_depth must be {LEVELS}, got {}", self.encoder_depth));
        }
        if !(self.d_max > 0.0 && self.d_max <= 1.0) {
            return fail(format!("d_max must lie in (0, 1], got {}", self.d_max));
        }
        if self.d_max * (w as f64) < 1.0 {
            return fail(format!("d_max * W = {} is below one pixel", self.d_max * w as f64));
        }
        if self.encoder_kind == EncoderKind::Tiny && self.base_channels == 0 {
            return fail("base_channels must be positive".into());
        }
        Ok(())
    }

    /// `(H, W)` of pyramid scale `i`.
    pub fn scale_size(&self, i: usize) -> (usize, usize) {
        (self.input_size[0] >> i, self.input_size[1] >> i)
    }

    /// Output channels of encoder node `x_{i,0}`.
    pub fn encoder_channels(&self) -> [usize; LEVELS] {
        match self.encoder_kind {
            EncoderKind::Tiny => std::array::from_fn(|i| self.base_channels << i),
            EncoderKind::Resnet50 => [32, 64, 256, 512, 2048],
        }
    }

    /// Output channels of decoder nodes on row `i`.
    pub fn decoder_channels(&self) -> [usize; LEVELS] {
        match self.encoder_kind {
            EncoderKind::Tiny => std::array::from_fn(|i| self.base_channels << i),
            EncoderKind::Resnet50 => [32, 64, 128, 256, 512],
        }
    }
}

/// Row of the disparity head for pyramid scale `s`; its column is `4 - s`.
fn has_disp_head(i: usize, j: usize) -> bool {
    j >= 1 && i + j == LEVELS - 1
}

#[derive(Clone, Debug)]
enum Encoder {
    Tiny([ConvBn; LEVELS]),
    Resnet {
        full: ConvBn,
        stem: ConvBn,
        /// Stages feeding levels 2, 3 and 4.
        stages: [Vec<Bottleneck>; 3],
    },
}

#[derive(Clone, Debug)]
struct DecoderNode {
    i: usize,
    j: usize,
    conv1: ConvBn,
    conv2: ConvBn,
}

/// Network outputs as graph nodes.
#[derive(Clone, Debug)]
pub struct HeadNodes {
    /// Softmax outputs `[N, 5, H, W]`; empty when not requested.
    pub seg: Vec<NodeId>,
    /// Scale `s` gives `[N, 2, H/2^s, W/2^s]` sigmoid activations with
    /// channel 0 = left and channel 1 = right; disparity is `d_max` times
    /// the activation (applied in double precision by [`pyramid_from`]).
    pub disp: [NodeId; NUM_SCALES],
}

/// Decoded outputs for one image.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub seg_heads: Vec<SegMap>,
    pub pyramid: DisparityPyramid,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Vec<DecoderNode>,
    seg_heads: Vec<HeadConv>,
    disp_heads: Vec<HeadConv>,
}

impl Model {
    /// Builds the network; all weights derive from `(seed, parameter name)`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let enc_ch = config.encoder_channels();
        let dec_ch = config.decoder_channels();
        let encoder = match config.encoder_kind {
            EncoderKind::Tiny => Encoder::Tiny(std::array::from_fn(|i| {
                let cin = if i == 0 { 3 } else { enc_ch[i - 1] };
                ConvBn::new(&mut store, &format!("enc.{i}"), cin, enc_ch[i], 3, 1, seed)
            })),
            EncoderKind::Resnet50 => {
                let full = ConvBn::new(&mut store, "enc.full", 3, enc_ch[0], 3, 1, seed);
                let stem = ConvBn::new(&mut store, "enc.stem", 3, 64, 7, 2, seed);
                let mut cin = 64;
                let l1 = resnet_stage(&mut store, "enc.layer1", &mut cin, &[(3, 64, 256, 1)], seed);
                let l2 = resnet_stage(&mut store, "enc.layer2", &mut cin, &[(4, 128, 512, 2)], seed);
                // layer3 downsamples to H/16; layer4 keeps that resolution.
                let l34 = resnet_stage(&mut store, "enc.layer34", &mut cin, &[(6, 256, 1024, 2), (3, 512, 2048, 1)], seed);
                Encoder::Resnet {
                    full,
                    stem,
                    stages: [l1, l2, l34],
                }
            }
        };

        let node_ch = |i: usize, j: usize| if j == 0 { enc_ch[i] } else { dec_ch[i] };
        let mut decoder = Vec::new();
        for j in 1..LEVELS {
            for i in 0..LEVELS - j {
                let mut cin: usize = (0..j).map(|k| node_ch(i, k)).sum();
                cin += node_ch(i + 1, j - 1);
                if has_disp_head(i + 1, j - 1) {
                    cin += 2;
                }
                let name = format!("dec.{i}.{j}");
                decoder.push(DecoderNode {
                    i,
                    j,
                    conv1: ConvBn::new(&mut store, &format!("{name}.conv1"), cin, dec_ch[i], 3, 1, seed),
                    conv2: ConvBn::new(&mut store, &format!("{name}.conv2"), dec_ch[i], dec_ch[i], 3, 1, seed),
                });
            }
        }
        let seg_heads = (1..LEVELS)
            .map(|j| HeadConv::new(&mut store, &format!("seg.{j}"), dec_ch[0], NUM_CLASSES, 1, seed))
            .collect();
        let disp_heads = (0..NUM_SCALES)
            .map(|s| HeadConv::new(&mut store, &format!("disp.{s}"), dec_ch[s], 2, 3, seed))
            .collect();
        Ok(Model {
            config: config.clone(),
            params: store,
            encoder,
            decoder,
            seg_heads,
            disp_heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Folds the batch statistics recorded by a training-mode forward pass
    /// into the batch-norm running averages.
    pub fn commit_batch_stats(&mut self, g: &Graph) {
        apply_bn_updates(&mut self.params, g.bn_updates());
    }

    /// Sets weights and biases of every disparity head to zero.
    pub fn zero_disparity_heads(&mut self) {
        for h in &self.disp_heads {
            for id in [h.weight, h.bias] {
                self.params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Packs images into an input tensor, centring intensities on zero.
    pub fn input_tensor(&self, images: &[&ImageGrid]) -> Result<Tensor> {
        let [h, w] = self.config.input_size;
        ensure!(!images.is_empty(), "empty batch");
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.shape() != (h, w, 3) {
                return Err(Error::shape("model input", format!("({h}, {w}, 3)"), format!("{:?}", img.shape())));
            }
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data.push((img.get(y, x, c) - 0.5) as f32);
                    }
                }
            }
        }
        Tensor::from_vec([images.len(), 3, h, w], data)
    }

    fn encode(&self, g: &mut Graph, x: NodeId, training: bool) -> [NodeId; LEVELS] {
        let st = &self.params;
        match &self.encoder {
            Encoder::Tiny(stages) => {
                let mut out = [x; LEVELS];
                let mut cur = x;
                for (i, stage) in stages.iter().enumerate() {
                    cur = stage.apply(g, st, cur, training, true);
                    if i > 0 {
                        cur = g.max_pool(cur, 2, 2, 0);
                    }
                    out[i] = cur;
                }
                out
            }
            Encoder::Resnet { full, stem, stages } => {
                let x0 = full.apply(g, st, x, training, true);
                let x1 = stem.apply(g, st, x, training, true);
                let mut cur = g.max_pool(x1, 3, 2, 1);
                let mut levels = [x0, x1, x1, x1, x1];
                for (s, blocks) in stages.iter().enumerate() {
                    for b in blocks {
                        cur = b.apply(g, st, cur, training);
                    }
                    levels[s + 2] = cur;
                }
                levels
            }
        }
    }

    /// Records the network on `g`. Segmentation heads are only evaluated
    /// when `with_seg` is set.
    pub fn forward_graph(&self, g: &mut Graph, input: NodeId, training: bool, with_seg: bool) -> HeadNodes {
        let st = &self.params;
        let mut x: Vec<Vec<Option<NodeId>>> = vec![vec![None; LEVELS]; LEVELS];
        for (i, n) in self.encode(g, input, training).into_iter().enumerate() {
            x[i][0] = Some(n);
        }
        let mut disp: [Option<NodeId>; NUM_SCALES] = [None; NUM_SCALES];
        for node in &self.decoder {
            let (i, j) = (node.i, node.j);
            let mut parts: Vec<NodeId> = (0..j).map(|k| x[i][k].expect("predecessor")).collect();
            parts.push(g.upsample2(x[i + 1][j - 1].expect("coarser node")));
            if has_disp_head(i + 1, j - 1) {
                // Feedback carries values only; the loss on the coarser
                // scale trains the coarser head.
                let coarse = disp[i + 1].expect("coarser disparity");
                let fixed = g.detach(coarse);
                parts.push(g.upsample2(fixed));
            }
            let cat = g.concat(&parts);
            let y = node.conv1.apply(g, st, cat, training, true);
            let y = node.conv2.apply(g, st, y, training, true);
            x[i][j] = Some(y);
            if has_disp_head(i, j) {
                let raw = self.disp_heads[i].apply(g, st, y);
                disp[i] = Some(g.scaled_sigmoid(raw, 1.0));
            }
        }
        let seg = if with_seg {
            self.seg_heads
                .iter()
                .enumerate()
                .map(|(k, h)| {
                    let logits = h.apply(g, st, x[0][k + 1].expect("row-0 node"));
                    g.softmax(logits)
                })
                .collect()
        } else {
            Vec::new()
        };
        HeadNodes {
            seg,
            disp: disp.map(|d| d.expect("disparity head")),
        }
    }

    /// Inference-mode forward pass of a batch.
    pub fn forward_batch(&self, images: &[&ImageGrid]) -> Result<Vec<ModelOutput>> {
        let input = self.input_tensor(images)?;
        let mut g = Graph::new();
        let x = g.leaf(input);
        let heads = self.forward_graph(&mut g, x, false, true);
        let d_max = self.config.d_max;
        (0..images.len()).map(|n| decode_output(&g, &heads, n, d_max)).collect()
    }

    pub fn forward(&self, image: &ImageGrid) -> Result<ModelOutput> {
        Ok(self.forward_batch(&[image])?.remove(0))
    }

    /// Hard labels from the last segmentation head.
    pub fn infer_segmentation(&self, image: &ImageGrid) -> Result<LabelMask> {
        Ok(self.forward(image)?.seg_heads[NUM_SEG_HEADS - 1].argmax())
    }

    /// Full-resolution left disparity.
    pub fn infer_depth(&self, image: &ImageGrid) -> Result<DisparityMap> {
        Ok(self.forward(image)?.pyramid.left.swap_remove(0))
    }
}

/// Chains bottleneck groups `(count, mid, out, stride)`; the stride applies
/// to the first block of each group.
fn resnet_stage(store: &mut ParamStore, name: &str, cin: &mut usize, groups: &[(usize, usize, usize, usize)], seed: u64) -> Vec<Bottleneck> {
    let mut blocks = Vec::new();
    for &(count, mid, cout, stride) in groups {
        for b in 0..count {
            let s = if b == 0 { stride } else { 1 };
            let idx = blocks.len();
            blocks.push(Bottleneck::new(store, &format!("{name}.{idx}"), *cin, mid, cout, s, seed));
            *cin = cout;
        }
    }
    blocks
}

/// Segmentation map for batch item `n` of a softmax node, renormalised in
/// double precision.
pub fn seg_map_from(g: &Graph, node: NodeId, n: usize) -> Result<SegMap> {
    let t = g.value(node);
    let (c, h, w) = (t.c(), t.h(), t.w());
    let hw = h * w;
    let s = t.sample(n);
    let mut probs = vec![0.0f64; hw * c];
    for p in 0..hw {
        let row = &mut probs[p * c..(p + 1) * c];
        for (k, v) in row.iter_mut().enumerate() {
            *v = s[k * hw + p] as f64;
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    SegMap::new(h, w, probs)
}

/// Left and right disparity of batch item `n` of a disparity head node.
pub fn disparity_pair_from(g: &Graph, node: NodeId, n: usize, d_max: f64) -> Result<(DisparityMap, DisparityMap)> {
    let t = g.value(node);
    let (h, w) = (t.h(), t.w());
    let to_map = |plane: &[f32]| DisparityMap::new(h, w, plane.iter().map(|&v| d_max * v as f64).collect());
    Ok((to_map(t.plane(n, 0))?, to_map(t.plane(n, 1))?))
}

/// Disparity pyramid of batch item `n`.
pub fn pyramid_from(g: &Graph, heads: &HeadNodes, n: usize, d_max: f64) -> Result<DisparityPyramid> {
    let mut left = Vec::with_capacity(NUM_SCALES);
    let mut right = Vec::with_capacity(NUM_SCALES);
    for &d in &heads.disp {
        let (l, r) = disparity_pair_from(g, d, n, d_max)?;
        left.push(l);
        right.push(r);
    }
    DisparityPyramid::new(left, right)
}

fn decode_output(g: &Graph, heads: &HeadNodes, n: usize, d_max: f64) -> Result<ModelOutput> {
    let seg_heads = heads.seg.iter().map(|&s| seg_map_from(g, s, n)).collect::<Result<Vec<_>>>()?;
    Ok(ModelOutput {
        seg_heads,
        pyramid: pyramid_from(g, heads, n, d_max)?,
    })
}

/// Elementwise mean of the segmentation heads.
pub fn averaged_prediction(output: &ModelOutput) -> Result<SegMap> {
    average_seg_heads(&output.seg_heads)
}
