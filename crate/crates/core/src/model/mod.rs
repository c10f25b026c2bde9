//! Toy query-based instance segmenter: a strided convolutional pyramid, a
//! bidirectional fusion neck, and a stack of decoder stages that refine N
//! query boxes and features and emit box, mask and objectness predictions.

pub mod kernels;
pub mod layers;
pub mod params;
pub mod roi;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalPrediction;
use crate::geometry::{BinaryMask, BoxCcwh, BoxXyxy};
use crate::losses::{ObjectnessScores, ObjectnessVariant};
use crate::rng::derive_seed;

use layers::{
    bilinear_matrix, conv1x1, conv3x3, downsample2x, layer_norm, linear, patch_conv,
    resample_square, sigmoid, softmax_last, upsample2x,
};
pub use params::{read_checkpoint, Checkpoint, ParamStore, CHECKPOINT_VERSION};
use params::Init;
pub use roi::{crop_mask_target, paste_mask, FeatureTable};

/// Smallest normalized box side kept between stages.
pub const MIN_BOX_SIZE: f64 = 1e-3;
/// Soft masks are binarized at this probability.
pub const MASK_THRESHOLD: f64 = 0.5;
/// Bound on predicted log-scale deltas, `ln(1000 / 16)`.
const MAX_LOG_DELTA: f64 = 4.135;
const MASK_CHANNELS: usize = 16;
const FUSION_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueryInit {
    /// Every query starts from the full-image box.
    #[default]
    Image,
    /// Seeded uniform boxes.
    Random,
}

impl fmt::Display for QueryInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryInit::Image => "image",
            QueryInit::Random => "random",
        })
    }
}

impl FromStr for QueryInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(QueryInit::Image),
            "random" => Ok(QueryInit::Random),
            other => Err(Error::InvalidConfig(format!("unknown query init `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub num_stages: usize,
    pub query_init: QueryInit,
    pub variant: ObjectnessVariant,
    pub mask_resolution: usize,
    /// Channel width D of the neck, the query features and the pooled regions.
    pub feature_dim: usize,
    /// Pyramid levels, strides 4, 8, 16, ... One encoder width per level.
    pub neck_levels: usize,
    pub encoder_widths: Vec<usize>,
    /// Weighted bidirectional fusion; `false` falls back to a top-down lateral sum.
    pub bifpn: bool,
    /// Reserved; deformable convolutions are not implemented.
    pub deformable: bool,
    pub num_heads: usize,
    pub dynamic_dim: usize,
    pub pooler_resolution: usize,
    /// Seeds parameter initialization and random query boxes.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_queries: 100,
            num_stages: 6,
            query_init: QueryInit::Image,
            variant: ObjectnessVariant::Box,
            mask_resolution: 28,
            feature_dim: 64,
            neck_levels: 4,
            encoder_widths: vec![32, 48, 64, 96],
            bifpn: true,
            deformable: false,
            num_heads: 4,
            dynamic_dim: 16,
            pooler_resolution: 7,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Preset for the cross-category protocol: more queries, random boxes.
    pub fn cross_category() -> Self {
        ModelConfig {
            num_queries: 150,
            query_init: QueryInit::Random,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_queries == 0 {
            return bad("num_queries must be >= 1".into());
        }
        if self.num_stages == 0 {
            return bad("num_stages must be >= 1".into());
        }
        if self.mask_resolution < 4 {
            return bad("mask_resolution must be >= 4".into());
        }
        if self.neck_levels == 0 {
            return bad("neck_levels must be >= 1".into());
        }
        if self.encoder_widths.len() != self.neck_levels {
            return bad(format!(
                "encoder_widths has {} entries but neck_levels is {}",
                self.encoder_widths.len(),
                self.neck_levels
            ));
        }
        if self.encoder_widths.contains(&0) || self.feature_dim == 0 || self.dynamic_dim == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.num_heads == 0 || self.feature_dim % self.num_heads != 0 {
            return bad(format!(
                "feature_dim {} must be a multiple of num_heads {}",
                self.feature_dim, self.num_heads
            ));
        }
        if self.pooler_resolution == 0 {
            return bad("pooler_resolution must be >= 1".into());
        }
        if self.deformable {
            return bad("deformable convolution is reserved and not implemented".into());
        }
        Ok(())
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.neck_levels).map(|l| 4 << l).collect()
    }

    /// Image sides must be multiples of this.
    pub fn max_stride(&self) -> usize {
        4 << (self.neck_levels - 1)
    }

    pub fn check_image_size(&self, height: usize, width: usize) -> Result<()> {
        let s = self.max_stride();
        if height == 0 || width == 0 || height % s != 0 || width % s != 0 {
            return Err(Error::ImageSize {
                height,
                width,
                stride: s,
                padded_height: height.div_ceil(s).max(1) * s,
                padded_width: width.div_ceil(s).max(1) * s,
            });
        }
        Ok(())
    }
}

/// Field-by-field differences between two configs, as `key: left != right` lines.
pub fn config_diff(left: &serde_json::Value, right: &serde_json::Value) -> Vec<String> {
    let empty = serde_json::Map::new();
    let l = left.as_object().unwrap_or(&empty);
    let r = right.as_object().unwrap_or(&empty);
    let mut keys: Vec<&String> = l.keys().chain(r.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| l.get(*k) != r.get(*k))
        .map(|k| {
            let show = |v: Option<&serde_json::Value>| v.map_or("<absent>".to_string(), |v| v.to_string());
            format!("{k}: {} != {}", show(l.get(k)), show(r.get(k)))
        })
        .collect()
}

/// Initial query state before the first stage.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub boxes: Vec<BoxCcwh>,
    pub features: Vec<Vec<f32>>,
}

/// Starting boxes for the queries; depends only on the config.
pub fn init_query_boxes(cfg: &ModelConfig) -> Vec<BoxCcwh> {
    match cfg.query_init {
        QueryInit::Image => vec![BoxCcwh::FULL_IMAGE; cfg.num_queries],
        QueryInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x9b0e));
            (0..cfg.num_queries)
                .map(|_| {
                    let mut u = || rng.random::<f64>();
                    BoxCcwh {
                        cx: u(),
                        cy: u(),
                        w: u().max(0.02),
                        h: u().max(0.02),
                    }
                })
                .collect()
        }
    }
}

/// Differentiable per-stage outputs for a batch.
#[derive(Debug, Clone)]
pub struct StageTensors {
    /// `[B, N, 4]` normalized `cx, cy, w, h`.
    pub boxes: Tensor,
    /// `[B, N, R, R]` probabilities inside each predicted box.
    pub masks: Tensor,
    /// `[B, N]` heads, present per variant.
    pub cls: Option<Tensor>,
    pub box_iou: Option<Tensor>,
    pub mask_iou: Option<Tensor>,
}

/// Plain-value predictions of one stage for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    /// Unclamped box parameters as predicted.
    pub raw_boxes: Vec<[f64; 4]>,
    pub boxes: Vec<BoxCcwh>,
    /// Row-major `R x R` soft masks.
    pub masks: Vec<Vec<f32>>,
    pub heads: Vec<ObjectnessScores>,
    /// Ranking score per query; `None` for the void variant.
    pub objectness: Option<Vec<f64>>,
}

/// One final-stage instance pasted onto the image canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub query: usize,
    pub bbox: BoxXyxy,
    pub mask: BinaryMask,
    pub score: Option<f64>,
}

impl InstancePrediction {
    pub fn to_eval(&self) -> EvalPrediction {
        EvalPrediction {
            bbox: self.bbox,
            mask: Some(self.mask.clone()),
            score: self.score,
        }
    }
}

/// Score used to rank queries of a given variant.
pub fn ranking_score(variant: ObjectnessVariant, s: &ObjectnessScores) -> Option<f64> {
    match variant {
        ObjectnessVariant::Void => None,
        ObjectnessVariant::Cls => s.cls,
        ObjectnessVariant::Box => s.box_iou,
        ObjectnessVariant::Mask => s.mask_iou,
        ObjectnessVariant::Fusion => Some((s.box_iou? * s.mask_iou?).max(0.0).sqrt()),
    }
}

/// Pixel box used for pooling and pasting: sanitized and clipped to the image.
pub fn pixel_box(b: &BoxCcwh, height: usize, width: usize) -> BoxXyxy {
    b.sanitized(MIN_BOX_SIZE)
        .to_xyxy(width as f64, height as f64)
        .clip(width as f64, height as f64)
}

/// Converts images to a normalized `[B, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&RgbImage], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty image batch".into()))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::InvalidConfig("images in a batch must share one size".into()));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| (p.0[c] as f32 / 255.0 - 0.5) / 0.25));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a so each parameter's initial values depend only on (seed, name).
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    derive_seed(seed, hash)
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let mut init = Init::new(name_seed(self.seed, name));
        self.store.weight(&mut init, name, shape, fan_in)
    }

    fn scaled(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let mut init = Init::new(name_seed(self.seed, name));
        self.store.scaled(&mut init, name, shape, bound)
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f32) -> Result<()> {
        self.store.constant(name, shape, v)
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<()> {
        self.weight(&format!("{name}.w"), &[output, input], input)?;
        self.constant(&format!("{name}.b"), &[output], 0.0)
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{name}.g"), &[dim], 1.0)?;
        self.constant(&format!("{name}.b"), &[dim], 0.0)
    }
}

pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    init_boxes: Vec<BoxCcwh>,
    up_out: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(device);
        let mut b = Builder {
            store: &mut store,
            seed: cfg.seed,
        };
        let d = cfg.feature_dim;
        let mut prev = 3;
        for (l, &w) in cfg.encoder_widths.iter().enumerate() {
            let s = if l == 0 { 4 } else { 2 };
            b.weight(&format!("enc.{l}.down.w"), &[w, prev * s * s], prev * s * s)?;
            b.constant(&format!("enc.{l}.down.b"), &[w], 0.0)?;
            b.weight(&format!("enc.{l}.conv.w"), &[w, w * 9], w * 9)?;
            b.constant(&format!("enc.{l}.conv.b"), &[w], 0.0)?;
            b.weight(&format!("neck.lat.{l}.w"), &[d, w], w)?;
            b.constant(&format!("neck.lat.{l}.b"), &[d], 0.0)?;
            prev = w;
        }
        if cfg.bifpn && cfg.neck_levels > 1 {
            let top = cfg.neck_levels - 1;
            for l in 0..top {
                b.constant(&format!("neck.td.{l}.fuse"), &[2], 1.0)?;
                b.weight(&format!("neck.td.{l}.conv.w"), &[d, d], d)?;
                b.constant(&format!("neck.td.{l}.conv.b"), &[d], 0.0)?;
            }
            for l in 1..=top {
                let inputs = if l == top { 2 } else { 3 };
                b.constant(&format!("neck.bu.{l}.fuse"), &[inputs], 1.0)?;
                b.weight(&format!("neck.bu.{l}.conv.w"), &[d, d], d)?;
                b.constant(&format!("neck.bu.{l}.conv.b"), &[d], 0.0)?;
            }
        }
        b.scaled("query.feat", &[cfg.num_queries, d], 1.0)?;
        let p2 = cfg.pooler_resolution * cfg.pooler_resolution;
        let dd = cfg.dynamic_dim;
        for s in 0..cfg.num_stages {
            let st = |n: &str| format!("stage.{s}.{n}");
            for p in ["q", "k", "v", "o"] {
                b.linear(&st(&format!("attn.{p}")), d, d)?;
            }
            b.norm(&st("attn.ln"), d)?;
            b.linear(&st("dyn.param"), d, 2 * d * dd)?;
            b.norm(&st("dyn.ln1"), dd)?;
            b.norm(&st("dyn.ln2"), d)?;
            b.linear(&st("dyn.out"), p2 * d, d)?;
            b.norm(&st("dyn.ln3"), d)?;
            b.norm(&st("dyn.ln"), d)?;
            b.linear(&st("ffn.1"), d, 2 * d)?;
            b.linear(&st("ffn.2"), 2 * d, d)?;
            b.norm(&st("ffn.ln"), d)?;
            b.linear(&st("box.1"), d, d)?;
            // Small final layer so each stage starts close to the identity refinement.
            b.scaled(&st("box.2.w"), &[4, d], 1e-3)?;
            b.constant(&st("box.2.b"), &[4], 0.0)?;
            b.linear(&st("mask.gate"), d, d)?;
            b.linear(&st("mask.reduce"), d, MASK_CHANNELS)?;
            b.weight(&st("mask.conv.w"), &[MASK_CHANNELS, MASK_CHANNELS * 9], MASK_CHANNELS * 9)?;
            b.constant(&st("mask.conv.b"), &[MASK_CHANNELS], 0.0)?;
            b.linear(&st("mask.logit"), MASK_CHANNELS, 1)?;
            if cfg.variant.has_cls_head() {
                b.weight(&st("obj.cls.w"), &[1, d], d)?;
                // Prior probability 0.01 for the rare positive class.
                b.constant(&st("obj.cls.b"), &[1], -4.595)?;
            }
            if cfg.variant.has_box_iou_head() {
                b.linear(&st("obj.box_iou"), d, 1)?;
            }
            if cfg.variant.has_mask_iou_head() {
                b.linear(&st("obj.mask_iou"), d, 1)?;
            }
        }
        let up_out = bilinear_matrix(cfg.pooler_resolution, cfg.mask_resolution, device)?;
        Ok(Model {
            init_boxes: init_query_boxes(&cfg),
            cfg,
            params: store,
            up_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name)
    }

    fn lin(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        linear(x, self.p(&format!("{name}.w")), self.p(&format!("{name}.b")))
    }

    fn ln(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        layer_norm(x, self.p(&format!("{name}.g")), self.p(&format!("{name}.b")))
    }

    pub fn init_queries(&self) -> Result<QuerySet> {
        let feats = self.p("query.feat").to_vec2::<f32>()?;
        Ok(QuerySet {
            boxes: self.init_boxes.clone(),
            features: feats,
        })
    }

    /// Multi-scale encoder features, finest first.
    pub fn encode(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::InvalidConfig(format!("expected 3 image channels, got {c}")));
        }
        self.cfg.check_image_size(h, w)?;
        let mut x = images.clone();
        let mut out = Vec::with_capacity(self.cfg.neck_levels);
        for l in 0..self.cfg.neck_levels {
            let s = if l == 0 { 4 } else { 2 };
            let pre = format!("enc.{l}");
            x = patch_conv(&x, self.p(&format!("{pre}.down.w")), self.p(&format!("{pre}.down.b")), s)?
                .relu()?;
            let y = conv3x3(&x, self.p(&format!("{pre}.conv.w")), self.p(&format!("{pre}.conv.b")))?;
            x = (x + y.relu()?)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Normalized fusion weights of one neck node.
    fn fusion(&self, name: &str) -> Result<Tensor> {
        let w = (self.p(&format!("{name}.fuse")).relu()? + FUSION_EPS)?;
        Ok(w.broadcast_div(&w.sum_keepdim(0)?)?)
    }

    fn fuse_node(&self, name: &str, inputs: &[Tensor]) -> Result<Tensor> {
        let w = self.fusion(name)?;
        let mut acc = (inputs[0].clone() * 0.0)?;
        for (i, x) in inputs.iter().enumerate() {
            acc = (acc + x.broadcast_mul(&w.narrow(0, i, 1)?.reshape((1, 1, 1, 1))?)?)?;
        }
        conv1x1(
            &acc.relu()?,
            self.p(&format!("{name}.conv.w")),
            self.p(&format!("{name}.conv.b")),
        )
    }

    /// Projects encoder levels to D channels and fuses them. Output shapes
    /// equal the projected input shapes; a single level passes through.
    pub fn fuse_neck(&self, features: &[Tensor]) -> Result<Vec<Tensor>> {
        let lat: Vec<Tensor> = features
            .iter()
            .enumerate()
            .map(|(l, x)| conv1x1(x, self.p(&format!("neck.lat.{l}.w")), self.p(&format!("neck.lat.{l}.b"))))
            .collect::<Result<_>>()?;
        let n = lat.len();
        if n < 2 {
            return Ok(lat);
        }
        if !self.cfg.bifpn {
            let mut out = lat.clone();
            for l in (0..n - 1).rev() {
                out[l] = (&lat[l] + upsample2x(&out[l + 1])?)?;
            }
            return Ok(out);
        }
        let mut td = lat.clone();
        for l in (0..n - 1).rev() {
            td[l] = self.fuse_node(&format!("neck.td.{l}"), &[lat[l].clone(), upsample2x(&td[l + 1])?])?;
        }
        let mut out = td.clone();
        for l in 1..n {
            let down = downsample2x(&out[l - 1])?;
            let inputs = if l == n - 1 {
                vec![lat[l].clone(), down]
            } else {
                vec![lat[l].clone(), td[l].clone(), down]
            };
            out[l] = self.fuse_node(&format!("neck.bu.{l}"), &inputs)?;
        }
        Ok(out)
    }

    /// Normalized weights of every fusion node, by node name.
    pub fn fusion_weights(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let mut out = Vec::new();
        for name in self.params.names() {
            if let Some(node) = name.strip_suffix(".fuse") {
                let w = self.fusion(node)?.to_vec1::<f32>()?;
                out.push((node.to_string(), w.into_iter().map(f64::from).collect()));
            }
        }
        Ok(out)
    }

    fn rois(boxes: &[Vec<BoxCcwh>], height: usize, width: usize) -> Vec<(usize, BoxXyxy)> {
        boxes
            .iter()
            .enumerate()
            .flat_map(|(bi, bs)| bs.iter().map(move |b| (bi, pixel_box(b, height, width))))
            .collect()
    }

    fn boxes_tensor(&self, boxes: &[Vec<BoxCcwh>]) -> Result<Tensor> {
        let n = self.cfg.num_queries;
        let flat: Vec<f32> = boxes
            .iter()
            .flat_map(|bs| bs.iter().flat_map(|b| b.to_array().map(|v| v as f32)))
            .collect();
        Ok(Tensor::from_vec(flat, (boxes.len(), n, 4), self.device())?)
    }

    fn tensor_boxes(t: &Tensor) -> Result<Vec<Vec<BoxCcwh>>> {
        Ok(t.to_vec3::<f32>()?
            .into_iter()
            .map(|bs| {
                bs.into_iter()
                    .map(|v| BoxCcwh::from_array([v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64]).sanitized(MIN_BOX_SIZE))
                    .collect()
            })
            .collect())
    }

    fn stage(
        &self,
        s: usize,
        table: &FeatureTable,
        boxes: &[Vec<BoxCcwh>],
        q: &Tensor,
        size: (usize, usize),
    ) -> Result<(StageTensors, Tensor)> {
        let cfg = &self.cfg;
        let (bs, n, d) = q.dims3()?;
        let st = |x: &str| format!("stage.{s}.{x}");
        let pool = cfg.pooler_resolution;
        let p2 = pool * pool;

        // Self-attention among the queries of each image.
        let heads = cfg.num_heads;
        let dh = d / heads;
        let split = |x: Tensor| -> Result<Tensor> {
            Ok(x.reshape((bs, n, heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let qh = split(self.lin(q, &st("attn.q"))?)?;
        let kh = split(self.lin(q, &st("attn.k"))?)?;
        let vh = split(self.lin(q, &st("attn.v"))?)?;
        let att = softmax_last(&(qh.matmul(&kh.t()?)? / (dh as f64).sqrt())?)?;
        let mixed = att.matmul(&vh)?.transpose(1, 2)?.reshape((bs, n, d))?;
        let q = self.ln(&(q + self.lin(&mixed, &st("attn.o"))?)?, &st("attn.ln"))?;

        // Dynamic interaction with features pooled from each query's box.
        let (h, w) = size;
        let roi = table.pool(&Self::rois(boxes, h, w), pool)?;
        let dd = cfg.dynamic_dim;
        let qf = q.reshape((bs * n, d))?;
        let dyn_p = self.lin(&qf, &st("dyn.param"))?;
        let p1 = dyn_p.narrow(1, 0, d * dd)?.reshape((bs * n, d, dd))?;
        let p2m = dyn_p.narrow(1, d * dd, dd * d)?.reshape((bs * n, dd, d))?;
        let f = self.ln(&roi.matmul(&p1)?, &st("dyn.ln1"))?.relu()?;
        let f = self.ln(&f.matmul(&p2m)?, &st("dyn.ln2"))?.relu()?;
        let f = self.lin(&f.reshape((bs * n, p2 * d))?, &st("dyn.out"))?;
        let f = self.ln(&f, &st("dyn.ln3"))?.relu()?;
        let q = self.ln(&(q + f.reshape((bs, n, d))?)?, &st("dyn.ln"))?;

        let ff = self.lin(&self.lin(&q, &st("ffn.1"))?.relu()?, &st("ffn.2"))?;
        let q = self.ln(&(&q + ff)?, &st("ffn.ln"))?;

        // Box refinement as deltas on the previous boxes.
        let delta = self.lin(&self.lin(&q, &st("box.1"))?.relu()?, &st("box.2"))?;
        let prev = self.boxes_tensor(boxes)?;
        let col = |t: &Tensor, i: usize| t.narrow(2, i, 1);
        let (pw, ph) = (col(&prev, 2)?, col(&prev, 3)?);
        let cx = (col(&prev, 0)? + (col(&delta, 0)? * 0.5)?.mul(&pw)?)?;
        let cy = (col(&prev, 1)? + (col(&delta, 1)? * 0.5)?.mul(&ph)?)?;
        let nw = pw.mul(&col(&delta, 2)?.clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA)?.exp()?)?;
        let nh = ph.mul(&col(&delta, 3)?.clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA)?.exp()?)?;
        let new_boxes = Tensor::cat(&[cx, cy, nw, nh], 2)?;

        // Masks from features pooled again at the refined (detached) boxes.
        let refined = Self::tensor_boxes(&new_boxes)?;
        let roi2 = table.pool(&Self::rois(&refined, h, w), pool)?;
        let gate = sigmoid(&self.lin(&q.reshape((bs * n, d))?, &st("mask.gate"))?)?;
        let m = roi2.broadcast_mul(&gate.unsqueeze(1)?)?;
        let m = self.lin(&m, &st("mask.reduce"))?.relu()?; // [BN, P2, C]
        let m = m.transpose(1, 2)?.reshape((bs * n, MASK_CHANNELS, pool, pool))?;
        let m = conv3x3(&m, self.p(&st("mask.conv.w")), self.p(&st("mask.conv.b")))?.relu()?;
        let m = m.reshape((bs * n, MASK_CHANNELS, p2))?.transpose(1, 2)?;
        let m = self.lin(&m, &st("mask.logit"))?.reshape((bs * n, pool, pool))?;
        let r = cfg.mask_resolution;
        let masks = sigmoid(&resample_square(&m, &self.up_out, r)?)?.reshape((bs, n, r, r))?;

        let head = |name: &str, present: bool| -> Result<Option<Tensor>> {
            if !present {
                return Ok(None);
            }
            let x = self.lin(&q, &st(name))?.squeeze(2)?;
            Ok(Some(sigmoid(&x)?))
        };
        let v = cfg.variant;
        let out = StageTensors {
            boxes: new_boxes,
            masks,
            cls: head("obj.cls", v.has_cls_head())?,
            box_iou: head("obj.box_iou", v.has_box_iou_head())?,
            mask_iou: head("obj.mask_iou", v.has_mask_iou_head())?,
        };
        Ok((out, q))
    }

    /// Runs every decoder stage. Stage `l + 1` starts from stage `l`'s boxes
    /// (detached) and query features.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<StageTensors>> {
        let (bs, _, h, w) = images.dims4()?;
        let feats = self.encode(images)?;
        let pyramid = self.fuse_neck(&feats)?;
        let table = FeatureTable::new(&pyramid, &self.cfg.strides())?;
        let d = self.cfg.feature_dim;
        let n = self.cfg.num_queries;
        let mut q = self.p("query.feat").unsqueeze(0)?.broadcast_as((bs, n, d))?.contiguous()?;
        let mut boxes = vec![self.init_boxes.clone(); bs];
        let mut stages = Vec::with_capacity(self.cfg.num_stages);
        for s in 0..self.cfg.num_stages {
            let (out, next_q) = self.stage(s, &table, &boxes, &q, (h, w))?;
            boxes = Self::tensor_boxes(&out.boxes)?;
            q = next_q;
            stages.push(out);
        }
        Ok(stages)
    }

    /// Reads the stage tensors of batch element `b` into plain values.
    pub fn stage_output(&self, t: &StageTensors, b: usize) -> Result<StageOutput> {
        let raw: Vec<[f64; 4]> = t
            .boxes
            .get(b)?
            .to_vec2::<f32>()?
            .into_iter()
            .map(|v| [v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64])
            .collect();
        let boxes = raw
            .iter()
            .map(|a| BoxCcwh::from_array(*a).sanitized(MIN_BOX_SIZE))
            .collect();
        let r = self.cfg.mask_resolution;
        let masks = t
            .masks
            .get(b)?
            .reshape((self.cfg.num_queries, r * r))?
            .to_vec2::<f32>()?;
        let read = |x: &Option<Tensor>| -> Result<Option<Vec<f64>>> {
            x.as_ref()
                .map(|x| Ok(x.get(b)?.to_vec1::<f32>()?.into_iter().map(f64::from).collect()))
                .transpose()
        };
        let (cls, bi, mi) = (read(&t.cls)?, read(&t.box_iou)?, read(&t.mask_iou)?);
        let heads: Vec<ObjectnessScores> = (0..self.cfg.num_queries)
            .map(|i| ObjectnessScores {
                cls: cls.as_ref().map(|v| v[i]),
                box_iou: bi.as_ref().map(|v| v[i]),
                mask_iou: mi.as_ref().map(|v| v[i]),
            })
            .collect();
        let objectness = self
            .cfg
            .variant
            .has_objectness()
            .then(|| heads.iter().map(|h| ranking_score(self.cfg.variant, h).unwrap_or(0.0)).collect());
        Ok(StageOutput {
            raw_boxes: raw,
            boxes,
            masks,
            heads,
            objectness,
        })
    }

    /// Top-`k` final-stage instances for each image, ranked by the variant's
    /// objectness score. Without objectness the first `k` queries by index
    /// are returned, which is an arbitrary choice when `k < N`.
    pub fn predict_batch(&self, images: &[&RgbImage], k: usize) -> Result<Vec<Vec<InstancePrediction>>> {
        if k == 0 {
            return Err(Error::InvalidConfig("prediction budget k must be >= 1".into()));
        }
        let n = self.cfg.num_queries;
        if self.cfg.variant == ObjectnessVariant::Void && k < n {
            log::warn!("void variant has no objectness; keeping the first {k} of {n} queries by index");
        }
        let x = images_to_tensor(images, self.device())?;
        let (h, w) = (images[0].height() as usize, images[0].width() as usize);
        let stages = self.forward(&x)?;
        let last = stages.last().expect("at least one stage");
        let r = self.cfg.mask_resolution;
        let mut all = Vec::with_capacity(images.len());
        for b in 0..images.len() {
            let out = self.stage_output(last, b)?;
            let mut order: Vec<usize> = (0..n).collect();
            if let Some(scores) = &out.objectness {
                order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
            }
            order.truncate(k.min(n));
            let preds = order
                .into_iter()
                .map(|i| {
                    let bbox = pixel_box(&out.boxes[i], h, w);
                    InstancePrediction {
                        query: i,
                        bbox,
                        mask: paste_mask(&out.masks[i], r, &bbox, h, w, MASK_THRESHOLD),
                        score: out.objectness.as_ref().map(|s| s[i]),
                    }
                })
                .collect();
            all.push(preds);
        }
        Ok(all)
    }

    pub fn predict(&self, image: &RgbImage, k: usize) -> Result<Vec<InstancePrediction>> {
        Ok(self.predict_batch(&[image], k)?.remove(0))
    }

    pub fn config_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.cfg)?)
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        params::write_checkpoint(path, &self.config_json()?, meta, &self.params)
    }

    /// Loads a checkpoint. When `expected` is given its config must equal the
    /// stored one; otherwise the stored config is used.
    pub fn load(path: &Path, expected: Option<&ModelConfig>, device: &Device) -> Result<(Self, Checkpoint)> {
        let ckpt = read_checkpoint(path)?;
        let cfg: ModelConfig = match expected {
            Some(cfg) => {
                let diff = config_diff(&ckpt.config, &serde_json::to_value(cfg)?);
                if !diff.is_empty() {
                    return Err(Error::ConfigMismatch(format!(
                        "checkpoint vs requested: {}",
                        diff.join("; ")
                    )));
                }
                cfg.clone()
            }
            None => serde_json::from_value(ckpt.config.clone())
                .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?,
        };
        let model = Model::new(cfg, device)?;
        params::load_into(&ckpt, &model.params)?;
        Ok((model, ckpt))
    }
}
