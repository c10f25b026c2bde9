//! Training loop: per-stage matching, loss assembly, optimization, schedules,
//! checkpoints and the per-step metrics log. Also checkpoint evaluation.

mod optim;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentMode, Dataset, GroundTruthInstance, ResultRecord, RleJson};
use crate::error::{Error, Result};
use crate::evaluation::{average_recall, ArReport, EvalConfig, EvalImage};
use crate::geometry::{box_iou, mask_iou, BoxCcwh};
use crate::losses::{
    aggregate, box_loss, dice_loss_grad, objectness_loss, FocalParams, LossBreakdown, LossWeights,
    ObjectnessTargets, StageLoss, DEFAULT_DICE_SMOOTH,
};
use crate::matching::{build_cost_matrix, hungarian_assign, MatchCostConfig};
use crate::model::{
    crop_mask_target, images_to_tensor, paste_mask, pixel_box, Model, ModelConfig, StageTensors,
    MASK_THRESHOLD,
};
use crate::rng::derive_seed;

pub use optim::AdamW;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPLAY_FILE: &str = "failed_batch.json";

const AUGMENT_STREAM: u64 = 0xa11a;
const SHUFFLE_STREAM: u64 = 0x5f1e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "1x")]
    OneX,
    #[serde(rename = "3x")]
    ThreeX,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::OneX => "1x",
            Preset::ThreeX => "3x",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1x" => Ok(Preset::OneX),
            "3x" => Ok(Preset::ThreeX),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}` (expected 1x or 3x)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch counts after which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentMode,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub loss: LossWeights,
    pub focal: FocalParams,
    pub dice_smooth: f64,
    pub matching: MatchCostConfig,
    /// Write the checkpoint after every this many epochs (and always at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::OneX)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let (epochs, decay_epochs, augment) = match p {
            Preset::OneX => (12, vec![8, 11], AugmentMode::Flip),
            Preset::ThreeX => (36, vec![27, 33], AugmentMode::Lsj),
        };
        TrainConfig {
            lr: 1e-4,
            weight_decay: 5e-4,
            epochs,
            decay_epochs,
            decay_factor: 0.1,
            batch_size: 8,
            seed: 0,
            augment,
            grad_clip: Some(1.0),
            loss: LossWeights::default(),
            focal: FocalParams::default(),
            dice_smooth: DEFAULT_DICE_SMOOTH,
            matching: MatchCostConfig::default(),
            checkpoint_every: 1,
        }
    }

    /// Same schedule shape with `epochs` total epochs: decay points land at
    /// the 1x schedule's fractions 8/12 and 11/12.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let at = |num: usize| ((epochs * num) as f64 / 12.0).round() as usize;
        let mut decay: Vec<usize> = [at(8), at(11)]
            .into_iter()
            .filter(|&e| e > 0 && e < epochs)
            .collect();
        decay.dedup();
        self.epochs = epochs;
        self.decay_epochs = decay;
        self
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay_epochs {:?} must be strictly increasing", self.decay_epochs));
        }
        if let Some(&last) = self.decay_epochs.last() {
            if last >= self.epochs {
                return bad(format!(
                    "decay epoch {last} is not below the epoch count {}",
                    self.epochs
                ));
            }
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return bad("decay_factor must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        if !(self.dice_smooth.is_finite() && self.dice_smooth >= 0.0) {
            return bad("dice_smooth must be >= 0".into());
        }
        self.loss.validate()
    }

    /// Learning rate used during zero-based epoch `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }
}

/// Supervision for one image of a batch, after augmentation.
#[derive(Debug, Clone)]
pub struct ImageTargets {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<GroundTruthInstance>,
}

/// Losses of a forward pass and the surrogate whose gradient equals the
/// analytic loss gradient with respect to every network output.
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub surrogate: Tensor,
    pub num_gt: usize,
}

fn to_tensor(data: Vec<f32>, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, like.shape(), like.device())?)
}

/// Matches every stage independently against the targets and evaluates the
/// weighted losses, normalized by the number of ground-truth instances in the batch.
pub fn compute_losses(
    model: &Model,
    stages: &[StageTensors],
    targets: &[ImageTargets],
    cfg: &TrainConfig,
) -> Result<LossOutput> {
    let mcfg = model.config();
    let variant = mcfg.variant;
    let n = mcfg.num_queries;
    let r = mcfg.mask_resolution;
    let rr = r * r;
    let bs = targets.len();
    let num_gt: usize = targets.iter().map(|t| t.instances.len()).sum();
    let norm = num_gt.max(1) as f64;
    let w = &cfg.loss;

    let mut stage_losses = Vec::with_capacity(stages.len());
    let mut surrogate = Tensor::zeros((), candle_core::DType::F32, model.device())?;
    for st in stages {
        let mut sl = StageLoss::default();
        let mut g_box = vec![0f32; bs * n * 4];
        let mut g_mask = vec![0f32; bs * n * rr];
        let mut g_cls = vec![0f32; bs * n];
        let mut g_biou = vec![0f32; bs * n];
        let mut g_miou = vec![0f32; bs * n];
        let mut obj_terms = Vec::new();
        let mut l1_terms = Vec::new();
        let mut giou_terms = Vec::new();
        let mut mask_terms = Vec::new();
        for (b, t) in targets.iter().enumerate() {
            let out = model.stage_output(st, b)?;
            let raw: Vec<BoxCcwh> = out.raw_boxes.iter().map(|a| BoxCcwh::from_array(*a)).collect();
            let gt_boxes: Vec<BoxCcwh> = t
                .instances
                .iter()
                .map(|g| g.bbox.to_ccwh(t.width as f64, t.height as f64))
                .collect();
            let assignment = if gt_boxes.is_empty() {
                None
            } else {
                let cost = build_cost_matrix(&raw, out.objectness.as_deref(), &gt_boxes, &cfg.matching)?;
                Some(hungarian_assign(&cost))
            };
            let gt_of = assignment
                .as_ref()
                .map_or_else(|| vec![None; n], |a| a.gt_for_query(n));
            for q in 0..n {
                let k = b * n + q;
                let Some(gi) = gt_of[q] else {
                    if variant.has_cls_head() {
                        let targets = ObjectnessTargets::default();
                        let o = objectness_loss(variant, &out.heads[q], &targets, w, cfg.focal)?;
                        obj_terms.push(o.value / norm);
                        g_cls[k] = (o.grad_cls / norm) as f32;
                    }
                    continue;
                };
                let gt = &t.instances[gi];
                let bl = box_loss(&raw[q], &gt_boxes[gi], w);
                l1_terms.push(bl.l1 / norm);
                giou_terms.push(bl.giou / norm);
                for i in 0..4 {
                    g_box[k * 4 + i] = (bl.grad[i] / norm) as f32;
                }

                let pbox = pixel_box(&out.boxes[q], t.height, t.width);
                let target = crop_mask_target(&gt.mask, &pbox, r);
                let pred: Vec<f64> = out.masks[q].iter().map(|&v| v as f64).collect();
                let (dl, dg) = dice_loss_grad(&pred, &target, cfg.dice_smooth)?;
                mask_terms.push(w.lambda_mask * dl / norm);
                for (i, g) in dg.into_iter().enumerate() {
                    g_mask[k * rr + i] = (w.lambda_mask * g / norm) as f32;
                }

                if variant.has_objectness() {
                    let box_target = if variant.has_box_iou_head() { box_iou(&pbox, &gt.bbox) } else { 0.0 };
                    let mask_target = if variant.has_mask_iou_head() {
                        let pasted = paste_mask(&out.masks[q], r, &pbox, t.height, t.width, MASK_THRESHOLD);
                        mask_iou(&pasted, &gt.mask)?
                    } else {
                        0.0
                    };
                    let targets = ObjectnessTargets {
                        is_object: true,
                        box_iou: box_target,
                        mask_iou: mask_target,
                    };
                    let o = objectness_loss(variant, &out.heads[q], &targets, w, cfg.focal)?;
                    obj_terms.push(o.value / norm);
                    g_cls[k] = (o.grad_cls / norm) as f32;
                    g_biou[k] = (o.grad_box_iou / norm) as f32;
                    g_miou[k] = (o.grad_mask_iou / norm) as f32;
                }
            }
        }
        sl.objectness = crate::losses::exact_sum(obj_terms);
        sl.box_l1 = crate::losses::exact_sum(l1_terms);
        sl.box_giou = crate::losses::exact_sum(giou_terms);
        sl.mask = crate::losses::exact_sum(mask_terms);
        stage_losses.push(sl);

        let mut add = |out: &Tensor, grad: Vec<f32>| -> Result<()> {
            let g = to_tensor(grad, out)?;
            surrogate = (&surrogate + (out * g)?.sum_all()?)?;
            Ok(())
        };
        add(&st.boxes, g_box)?;
        add(&st.masks, g_mask)?;
        if let Some(t) = &st.cls {
            add(t, g_cls)?;
        }
        if let Some(t) = &st.box_iou {
            add(t, g_biou)?;
        }
        if let Some(t) = &st.mask_iou {
            add(t, g_miou)?;
        }
    }
    Ok(LossOutput {
        breakdown: aggregate(&stage_losses, mcfg.num_stages)?,
        surrogate,
        num_gt,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub objectness: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub mask: f64,
    pub grad_norm: f64,
    pub num_gt: usize,
    pub stages: Vec<StageLoss>,
}

impl StepMetrics {
    fn new(step: usize, epoch: usize, lr: f64, b: &LossBreakdown, grad_norm: f64, num_gt: usize) -> Self {
        let sum = |f: fn(&StageLoss) -> f64| crate::losses::exact_sum(b.stages.iter().map(f));
        StepMetrics {
            step,
            epoch,
            lr,
            loss: b.total,
            objectness: sum(|s| s.objectness),
            box_l1: sum(|s| s.box_l1),
            box_giou: sum(|s| s.box_giou),
            mask: sum(|s| s.mask),
            grad_norm,
            num_gt,
            stages: b.stages.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Replay {
    step: usize,
    epoch: usize,
    sample_indices: Vec<usize>,
    image_ids: Vec<u64>,
    augment_seed: u64,
    losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last: Option<StepMetrics>,
}

/// Deterministic per-epoch sample order.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ SHUFFLE_STREAM, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Augmented images and supervision for a batch of sample indices.
pub fn build_batch(
    dataset: &Dataset,
    indices: &[usize],
    mode: AugmentMode,
    seed: u64,
) -> Result<(Vec<image::RgbImage>, Vec<ImageTargets>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &dataset.samples[i];
        let supervised: Vec<GroundTruthInstance> =
            s.supervised(dataset.supervision).into_iter().cloned().collect();
        let (img, inst) = augment(s.image()?, &supervised, mode, &mut rng);
        targets.push(ImageTargets {
            height: img.height() as usize,
            width: img.width() as usize,
            instances: inst,
        });
        images.push(img);
    }
    Ok((images, targets))
}

/// Trains `model` in place, writing the metrics log and checkpoint to `out_dir`.
pub fn train(model: &mut Model, cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.matching.validate(model.config().variant)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );
    let mut opt = AdamW::new(cfg.weight_decay);
    let steps_per_epoch = cfg.steps_per_epoch(dataset.len());
    let mut step = 0;
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let order = epoch_order(cfg.seed, epoch, dataset.len());
        for chunk in order.chunks(cfg.batch_size) {
            let aug_seed = derive_seed(cfg.seed ^ AUGMENT_STREAM, step as u64);
            let (images, targets) = build_batch(dataset, chunk, cfg.augment, aug_seed)?;
            let refs: Vec<&image::RgbImage> = images.iter().collect();
            let x = images_to_tensor(&refs, model.device())?;
            let stages = model.forward(&x)?;
            let losses = compute_losses(model, &stages, &targets, cfg)?;
            if !losses.breakdown.total.is_finite() {
                let replay = out_dir.join(REPLAY_FILE);
                let record = Replay {
                    step,
                    epoch,
                    sample_indices: chunk.to_vec(),
                    image_ids: chunk.iter().map(|&i| dataset.samples[i].image_id).collect(),
                    augment_seed: aug_seed,
                    losses: losses.breakdown.clone(),
                };
                std::fs::write(&replay, serde_json::to_vec_pretty(&record)?)
                    .map_err(|e| Error::io(&replay, e))?;
                log.flush().map_err(|e| Error::io(&metrics_path, e))?;
                return Err(Error::NonFiniteLoss {
                    step,
                    replay: Some(replay),
                });
            }
            let grads = losses.surrogate.backward()?;
            let grad_norm = opt.step(model.params(), &grads, lr, cfg.grad_clip)?;
            let m = StepMetrics::new(step, epoch, lr, &losses.breakdown, grad_norm, losses.num_gt);
            serde_json::to_writer(&mut log, &m)?;
            log.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;
            last = Some(m);
            step += 1;
            debug_assert!(step <= steps_per_epoch * (epoch + 1));
        }
        log.flush().map_err(|e| Error::io(&metrics_path, e))?;
        if (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            model.save(&ckpt_path, &serde_json::json!({ "epoch": epoch + 1, "step": step }))?;
        }
    }
    model.save(&ckpt_path, &serde_json::json!({ "epoch": cfg.epochs, "step": step }))?;
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainOutcome {
        steps: step,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        last,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ArReport,
    pub results: Vec<ResultRecord>,
}

#[derive(Debug, Clone)]
pub struct DatasetPredictions {
    pub images: Vec<EvalImage>,
    pub results: Vec<ResultRecord>,
}

/// Runs `model` over every sample keeping the top `k` predictions per image.
pub fn predict_dataset(model: &Model, dataset: &Dataset, k: usize, batch_size: usize) -> Result<DatasetPredictions> {
    let k = k.min(model.config().num_queries);
    let mut images = Vec::with_capacity(dataset.len());
    let mut results = Vec::new();
    for chunk in dataset.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&image::RgbImage> = chunk.iter().map(|s| s.image()).collect::<Result<_>>()?;
        let preds = model.predict_batch(&refs, k)?;
        for (s, p) in chunk.iter().zip(preds) {
            for inst in &p {
                results.push(ResultRecord {
                    image_id: s.image_id,
                    category_id: 1,
                    bbox: inst.bbox.to_xywh(),
                    segmentation: Some(RleJson::from_mask(&inst.mask)),
                    score: inst.score,
                });
            }
            images.push(EvalImage {
                image_id: s.image_id,
                gts: s.eval_ground_truth(),
                preds: p.iter().map(|i| i.to_eval()).collect(),
            });
        }
    }
    Ok(DatasetPredictions { images, results })
}

/// Predicts with `model` on every sample at the largest budget and scores
/// the predictions. Read-only.
pub fn evaluate_model(model: &Model, dataset: &Dataset, eval_cfg: &EvalConfig, batch_size: usize) -> Result<Evaluation> {
    eval_cfg.validate()?;
    let k = eval_cfg.budgets.iter().copied().max().unwrap_or(1);
    let p = predict_dataset(model, dataset, k, batch_size)?;
    Ok(Evaluation {
        report: average_recall(&p.images, eval_cfg)?,
        results: p.results,
    })
}

/// Loads a checkpoint (checked against `model_cfg` when given) and evaluates it.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    model_cfg: Option<&ModelConfig>,
    dataset: &Dataset,
    eval_cfg: &EvalConfig,
    batch_size: usize,
) -> Result<Evaluation> {
    let (model, _) = Model::load(checkpoint, model_cfg, &Device::Cpu)?;
    evaluate_model(&model, dataset, eval_cfg, batch_size)
}
