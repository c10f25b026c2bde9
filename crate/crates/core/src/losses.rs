//! Per-stage training objective: focal objectness, L1 + GIoU box regression,
//! dice mask loss and the IoU-regression objectness variants.
//!
//! Every loss here works on plain `f64` values and returns its gradient with
//! respect to the prediction alongside the value. The trainer feeds those
//! gradients back into the network graph, so the functions below are the
//! single source of truth for both the reported loss and the update direction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxCcwh, BoxXyxy};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-6;

pub const DEFAULT_DICE_SMOOTH: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_giou: f64,
    pub lambda_mask: f64,
    pub lambda_box_iou: f64,
    pub lambda_mask_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_reg: 5.0,
            lambda_giou: 2.0,
            lambda_mask: 8.0,
            lambda_box_iou: 1.0,
            lambda_mask_iou: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_cls", self.lambda_cls),
            ("lambda_reg", self.lambda_reg),
            ("lambda_giou", self.lambda_giou),
            ("lambda_mask", self.lambda_mask),
            ("lambda_box_iou", self.lambda_box_iou),
            ("lambda_mask_iou", self.lambda_mask_iou),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which objectness signal a model learns, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectnessVariant {
    /// No objectness branch at all.
    Void,
    /// Class-agnostic foreground classification trained with focal loss.
    Cls,
    /// Regresses the IoU between the predicted and matched ground-truth box.
    #[default]
    Box,
    /// Regresses the IoU between the predicted and matched ground-truth mask.
    Mask,
    /// Both IoU branches.
    Fusion,
}

impl ObjectnessVariant {
    pub const ALL: [ObjectnessVariant; 5] = [
        ObjectnessVariant::Void,
        ObjectnessVariant::Cls,
        ObjectnessVariant::Box,
        ObjectnessVariant::Mask,
        ObjectnessVariant::Fusion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectnessVariant::Void => "void",
            ObjectnessVariant::Cls => "cls",
            ObjectnessVariant::Box => "box",
            ObjectnessVariant::Mask => "mask",
            ObjectnessVariant::Fusion => "fusion",
        }
    }

    pub fn has_cls_head(&self) -> bool {
        matches!(self, ObjectnessVariant::Cls)
    }

    pub fn has_box_iou_head(&self) -> bool {
        matches!(self, ObjectnessVariant::Box | ObjectnessVariant::Fusion)
    }

    pub fn has_mask_iou_head(&self) -> bool {
        matches!(self, ObjectnessVariant::Mask | ObjectnessVariant::Fusion)
    }

    pub fn has_objectness(&self) -> bool {
        !matches!(self, ObjectnessVariant::Void)
    }
}

impl fmt::Display for ObjectnessVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectnessVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectnessVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    Ok(())
}

/// Sigmoid focal loss of a single probability. Returns `(loss, d loss / d p)`.
///
/// The clamp to `[PROB_EPS, 1 - PROB_EPS]` has zero derivative outside the
/// open interval, so saturated inputs report a zero gradient.
pub fn focal_loss_grad(p: f64, target: bool, focal: FocalParams) -> Result<(f64, f64)> {
    check_probability(p)?;
    let FocalParams { alpha, gamma } = focal;
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let inside = clamped == p;
    let p = clamped;
    let (loss, grad) = if target {
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * p.ln();
        let grad = alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p);
        (loss, grad)
    } else {
        let q = 1.0 - p;
        let loss = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let grad = -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
        (loss, grad)
    };
    Ok((loss, if inside { grad } else { 0.0 }))
}

pub fn focal_loss(p: f64, target: bool, focal: FocalParams) -> Result<f64> {
    focal_loss_grad(p, target, focal).map(|(l, _)| l)
}

/// Weighted box regression terms for one matched pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxLoss {
    pub l1: f64,
    pub giou: f64,
    /// Gradient of `l1 + giou` with respect to `[cx, cy, w, h]` of the prediction.
    pub grad: [f64; 4],
}

/// `lambda_reg * sum |pred - gt|` over normalized `cx, cy, w, h`, plus
/// `lambda_giou * (1 - GIoU(pred, gt))`.
pub fn box_loss(pred: &BoxCcwh, gt: &BoxCcwh, weights: &LossWeights) -> BoxLoss {
    let p = pred.to_array();
    let g = gt.to_array();
    let mut l1 = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = p[i] - g[i];
        l1 += d.abs();
        grad[i] = weights.lambda_reg * sign(d);
    }
    let (giou, dgiou) = giou_with_grad(pred, gt);
    for i in 0..4 {
        grad[i] -= weights.lambda_giou * dgiou[i];
    }
    BoxLoss {
        l1: weights.lambda_reg * l1,
        giou: weights.lambda_giou * (1.0 - giou),
        grad,
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// GIoU between two normalized boxes and its gradient with respect to the
/// first box's `[cx, cy, w, h]`.
pub fn giou_with_grad(pred: &BoxCcwh, gt: &BoxCcwh) -> (f64, [f64; 4]) {
    let BoxXyxy {
        x1: a1,
        y1: b1,
        x2: a2,
        y2: b2,
    } = pred.corners();
    let BoxXyxy {
        x1: g1,
        y1: h1,
        x2: g2,
        y2: h2,
    } = gt.corners();

    let pw = a2 - a1;
    let ph = b2 - b1;
    let area_p = pw * ph;
    let area_g = (g2 - g1) * (h2 - h1);

    let iw = a2.min(g2) - a1.max(g1);
    let ih = b2.min(h2) - b1.max(h1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let union = area_p + area_g - inter;

    let cw = a2.max(g2) - a1.min(g1);
    let ch = b2.max(h2) - b1.min(h1);
    let hull = cw * ch;
    if hull <= 0.0 || union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let giou = inter / union - (hull - union) / hull;

    // Partial derivatives with respect to corners [a1, b1, a2, b2].
    let d_area_p = [-ph, -pw, ph, pw];
    let d_inter = if overlapping {
        [
            if a1 > g1 { -ih } else { 0.0 },
            if b1 > h1 { -iw } else { 0.0 },
            if a2 < g2 { ih } else { 0.0 },
            if b2 < h2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_hull = [
        if a1 < g1 { -ch } else { 0.0 },
        if b1 < h1 { -cw } else { 0.0 },
        if a2 > g2 { ch } else { 0.0 },
        if b2 > h2 { cw } else { 0.0 },
    ];
    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area_p[k] - d_inter[k];
        d_corner[k] = d_inter[k] / union - inter / (union * union) * d_union + d_union / hull
            - union / (hull * hull) * d_hull[k];
    }
    // x1 = cx - w/2, x2 = cx + w/2 (same for y).
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ];
    (giou, grad)
}

/// Dice loss `1 - (2 sum(p g) + s) / (sum p^2 + sum g^2 + s)` and its gradient
/// with respect to every entry of `pred`.
pub fn dice_loss_grad(pred: &[f64], target: &[bool], smooth: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            left: (pred.len(), 1),
            right: (target.len(), 1),
        });
    }
    let mut inter = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&p, &g) in pred.iter().zip(target) {
        if g {
            inter += p;
            gg += 1.0;
        }
        pp += p * p;
    }
    let num = 2.0 * inter + smooth;
    let den = pp + gg + smooth;
    if den <= 0.0 {
        return Ok((0.0, vec![0.0; pred.len()]));
    }
    let loss = 1.0 - num / den;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let g = if g { 1.0 } else { 0.0 };
            -(2.0 * g * den - num * 2.0 * p) / (den * den)
        })
        .collect();
    Ok((loss, grad))
}

pub fn dice_loss(pred: &[f64], target: &[bool], smooth: f64) -> Result<f64> {
    dice_loss_grad(pred, target, smooth).map(|(l, _)| l)
}

/// Predicted objectness scores of one query; absent heads are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectnessScores {
    pub cls: Option<f64>,
    pub box_iou: Option<f64>,
    pub mask_iou: Option<f64>,
}

/// Supervision for one query. IoU targets are plain numbers: nothing flows
/// back through them.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectnessTargets {
    pub is_object: bool,
    pub box_iou: f64,
    pub mask_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectnessLoss {
    pub value: f64,
    pub grad_cls: f64,
    pub grad_box_iou: f64,
    pub grad_mask_iou: f64,
}

fn clamp_score(name: &str, p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        log::warn!("{name} score {p} outside [0, 1], clamping");
        if p.is_nan() {
            return 0.0;
        }
        return p.clamp(0.0, 1.0);
    }
    p
}

fn missing_head(variant: ObjectnessVariant, head: &str) -> Error {
    Error::InvalidConfig(format!("variant {variant} needs a {head} score"))
}

/// Objectness term for a single query.
pub fn objectness_loss(
    variant: ObjectnessVariant,
    scores: &ObjectnessScores,
    targets: &ObjectnessTargets,
    weights: &LossWeights,
    focal: FocalParams,
) -> Result<ObjectnessLoss> {
    let mut out = ObjectnessLoss::default();
    match variant {
        ObjectnessVariant::Void => {}
        ObjectnessVariant::Cls => {
            let p = clamp_score("cls", scores.cls.ok_or_else(|| missing_head(variant, "cls"))?);
            let (l, g) = focal_loss_grad(p, targets.is_object, focal)?;
            out.value = weights.lambda_cls * l;
            out.grad_cls = weights.lambda_cls * g;
        }
        ObjectnessVariant::Box | ObjectnessVariant::Mask | ObjectnessVariant::Fusion => {
            if variant.has_box_iou_head() {
                let p = clamp_score(
                    "box-iou",
                    scores.box_iou.ok_or_else(|| missing_head(variant, "box-iou"))?,
                );
                let d = p - targets.box_iou;
                out.value += weights.lambda_box_iou * d.abs();
                out.grad_box_iou = weights.lambda_box_iou * sign(d);
            }
            if variant.has_mask_iou_head() {
                let p = clamp_score(
                    "mask-iou",
                    scores.mask_iou.ok_or_else(|| missing_head(variant, "mask-iou"))?,
                );
                let d = p - targets.mask_iou;
                out.value += weights.lambda_mask_iou * d.abs();
                out.grad_mask_iou = weights.lambda_mask_iou * sign(d);
            }
        }
    }
    Ok(out)
}

/// Weighted loss components of one decoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLoss {
    pub objectness: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub mask: f64,
}

impl StageLoss {
    pub fn total(&self) -> f64 {
        exact_sum([self.objectness, self.box_l1, self.box_giou, self.mask])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stages: Vec<StageLoss>,
    pub total: f64,
}

/// Sums every component of every stage into the training objective.
pub fn aggregate(stages: &[StageLoss], expected_stages: usize) -> Result<LossBreakdown> {
    if stages.len() != expected_stages {
        return Err(Error::StageCount {
            expected: expected_stages,
            got: stages.len(),
        });
    }
    let total = exact_sum(
        stages
            .iter()
            .flat_map(|s| [s.objectness, s.box_l1, s.box_giou, s.mask]),
    );
    Ok(LossBreakdown {
        stages: stages.to_vec(),
        total,
    })
}

/// Correctly rounded floating-point sum (Shewchuk's partials).
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the partials, highest magnitude first, with the half-way correction.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}
