//! Class-agnostic average recall.
//!
//! Recall at IoU threshold `t` and budget `k` is the number of ground-truth
//! instances matched by an image's top-`k` predictions, summed over images and
//! divided by the total ground-truth count. AR@k averages that recall over the
//! configured IoU thresholds. Size-bucket AR restricts the ground truth only;
//! every prediction stays a candidate.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, mask_iou, size_bucket, BinaryMask, BoxXyxy, SizeBucket};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Box,
    Mask,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Box => "box",
            EvalMode::Mask => "mask",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Plain,
    /// Novel-category recall with base-covering predictions removed before the budget.
    CrossCategory,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Plain => "plain",
            Protocol::CrossCategory => "cross-category",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Protocol::Plain),
            "cross-category" | "cross_category" => Ok(Protocol::CrossCategory),
            other => Err(Error::InvalidConfig(format!("unknown protocol `{other}`"))),
        }
    }
}

/// `0.50, 0.55, ..., 0.95`, each computed as an exact decimal ratio.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub const DEFAULT_EXCLUSION_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub budgets: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
    pub mode: EvalMode,
    pub protocol: Protocol,
    pub exclusion_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            budgets: vec![10, 100],
            iou_thresholds: coco_iou_thresholds(),
            mode: EvalMode::Mask,
            protocol: Protocol::Plain,
            exclusion_iou: DEFAULT_EXCLUSION_IOU,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(Error::InvalidConfig("budgets must be non-empty and >= 1".into()));
        }
        if self.iou_thresholds.is_empty() {
            return Err(Error::InvalidConfig("at least one IoU threshold is required".into()));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::InvalidConfig("IoU thresholds must lie in (0, 1)".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("IoU thresholds must be strictly increasing".into()));
        }
        if !(self.exclusion_iou > 0.0 && self.exclusion_iou <= 1.0) {
            return Err(Error::InvalidConfig("exclusion_iou must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn max_budget(&self) -> usize {
        self.budgets.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalGroundTruth {
    pub bbox: BoxXyxy,
    pub mask: Option<BinaryMask>,
    /// Area used for size bucketing (the mask area for segmentation data).
    pub area: f64,
    pub is_base: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPrediction {
    pub bbox: BoxXyxy,
    pub mask: Option<BinaryMask>,
    pub score: Option<f64>,
}

/// One image's ground truth and its predictions, already in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub image_id: u64,
    pub gts: Vec<EvalGroundTruth>,
    pub preds: Vec<EvalPrediction>,
}

/// Orders predictions by descending score; unscored predictions keep their
/// original relative order after all scored ones.
pub fn rank_by_score(preds: &mut [EvalPrediction]) {
    preds.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

/// Walks predictions in rank order; each claims the highest-IoU unmatched
/// ground truth whose IoU reaches `iou_threshold` (lowest index on ties).
pub fn match_greedy<P, G>(
    preds: &[P],
    gts: &[G],
    iou_threshold: f64,
    iou_fn: impl Fn(&P, &G) -> f64,
) -> Vec<bool> {
    let ious: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| iou_fn(p, g)).collect())
        .collect();
    let eligible = vec![true; gts.len()];
    greedy_on_matrix(&ious, preds.len(), &eligible, iou_threshold)
}

fn greedy_on_matrix(ious: &[Vec<f64>], k: usize, eligible: &[bool], threshold: f64) -> Vec<bool> {
    let mut matched = vec![false; eligible.len()];
    for row in ious.iter().take(k) {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in row.iter().enumerate() {
            if !eligible[g] || matched[g] || iou < threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
        }
    }
    matched
}

fn pair_iou(mode: EvalMode, p: &EvalPrediction, g: &EvalGroundTruth) -> Result<f64> {
    match mode {
        EvalMode::Box => Ok(box_iou(&p.bbox, &g.bbox)),
        EvalMode::Mask => {
            let pm = p
                .mask
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("mask evaluation needs predicted masks".into()))?;
            let gm = g.mask.as_ref().ok_or_else(|| {
                Error::InvalidConfig("mask evaluation needs ground-truth masks".into())
            })?;
            mask_iou(pm, gm)
        }
    }
}

/// Drops every prediction whose IoU with some base-category ground truth
/// reaches `exclusion_iou`, preserving the order of the rest.
pub fn cross_category_filter(
    preds: &[EvalPrediction],
    base_gts: &[&EvalGroundTruth],
    exclusion_iou: f64,
    mode: EvalMode,
) -> Result<Vec<EvalPrediction>> {
    let mut kept = Vec::with_capacity(preds.len());
    'pred: for p in preds {
        for g in base_gts {
            if pair_iou(mode, p, g)? >= exclusion_iou {
                continue 'pred;
            }
        }
        kept.push(p.clone());
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecall {
    pub budget: usize,
    pub iou_threshold: f64,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecall {
    pub image_id: u64,
    pub num_gt: usize,
    /// Mean over thresholds at the largest budget; `None` without ground truth.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArReport {
    pub mode: EvalMode,
    pub protocol: Protocol,
    /// False when there is no ground truth to recall; every metric is then `null`.
    pub valid: bool,
    pub num_images: usize,
    pub num_gt: usize,
    pub budgets: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
    /// AR@k keyed by the budget.
    pub ar_at: BTreeMap<usize, Option<f64>>,
    pub per_threshold: Vec<ThresholdRecall>,
    /// The following are at the largest budget.
    pub ar: Option<f64>,
    pub ar_50: Option<f64>,
    pub ar_75: Option<f64>,
    pub ar_small: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ar_large: Option<f64>,
    pub per_image: Vec<ImageRecall>,
}

impl ArReport {
    pub fn csv_header() -> &'static str {
        "mode,protocol,budget,num_gt,ar,ar_50,ar_75,ar_small,ar_medium,ar_large"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let max_k = self.budgets.iter().copied().max().unwrap_or(0);
        self.budgets
            .iter()
            .map(|&k| {
                let at_max = k == max_k;
                let pick = |v: Option<f64>| if at_max { f(v) } else { String::new() };
                format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    self.mode,
                    self.protocol,
                    k,
                    self.num_gt,
                    f(self.ar_at.get(&k).copied().flatten()),
                    pick(self.ar_50),
                    pick(self.ar_75),
                    pick(self.ar_small),
                    pick(self.ar_medium),
                    pick(self.ar_large),
                )
            })
            .collect()
    }
}

/// Matched-count accumulator for one (budget, threshold) cell.
#[derive(Default, Clone, Copy)]
struct Tally {
    matched: u64,
    total: u64,
}

impl Tally {
    fn recall(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matched as f64 / self.total as f64)
    }
}

pub fn average_recall(images: &[EvalImage], cfg: &EvalConfig) -> Result<ArReport> {
    cfg.validate()?;
    let max_k = cfg.max_budget();
    let n_thr = cfg.iou_thresholds.len();
    let mut cells = vec![vec![Tally::default(); n_thr]; cfg.budgets.len()];
    let mut at_50 = Tally::default();
    let mut at_75 = Tally::default();
    let mut buckets: BTreeMap<SizeBucket, Vec<Tally>> = SizeBucket::ALL
        .iter()
        .map(|&b| (b, vec![Tally::default(); n_thr]))
        .collect();
    let mut per_image = Vec::with_capacity(images.len());
    let mut num_gt = 0usize;

    for img in images {
        let (targets, candidates): (Vec<&EvalGroundTruth>, Vec<EvalPrediction>) = match cfg.protocol
        {
            Protocol::Plain => (img.gts.iter().collect(), img.preds.clone()),
            Protocol::CrossCategory => {
                let base: Vec<&EvalGroundTruth> = img.gts.iter().filter(|g| g.is_base).collect();
                let novel = img.gts.iter().filter(|g| !g.is_base).collect();
                (novel, cross_category_filter(&img.preds, &base, cfg.exclusion_iou, cfg.mode)?)
            }
        };
        num_gt += targets.len();
        let top = &candidates[..candidates.len().min(max_k)];
        let ious = top
            .iter()
            .map(|p| targets.iter().map(|g| pair_iou(cfg.mode, p, g)).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let all = vec![true; targets.len()];
        let count = |k: usize, eligible: &[bool], thr: f64| -> u64 {
            greedy_on_matrix(&ious, k, eligible, thr)
                .iter()
                .filter(|&&m| m)
                .count() as u64
        };

        for (bi, &k) in cfg.budgets.iter().enumerate() {
            for (ti, &thr) in cfg.iou_thresholds.iter().enumerate() {
                cells[bi][ti].matched += count(k, &all, thr);
                cells[bi][ti].total += targets.len() as u64;
            }
        }
        at_50.matched += count(max_k, &all, 0.5);
        at_50.total += targets.len() as u64;
        at_75.matched += count(max_k, &all, 0.75);
        at_75.total += targets.len() as u64;

        let sizes = targets
            .iter()
            .map(|g| size_bucket(g.area))
            .collect::<Result<Vec<_>>>()?;
        for (bucket, tallies) in buckets.iter_mut() {
            let eligible: Vec<bool> = sizes.iter().map(|s| s == bucket).collect();
            let n = eligible.iter().filter(|&&e| e).count() as u64;
            for (ti, &thr) in cfg.iou_thresholds.iter().enumerate() {
                tallies[ti].matched += count(max_k, &eligible, thr);
                tallies[ti].total += n;
            }
        }

        let img_recall = (!targets.is_empty()).then(|| {
            let s: u64 = cfg
                .iou_thresholds
                .iter()
                .map(|&thr| count(max_k, &all, thr))
                .sum();
            s as f64 / (n_thr as f64 * targets.len() as f64)
        });
        per_image.push(ImageRecall {
            image_id: img.image_id,
            num_gt: targets.len(),
            recall: img_recall,
        });
    }

    let mean = |ts: &[Tally]| -> Option<f64> {
        let rs: Option<Vec<f64>> = ts.iter().map(Tally::recall).collect();
        rs.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut ar_at = BTreeMap::new();
    let mut per_threshold = Vec::new();
    for (bi, &k) in cfg.budgets.iter().enumerate() {
        ar_at.insert(k, mean(&cells[bi]));
        for (ti, &thr) in cfg.iou_thresholds.iter().enumerate() {
            per_threshold.push(ThresholdRecall {
                budget: k,
                iou_threshold: thr,
                recall: cells[bi][ti].recall(),
            });
        }
    }
    let ar = ar_at.get(&max_k).copied().flatten();
    Ok(ArReport {
        mode: cfg.mode,
        protocol: cfg.protocol,
        valid: num_gt > 0,
        num_images: images.len(),
        num_gt,
        budgets: cfg.budgets.clone(),
        iou_thresholds: cfg.iou_thresholds.clone(),
        ar_at,
        per_threshold,
        ar,
        ar_50: at_50.recall(),
        ar_75: at_75.recall(),
        ar_small: mean(&buckets[&SizeBucket::Small]),
        ar_medium: mean(&buckets[&SizeBucket::Medium]),
        ar_large: mean(&buckets[&SizeBucket::Large]),
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXyxy {
        BoxXyxy::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(b: BoxXyxy, is_base: bool) -> EvalGroundTruth {
        EvalGroundTruth {
            bbox: b,
            mask: None,
            area: b.area(),
            is_base,
        }
    }

    fn pred(b: BoxXyxy) -> EvalPrediction {
        EvalPrediction {
            bbox: b,
            mask: None,
            score: None,
        }
    }

    fn box_cfg() -> EvalConfig {
        EvalConfig {
            mode: EvalMode::Box,
            ..Default::default()
        }
    }

    #[test]
    fn greedy_examples() {
        let g = [bx(0., 0., 10., 10.)];
        let iou = |p: &BoxXyxy, g: &BoxXyxy| box_iou(p, g);
        assert_eq!(match_greedy(&[bx(0., 0., 6., 10.)], &g, 0.5, iou), vec![true]);
        // The first prediction takes the only ground truth.
        let two = [bx(0., 0., 6., 10.), bx(0., 0., 10., 10.)];
        let gts = [bx(0., 0., 10., 10.)];
        let m = match_greedy(&two, &gts, 0.5, iou);
        assert_eq!(m, vec![true]);
        let m = match_greedy(&two[..1], &gts, 0.7, iou);
        assert_eq!(m, vec![false]);
    }

    #[test]
    fn single_pair_at_iou_point_six() {
        let img = EvalImage {
            image_id: 1,
            gts: vec![gt(bx(0., 0., 10., 10.), true)],
            preds: vec![pred(bx(0., 0., 6., 10.))],
        };
        let r = average_recall(&[img], &box_cfg()).unwrap();
        assert_eq!(r.ar_at[&100], Some(0.3));
        assert_eq!(r.ar_50, Some(1.0));
        assert_eq!(r.ar_75, Some(0.0));
        assert_eq!(r.ar_small, Some(0.3));
        assert_eq!(r.ar_medium, None);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = vec![gt(bx(0., 0., 10., 10.), true), gt(bx(20., 20., 40., 30.), true)];
        let perfect = EvalImage {
            image_id: 1,
            gts: gts.clone(),
            preds: gts.iter().map(|g| pred(g.bbox)).collect(),
        };
        let r = average_recall(&[perfect], &box_cfg()).unwrap();
        assert_eq!(r.ar_at[&10], Some(1.0));
        assert_eq!(r.ar_at[&100], Some(1.0));

        let none = EvalImage {
            image_id: 1,
            gts,
            preds: vec![],
        };
        let r = average_recall(&[none], &box_cfg()).unwrap();
        assert_eq!(r.ar, Some(0.0));
    }

    #[test]
    fn no_ground_truth_is_flagged() {
        let img = EvalImage {
            image_id: 3,
            gts: vec![],
            preds: vec![pred(bx(0., 0., 1., 1.))],
        };
        let r = average_recall(&[img], &box_cfg()).unwrap();
        assert!(!r.valid);
        assert_eq!(r.ar, None);
        assert_eq!(r.per_image[0].recall, None);
    }

    #[test]
    fn cross_category_budget_exclusion() {
        let base = bx(0., 0., 10., 10.);
        let novel = bx(30., 30., 40., 40.);
        let gts = vec![gt(base, true), gt(novel, false)];
        let cfg = EvalConfig {
            budgets: vec![1],
            protocol: Protocol::CrossCategory,
            ..box_cfg()
        };
        for preds in [vec![pred(base), pred(novel)], vec![pred(novel), pred(base)]] {
            let img = EvalImage {
                image_id: 1,
                gts: gts.clone(),
                preds,
            };
            let r = average_recall(&[img], &cfg).unwrap();
            assert_eq!(r.ar_at[&1], Some(1.0));
        }
    }

    #[test]
    fn filter_identity_without_base() {
        let p = vec![pred(bx(0., 0., 5., 5.)), pred(bx(1., 1., 6., 6.))];
        assert_eq!(cross_category_filter(&p, &[], 0.5, EvalMode::Box).unwrap(), p);
        let g = gt(bx(0., 0., 5., 5.), true);
        let g2 = gt(bx(1., 1., 6., 6.), true);
        assert!(cross_category_filter(&p, &[&g, &g2], 0.5, EvalMode::Box)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = EvalConfig::default();
        assert!(c.validate().is_ok());
        c.iou_thresholds = vec![0.5, 0.5];
        assert!(c.validate().is_err());
        c.iou_thresholds = vec![0.0, 0.5];
        assert!(c.validate().is_err());
        let c = EvalConfig {
            budgets: vec![],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = coco_iou_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[2], 0.6);
        assert_eq!(t[5], 0.75);
    }

    #[test]
    fn rank_by_score_is_stable() {
        let mut p = vec![
            EvalPrediction { score: None, ..pred(bx(0., 0., 1., 1.)) },
            EvalPrediction { score: Some(0.2), ..pred(bx(0., 0., 2., 2.)) },
            EvalPrediction { score: Some(0.9), ..pred(bx(0., 0., 3., 3.)) },
            EvalPrediction { score: None, ..pred(bx(0., 0., 4., 4.)) },
        ];
        rank_by_score(&mut p);
        let widths: Vec<f64> = p.iter().map(|p| p.bbox.x2).collect();
        assert_eq!(widths, vec![3., 2., 1., 4.]);
    }
}
