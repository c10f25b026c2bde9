//! Independent reference implementations. Shared by the core integration
//! tests and the acceptance harness in the cli crate; every check returns
//! `Ok(summary)` or `Err(first failure)`.
#![allow(dead_code)]

use owseg_core::evaluation::{
    average_recall, ArReport, EvalConfig, EvalGroundTruth, EvalImage, EvalMode, EvalPrediction, Protocol,
};
use owseg_core::geometry::{
    box_iou, generalized_iou, mask_iou, rle_decode, rle_encode, BinaryMask, BoxCcwh, BoxXyxy,
};
use owseg_core::losses::{box_loss, dice_loss_grad, focal_loss_grad, giou_with_grad, FocalParams, LossWeights};
use owseg_core::matching::{hungarian_assign, CostMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

fn random_ccwh(r: &mut ChaCha8Rng) -> BoxCcwh {
    BoxCcwh {
        cx: r.random_range(0.2..0.8),
        cy: r.random_range(0.2..0.8),
        w: r.random_range(0.05..0.6),
        h: r.random_range(0.05..0.6),
    }
}

fn perturb(b: &BoxCcwh, i: usize, d: f64) -> BoxCcwh {
    let mut a = b.to_array();
    a[i] += d;
    BoxCcwh::from_array(a)
}

/// Every pair of edges (along both axes) differs by more than `margin`, so
/// min/max kinks stay outside the finite-difference stencil.
fn edges_apart(p: &BoxCcwh, g: &BoxCcwh, margin: f64) -> bool {
    let (a, b) = (p.corners(), g.corners());
    let xs = [a.x1, a.x2, b.x1, b.x2];
    let ys = [a.y1, a.y2, b.y1, b.y2];
    let apart = |v: [f64; 4]| (0..4).all(|i| (i + 1..4).all(|j| (v[i] - v[j]).abs() > margin));
    apart(xs) && apart(ys)
}

fn draw_until<T>(r: &mut ChaCha8Rng, mut draw: impl FnMut(&mut ChaCha8Rng) -> Option<T>) -> T {
    loop {
        if let Some(v) = draw(r) {
            return v;
        }
    }
}

/// Worst relative error of each analytic gradient over `points` seeded inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub focal: f64,
    pub dice: f64,
    pub l1: f64,
    pub giou: f64,
}

pub fn gradient_report(points: usize, seed: u64) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::default();
    for _ in 0..points {
        let focal = FocalParams {
            alpha: r.random_range(0.1..0.9),
            gamma: [0.0, 1.0, 1.5, 2.0, 3.0][r.random_range(0..5)],
        };
        let p = r.random_range(0.01..0.99);
        let t = r.random_bool(0.5);
        let (_, g) = focal_loss_grad(p, t, focal).unwrap();
        let n = central_diff(|x| focal_loss_grad(x, t, focal).unwrap().0, p);
        rep.focal = rep.focal.max(rel_err(g, n));

        let len = r.random_range(4..64);
        let pred: Vec<f64> = (0..len).map(|_| r.random_range(0.01..0.99)).collect();
        let target: Vec<bool> = (0..len).map(|_| r.random_bool(0.4)).collect();
        let smooth = [1e-4, 1.0][r.random_range(0..2)];
        let (_, grad) = dice_loss_grad(&pred, &target, smooth).unwrap();
        for i in 0..len {
            let n = central_diff(
                |x| {
                    let mut q = pred.clone();
                    q[i] = x;
                    dice_loss_grad(&q, &target, smooth).unwrap().0
                },
                pred[i],
            );
            rep.dice = rep.dice.max(rel_err(grad[i], n));
        }

        let l1_weights = LossWeights {
            lambda_giou: 0.0,
            ..LossWeights::default()
        };
        let (pb, gb) = draw_until(&mut r, |r| {
            let (p, g) = (random_ccwh(r), random_ccwh(r));
            let ok = p.to_array().iter().zip(g.to_array()).all(|(a, b)| (a - b).abs() > 1e-3);
            ok.then_some((p, g))
        });
        let analytic = box_loss(&pb, &gb, &l1_weights).grad;
        for i in 0..4 {
            let n = central_diff(|d| box_loss(&perturb(&pb, i, d), &gb, &l1_weights).l1, 0.0);
            rep.l1 = rep.l1.max(rel_err(analytic[i], n));
        }

        let (pb, gb) = draw_until(&mut r, |r| {
            let (p, g) = (random_ccwh(r), random_ccwh(r));
            edges_apart(&p, &g, 1e-3).then_some((p, g))
        });
        let (_, dg) = giou_with_grad(&pb, &gb);
        for i in 0..4 {
            let n = central_diff(|d| 1.0 - giou_with_grad(&perturb(&pb, i, d), &gb).0, 0.0);
            rep.giou = rep.giou.max(rel_err(-dg[i], n));
        }
    }
    rep
}

pub fn check_gradients(points: usize, seed: u64) -> Check {
    let rep = gradient_report(points, seed);
    let worst = rep.focal.max(rep.dice).max(rep.l1).max(rep.giou);
    let summary = format!(
        "{points} points; max rel err focal {:.1e} dice {:.1e} l1 {:.1e} giou {:.1e}",
        rep.focal, rep.dice, rep.l1, rep.giou
    );
    if worst < GRAD_TOLERANCE {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- geometry

/// Box coordinates live on a grid of `1 / GRID` so that areas can be counted
/// exactly cell by cell.
pub const GRID: i64 = 8;
pub const GRID_CELLS: i64 = 64;

#[derive(Debug, Clone, Copy)]
pub struct GridBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl GridBox {
    pub fn random(r: &mut ChaCha8Rng) -> Self {
        let span = |r: &mut ChaCha8Rng| {
            let a = r.random_range(0..=GRID_CELLS);
            // About one box in ten is degenerate along this axis.
            let len = if r.random_bool(0.1) { 0 } else { r.random_range(1..=GRID_CELLS) };
            (a, (a + len).min(GRID_CELLS))
        };
        let (x1, x2) = span(r);
        let (y1, y2) = span(r);
        GridBox { x1, y1, x2, y2 }
    }

    pub fn to_box(self) -> BoxXyxy {
        let s = |v: i64| v as f64 / GRID as f64;
        BoxXyxy::new(s(self.x1), s(self.y1), s(self.x2), s(self.y2)).unwrap()
    }

    fn covers(&self, cx: i64, cy: i64) -> bool {
        (self.x1..self.x2).contains(&cx) && (self.y1..self.y2).contains(&cy)
    }
}

/// Intersection, union and enclosing-box areas by counting grid cells.
pub fn brute_areas(a: GridBox, b: GridBox) -> (f64, f64, f64) {
    let (mut inter, mut union) = (0i64, 0i64);
    for cy in 0..GRID_CELLS {
        for cx in 0..GRID_CELLS {
            let (ia, ib) = (a.covers(cx, cy), b.covers(cx, cy));
            inter += (ia && ib) as i64;
            union += (ia || ib) as i64;
        }
    }
    let hw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let hh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let cell = (GRID * GRID) as f64;
    (inter as f64 / cell, union as f64 / cell, (hw * hh) as f64 / cell)
}

pub fn brute_iou(a: GridBox, b: GridBox) -> f64 {
    let (i, u, _) = brute_areas(a, b);
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

pub fn brute_giou(a: GridBox, b: GridBox) -> f64 {
    let (i, u, h) = brute_areas(a, b);
    if h <= 0.0 {
        return 0.0;
    }
    let iou = if u > 0.0 { i / u } else { 0.0 };
    iou - (h - u) / h
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    match r.random_range(0..4) {
        0 => BinaryMask::new(h, w),
        1 => {
            let d = r.random_range(0.0..1.0);
            BinaryMask::from_fn(h, w, |_, _| r.random_bool(d))
        }
        _ => {
            let rects: Vec<[usize; 4]> = (0..r.random_range(1..4))
                .map(|_| {
                    let (y, x) = (r.random_range(0..h), r.random_range(0..w));
                    [y, x, r.random_range(y..=h), r.random_range(x..=w)]
                })
                .collect();
            BinaryMask::from_fn(h, w, |y, x| rects.iter().any(|q| (q[0]..q[2]).contains(&y) && (q[1]..q[3]).contains(&x)))
        }
    }
}

/// Per-pixel IoU; two empty masks count as identical.
pub fn brute_mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut i, mut u) = (0u64, 0u64);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            i += (p && q) as u64;
            u += (p || q) as u64;
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Column-major runs starting with a (possibly empty) run of zeros.
pub fn brute_rle_counts(m: &BinaryMask) -> Vec<u32> {
    let flat: Vec<bool> = (0..m.width()).flat_map(|x| (0..m.height()).map(move |y| (y, x))).map(|(y, x)| m.get(y, x)).collect();
    let mut counts = vec![0u32];
    let mut current = false;
    for v in flat {
        if v != current {
            counts.push(0);
            current = v;
        }
        *counts.last_mut().unwrap() += 1;
    }
    counts
}

fn check_rle(m: &BinaryMask) -> std::result::Result<(), String> {
    let rle = rle_encode(m);
    let expected = brute_rle_counts(m);
    if rle.counts != expected {
        return Err(format!("rle counts {:?} != {:?}", rle.counts, expected));
    }
    if rle_decode(&rle).map_err(|e| e.to_string())? != *m {
        return Err("rle round trip changed the mask".into());
    }
    Ok(())
}

pub fn check_geometry(cases: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (a, b) = (GridBox::random(&mut r), GridBox::random(&mut r));
        let (ba, bb) = (a.to_box(), b.to_box());
        let errs = [
            (box_iou(&ba, &bb) - brute_iou(a, b)).abs(),
            (generalized_iou(&ba, &bb) - brute_giou(a, b)).abs(),
        ];
        worst = worst.max(errs[0]).max(errs[1]);
        if errs.iter().any(|&e| e > 1e-9) {
            return Err(format!("boxes {a:?} {b:?}: iou/giou errors {errs:?}"));
        }
    }
    for _ in 0..cases {
        let (h, w) = (r.random_range(1..40), r.random_range(1..40));
        let (ma, mb) = (random_mask(&mut r, h, w), random_mask(&mut r, h, w));
        let e = (mask_iou(&ma, &mb).unwrap() - brute_mask_iou(&ma, &mb)).abs();
        worst = worst.max(e);
        if e > 1e-9 {
            return Err(format!("{h}x{w} mask iou error {e}"));
        }
    }
    for bits in 0u32..1 << 16 {
        let m = BinaryMask::from_fn(4, 4, |y, x| bits >> (y * 4 + x) & 1 == 1);
        check_rle(&m).map_err(|e| format!("4x4 mask {bits:#06x}: {e}"))?;
    }
    for i in 0..cases / 5 {
        let (h, w) = if i % 2 == 0 { (64, 64) } else { (r.random_range(1..80), r.random_range(1..80)) };
        let m = random_mask(&mut r, h, w);
        check_rle(&m).map_err(|e| format!("{h}x{w} mask: {e}"))?;
    }
    Ok(format!(
        "{cases} box pairs, {cases} mask pairs, 65536 4x4 and {} larger RLE masks; max err {worst:.1e}",
        cases / 5
    ))
}

// ---------------------------------------------------------------- matching

/// Minimum cost over every injective assignment of the smaller side.
pub fn brute_min_cost(c: &CostMatrix) -> f64 {
    let (n, m) = (c.rows(), c.cols());
    let transpose = n < m;
    let (small, large) = if transpose { (n, m) } else { (m, n) };
    let cost = |s: usize, l: usize| if transpose { c.get(s, l) } else { c.get(l, s) };
    fn go(s: usize, small: usize, large: usize, used: &mut Vec<bool>, acc: f64, cost: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        if s == small {
            *best = best.min(acc);
            return;
        }
        for l in 0..large {
            if !used[l] {
                used[l] = true;
                go(s + 1, small, large, used, acc + cost(s, l), cost, best);
                used[l] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, small, large, &mut vec![false; large], 0.0, &cost, &mut best);
    if small == 0 {
        0.0
    } else {
        best
    }
}

pub fn random_cost(r: &mut ChaCha8Rng, n: usize, m: usize, integer: bool) -> CostMatrix {
    let data = (0..n * m)
        .map(|_| if integer { r.random_range(0..4) as f64 } else { r.random_range(-2.0..5.0) })
        .collect();
    CostMatrix::new(n, m, data).unwrap()
}

fn check_assignment(c: &CostMatrix) -> std::result::Result<(), String> {
    let a = hungarian_assign(c);
    let (n, m) = (c.rows(), c.cols());
    if a.pairs.len() != n.min(m) {
        return Err(format!("{n}x{m}: {} pairs", a.pairs.len()));
    }
    let mut q_used = vec![false; n];
    let mut g_used = vec![false; m];
    for &(q, g) in &a.pairs {
        if q_used[q] || g_used[g] {
            return Err(format!("{n}x{m}: index used twice in {:?}", a.pairs));
        }
        q_used[q] = true;
        g_used[g] = true;
    }
    let unmatched: Vec<usize> = (0..n).filter(|&q| !q_used[q]).collect();
    if a.unmatched_queries != unmatched {
        return Err(format!("{n}x{m}: unmatched {:?} != {:?}", a.unmatched_queries, unmatched));
    }
    let (got, best) = (a.total_cost(c), brute_min_cost(c));
    if (got - best).abs() > 1e-9 {
        return Err(format!("{n}x{m}: cost {got} but optimum is {best}"));
    }
    if hungarian_assign(c) != a {
        return Err(format!("{n}x{m}: two runs disagree"));
    }
    Ok(())
}

pub fn check_matching(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for i in 0..instances {
        let (n, m) = (r.random_range(1..=6), r.random_range(0..=6));
        let c = random_cost(&mut r, n, m, i % 2 == 0);
        check_assignment(&c)?;
    }
    // Small integer costs make ties common.
    for _ in 0..instances {
        let c = random_cost(&mut r, 5, 4, true);
        check_assignment(&c)?;
    }
    Ok(format!("{instances} random instances up to 6x6 and {instances} tie-heavy 5x4 matrices optimal"))
}

// ---------------------------------------------------------------- evaluation

fn brute_box_iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn brute_pair_iou(mode: EvalMode, p: &EvalPrediction, g: &EvalGroundTruth) -> f64 {
    match mode {
        EvalMode::Box => brute_box_iou(&p.bbox, &g.bbox),
        EvalMode::Mask => brute_mask_iou(p.mask.as_ref().unwrap(), g.mask.as_ref().unwrap()),
    }
}

/// Number of `targets` matched when the first `k` predictions greedily claim
/// their best remaining target.
fn brute_matched(mode: EvalMode, preds: &[EvalPrediction], targets: &[&EvalGroundTruth], k: usize, thr: f64) -> u64 {
    let mut taken = vec![false; targets.len()];
    for p in preds.iter().take(k) {
        let mut best: Option<usize> = None;
        let mut best_iou = f64::NEG_INFINITY;
        for (gi, g) in targets.iter().enumerate() {
            let iou = brute_pair_iou(mode, p, g);
            if !taken[gi] && iou >= thr && iou > best_iou {
                best = Some(gi);
                best_iou = iou;
            }
        }
        if let Some(gi) = best {
            taken[gi] = true;
        }
    }
    taken.iter().filter(|&&t| t).count() as u64
}

fn size_class(area: f64) -> usize {
    if area < 1024.0 {
        0
    } else if area < 9216.0 {
        1
    } else {
        2
    }
}

/// Straight-line recomputation of the summary numbers of an [`ArReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct BruteReport {
    pub num_gt: usize,
    pub ar_at: Vec<(usize, Option<f64>)>,
    pub ar_50: Option<f64>,
    pub ar_75: Option<f64>,
    /// Small, medium, large.
    pub by_size: [Option<f64>; 3],
}

pub fn brute_average_recall(images: &[EvalImage], cfg: &EvalConfig) -> BruteReport {
    let max_k = *cfg.budgets.iter().max().unwrap();
    let mut per_image = Vec::new();
    for img in images {
        let (targets, preds): (Vec<&EvalGroundTruth>, Vec<EvalPrediction>) = match cfg.protocol {
            Protocol::Plain => (img.gts.iter().collect(), img.preds.clone()),
            Protocol::CrossCategory => {
                let kept = img
                    .preds
                    .iter()
                    .filter(|p| img.gts.iter().filter(|g| g.is_base).all(|g| brute_pair_iou(cfg.mode, p, g) < cfg.exclusion_iou))
                    .cloned()
                    .collect();
                (img.gts.iter().filter(|g| !g.is_base).collect(), kept)
            }
        };
        per_image.push((targets, preds));
    }
    let num_gt: usize = per_image.iter().map(|(t, _)| t.len()).sum();
    let recall = |k: usize, thr: f64, class: Option<usize>| -> Option<f64> {
        let (mut hit, mut total) = (0u64, 0u64);
        for (targets, preds) in &per_image {
            let t: Vec<&EvalGroundTruth> = targets.iter().copied().filter(|g| class.is_none_or(|c| size_class(g.area) == c)).collect();
            hit += brute_matched(cfg.mode, preds, &t, k, thr);
            total += t.len() as u64;
        }
        (total > 0).then(|| hit as f64 / total as f64)
    };
    let mean = |k: usize, class: Option<usize>| -> Option<f64> {
        let rs: Option<Vec<f64>> = cfg.iou_thresholds.iter().map(|&t| recall(k, t, class)).collect();
        rs.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    BruteReport {
        num_gt,
        ar_at: cfg.budgets.iter().map(|&k| (k, mean(k, None))).collect(),
        ar_50: recall(max_k, 0.5, None),
        ar_75: recall(max_k, 0.75, None),
        by_size: [mean(max_k, Some(0)), mean(max_k, Some(1)), mean(max_k, Some(2))],
    }
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    }
}

pub fn compare_reports(got: &ArReport, want: &BruteReport) -> std::result::Result<(), String> {
    let mut ok = got.num_gt == want.num_gt;
    for &(k, v) in &want.ar_at {
        ok &= close(got.ar_at.get(&k).copied().flatten(), v);
    }
    ok &= close(got.ar_50, want.ar_50) && close(got.ar_75, want.ar_75);
    ok &= close(got.ar_small, want.by_size[0]) && close(got.ar_medium, want.by_size[1]) && close(got.ar_large, want.by_size[2]);
    if ok {
        Ok(())
    } else {
        Err(format!("evaluator {:?} {:?} {:?} {:?}/{:?}/{:?} vs oracle {want:?}", got.ar_at, got.ar_50, got.ar_75, got.ar_small, got.ar_medium, got.ar_large))
    }
}

pub const SCENE_SIZE: usize = 128;

fn rect_mask(b: &BoxXyxy) -> BinaryMask {
    BinaryMask::from_fn(SCENE_SIZE, SCENE_SIZE, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        fx > b.x1 && fx < b.x2 && fy > b.y1 && fy < b.y2
    })
}

fn random_scene_box(r: &mut ChaCha8Rng) -> BoxXyxy {
    // Side lengths span all three size buckets.
    let w = r.random_range(4..=120) as f64;
    let h = r.random_range(4..=120) as f64;
    let x = r.random_range(0.0..=SCENE_SIZE as f64 - w).round();
    let y = r.random_range(0.0..=SCENE_SIZE as f64 - h).round();
    BoxXyxy::new(x, y, x + w, y + h).unwrap()
}

/// Up to five ground truths and ten ranked predictions, many of them jittered
/// copies of a ground truth so that IoUs spread over the threshold range.
pub fn random_scene(r: &mut ChaCha8Rng, image_id: u64) -> EvalImage {
    let gts: Vec<EvalGroundTruth> = (0..r.random_range(0..=5))
        .map(|_| {
            let bbox = random_scene_box(r);
            let mask = if r.random_bool(0.5) {
                rect_mask(&bbox)
            } else {
                let (cx, cy) = ((bbox.x1 + bbox.x2) / 2.0, (bbox.y1 + bbox.y2) / 2.0);
                let (rx, ry) = (bbox.width() / 2.0, bbox.height() / 2.0);
                BinaryMask::from_fn(SCENE_SIZE, SCENE_SIZE, |y, x| {
                    let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    dx * dx + dy * dy <= 1.0
                })
            };
            EvalGroundTruth {
                bbox,
                area: mask.area() as f64,
                mask: Some(mask),
                is_base: r.random_bool(0.5),
            }
        })
        .collect();
    let mut preds: Vec<EvalPrediction> = (0..r.random_range(0..=10))
        .map(|_| {
            let bbox = if !gts.is_empty() && r.random_bool(0.7) {
                let g = &gts[r.random_range(0..gts.len())].bbox;
                let mut j = |v: f64| (v + r.random_range(-6i32..=6) as f64).clamp(0.0, SCENE_SIZE as f64);
                let (x1, y1, x2, y2) = (j(g.x1), j(g.y1), j(g.x2), j(g.y2));
                BoxXyxy::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2)).unwrap()
            } else {
                random_scene_box(r)
            };
            EvalPrediction {
                mask: Some(rect_mask(&bbox)),
                bbox,
                score: Some(r.random_range(0.0..1.0)),
            }
        })
        .collect();
    preds.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()));
    EvalImage { image_id, gts, preds }
}

pub fn check_evaluator(scenes: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let images: Vec<EvalImage> = (0..scenes as u64).map(|i| random_scene(&mut r, i)).collect();
    let mut compared = 0;
    for mode in [EvalMode::Box, EvalMode::Mask] {
        for protocol in [Protocol::Plain, Protocol::CrossCategory] {
            let cfg = EvalConfig {
                budgets: vec![1, 3, 10],
                mode,
                protocol,
                ..EvalConfig::default()
            };
            for img in &images {
                let one = std::slice::from_ref(img);
                let got = average_recall(one, &cfg).map_err(|e| e.to_string())?;
                compare_reports(&got, &brute_average_recall(one, &cfg)).map_err(|e| format!("image {} {mode} {protocol}: {e}", img.image_id))?;
                compared += 1;
            }
            let got = average_recall(&images, &cfg).map_err(|e| e.to_string())?;
            compare_reports(&got, &brute_average_recall(&images, &cfg)).map_err(|e| format!("pooled {mode} {protocol}: {e}"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} reports over {scenes} scenes match the oracle to 1e-9"))
}

/// One ground truth and one prediction at IoU exactly 0.6: matched at
/// thresholds 0.50, 0.55 and 0.60 only.
pub fn check_iou_06_scene() -> Check {
    let g = BoxXyxy::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let p = BoxXyxy::new(0.0, 0.0, 6.0, 10.0).unwrap();
    let img = EvalImage {
        image_id: 0,
        gts: vec![EvalGroundTruth { bbox: g, mask: None, area: 100.0, is_base: false }],
        preds: vec![EvalPrediction { bbox: p, mask: None, score: Some(0.9) }],
    };
    let cfg = EvalConfig { mode: EvalMode::Box, budgets: vec![100], ..EvalConfig::default() };
    let ar = average_recall(&[img], &cfg).map_err(|e| e.to_string())?.ar_at[&100];
    if ar.is_some_and(|v| (v - 0.3).abs() < 1e-12) {
        Ok(format!("AR@100 = {:.3}", ar.unwrap()))
    } else {
        Err(format!("AR@100 = {ar:?}, expected 0.3"))
    }
}

// ---------------------------------------------------------------- cross-category

/// A base object and a novel object, each covered exactly by one
/// prediction, under both rank orders with a budget of one.
/// Returns `(base_first, filtered AR@1, unfiltered AR@1)` per order and mode.
pub fn cross_category_cases() -> Vec<(EvalMode, bool, Option<f64>, Option<f64>)> {
    let base = BoxXyxy::new(0.0, 0.0, 20.0, 20.0).unwrap();
    let novel = BoxXyxy::new(30.0, 30.0, 50.0, 50.0).unwrap();
    let gt = |b: &BoxXyxy, is_base| {
        let m = rect_mask(b);
        EvalGroundTruth { bbox: *b, area: m.area() as f64, mask: Some(m), is_base }
    };
    let pred = |b: &BoxXyxy, s| EvalPrediction { bbox: *b, mask: Some(rect_mask(b)), score: Some(s) };
    let mut out = Vec::new();
    for mode in [EvalMode::Box, EvalMode::Mask] {
        for base_first in [true, false] {
            let preds = if base_first {
                vec![pred(&base, 0.9), pred(&novel, 0.8)]
            } else {
                vec![pred(&novel, 0.9), pred(&base, 0.8)]
            };
            let with_filter = EvalImage { image_id: 0, gts: vec![gt(&base, true), gt(&novel, false)], preds: preds.clone() };
            // Without the filter: only the novel object is a target and nothing is excluded.
            let without = EvalImage { image_id: 0, gts: vec![gt(&novel, false)], preds };
            let cfg = |protocol| EvalConfig { mode, protocol, budgets: vec![1], ..EvalConfig::default() };
            let f = average_recall(&[with_filter], &cfg(Protocol::CrossCategory)).unwrap().ar_at[&1];
            let u = average_recall(&[without], &cfg(Protocol::Plain)).unwrap().ar_at[&1];
            out.push((mode, base_first, f, u));
        }
    }
    out
}

pub fn check_cross_category() -> Check {
    let mut lines = Vec::new();
    for (mode, base_first, f, u) in cross_category_cases() {
        let want_u = if base_first { 0.0 } else { 1.0 };
        lines.push(format!("{mode} base_first={base_first}: filtered {f:?} unfiltered {u:?}"));
        if f != Some(1.0) || u != Some(want_u) {
            return Err(lines.join("; "));
        }
    }
    Ok(lines.join("; "))
}
