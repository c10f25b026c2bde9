//! One-to-one assignment between decoder queries and ground-truth instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generalized_iou, BoxCcwh};
use crate::losses::{FocalParams, ObjectnessVariant, PROB_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchCostConfig {
    pub w_score: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub use_score_cost: bool,
}

impl Default for MatchCostConfig {
    fn default() -> Self {
        MatchCostConfig {
            w_score: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
            use_score_cost: false,
        }
    }
}

impl MatchCostConfig {
    pub fn validate(&self, variant: ObjectnessVariant) -> Result<()> {
        if self.use_score_cost && variant == ObjectnessVariant::Void {
            return Err(Error::InvalidConfig(
                "use_score_cost requires an objectness head; the void variant has none".into(),
            ));
        }
        for (name, v) in [("w_score", self.w_score), ("w_l1", self.w_l1), ("w_giou", self.w_giou)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Dense row-major cost matrix: rows are queries, columns ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost matrix entry {v}")));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidConfig("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// `(query_index, gt_index)` sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchAssignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.get(q, g)).sum()
    }

    /// Ground-truth index matched to each query.
    pub fn gt_for_query(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

/// Focal-style score cost: cheap for confident queries, expensive for unconfident ones.
fn score_cost(p: f64, focal: FocalParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = focal.alpha * (1.0 - p).powf(focal.gamma) * -p.ln();
    let neg = (1.0 - focal.alpha) * p.powf(focal.gamma) * -(1.0 - p).ln();
    pos - neg
}

pub fn build_cost_matrix(
    pred_boxes: &[BoxCcwh],
    pred_scores: Option<&[f64]>,
    gt_boxes: &[BoxCcwh],
    cfg: &MatchCostConfig,
) -> Result<CostMatrix> {
    if pred_boxes.is_empty() {
        return Err(Error::InvalidConfig("at least one query is required".into()));
    }
    for b in pred_boxes {
        if !b.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("predicted box {b:?}")));
        }
    }
    let scores = match (cfg.use_score_cost, pred_scores) {
        (false, _) => None,
        (true, Some(s)) if s.len() == pred_boxes.len() => {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("predicted score".into()));
            }
            Some(s)
        }
        (true, _) => {
            return Err(Error::InvalidConfig(
                "score cost enabled but scores are missing or mis-sized".into(),
            ))
        }
    };
    let focal = FocalParams::default();
    let mut data = Vec::with_capacity(pred_boxes.len() * gt_boxes.len());
    for (i, p) in pred_boxes.iter().enumerate() {
        let sc = scores.map_or(0.0, |s| cfg.w_score * score_cost(s[i], focal));
        let pc = p.corners();
        let pa = p.to_array();
        for g in gt_boxes {
            let ga = g.to_array();
            let l1: f64 = pa.iter().zip(&ga).map(|(a, b)| (a - b).abs()).sum();
            let giou = generalized_iou(&pc, &g.corners());
            data.push(sc + cfg.w_l1 * l1 + cfg.w_giou * (1.0 - giou));
        }
    }
    CostMatrix::new(pred_boxes.len(), gt_boxes.len(), data)
}

/// Minimum-cost injective assignment of `min(N, M)` pairs.
///
/// Shortest augmenting path with potentials, O(n^2 m). Columns are scanned
/// in ascending index order and only strict improvements replace the
/// incumbent, so equal-cost alternatives resolve toward lower indices and the
/// result is a pure function of the matrix.
pub fn hungarian_assign(cost: &CostMatrix) -> MatchAssignment {
    let (n, m) = (cost.rows(), cost.cols());
    let mut pairs = if n == 0 || m == 0 {
        Vec::new()
    } else if n <= m {
        solve_rows_le_cols(n, m, |r, c| cost.get(r, c))
    } else {
        solve_rows_le_cols(m, n, |r, c| cost.get(c, r))
            .into_iter()
            .map(|(g, q)| (q, g))
            .collect()
    };
    pairs.sort_unstable();
    let mut matched = vec![false; n];
    for &(q, _) in &pairs {
        matched[q] = true;
    }
    let unmatched_queries = (0..n).filter(|&q| !matched[q]).collect();
    MatchAssignment {
        pairs,
        unmatched_queries,
    }
}

/// Classic potentials formulation; requires `n <= m`. Returns `(row, col)` pairs.
fn solve_rows_le_cols(n: usize, m: usize, c: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; 0 = free.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect()
}
