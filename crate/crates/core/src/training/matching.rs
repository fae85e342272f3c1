//! Set-to-set label assignment.

use crate::decoder::Detection;
use crate::error::{Error, Result};

/// Ground-truth action in window-normalized time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

/// Weights of the classification, IoU and L1 matching costs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            cls: 6.0,
            iou: 2.0,
            l1: 5.0,
        }
    }
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Temporal intersection over union of two `(start, end)` intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if s > e || !s.is_finite() || !e.is_finite() {
            return Err(Error::Data(format!("invalid interval ({s}, {e})")));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok(inter / union)
}

/// Focal-style classification cost: positive term minus negative term at the
/// target class probability.
pub fn class_cost(p: f64) -> f64 {
    const EPS: f64 = 1e-8;
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -(p + EPS).ln();
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p + EPS).ln();
    pos - neg
}

/// Weighted cost of assigning each prediction (row) to each target (column).
pub fn cost_matrix(preds: &[Detection], targets: &[Target], w: CostWeights) -> Result<Vec<Vec<f64>>> {
    preds
        .iter()
        .map(|p| {
            targets
                .iter()
                .map(|t| {
                    let prob = *p
                        .scores
                        .get(t.class)
                        .ok_or_else(|| Error::Data(format!("class {} outside score vector", t.class)))?;
                    let iou = tiou((p.start, p.end), (t.start, t.end))?;
                    let l1 = (p.start - t.start).abs() + (p.end - t.end).abs();
                    Ok(w.cls * class_cost(prob) + w.iou * (1.0 - iou) + w.l1 * l1)
                })
                .collect()
        })
        .collect()
}

/// Optimal assignment of targets to predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per prediction: the matched target, or `None` for "no action".
    pub assignment: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn num_matched(&self) -> usize {
        self.assignment.iter().flatten().count()
    }
}

/// Minimum-cost injective assignment of the `M` columns to the `N ≥ M` rows.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Matching("ragged cost matrix".into()));
    }
    if m > n {
        return Err(Error::Matching(format!(
            "{m} ground truths cannot be matched to {n} predictions"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Matching("non-finite matching cost".into()));
    }
    let mut assignment = vec![None; n];
    if m == 0 {
        return Ok(MatchResult {
            assignment,
            total_cost: 0.0,
        });
    }
    // Shortest augmenting paths with potentials. Targets are the rows of the
    // transposed problem (1-based, index 0 is a sentinel).
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total_cost = 0.0;
    for j in 1..=n {
        if owner[j] != 0 {
            assignment[j - 1] = Some(owner[j] - 1);
            total_cost += cost[j - 1][owner[j] - 1];
        }
    }
    Ok(MatchResult { assignment, total_cost })
}

/// Targets for each aligned query level, all derived from one assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedTargets {
    pub instance: Vec<Option<usize>>,
    pub boundary: Vec<Option<usize>>,
}

pub fn share_targets(m: &MatchResult) -> SharedTargets {
    SharedTargets {
        instance: m.assignment.clone(),
        boundary: m.assignment.clone(),
    }
}
