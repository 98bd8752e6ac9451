//! Minimum-cost bipartite assignment and the proposal/ground-truth cost.

use crate::dcssm::Anchor;
use crate::error::{Error, Result};

/// Optimal assignment of every row to a distinct column (`rows ≤ cols`),
/// by shortest augmenting paths with dual potentials. Returns the column of
/// each row and the total cost summed in row order.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::Contract(format!("{n} targets cannot be matched to {m} predictions")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }
    // 1-based: row 0 / column 0 are the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=m {
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
    let mut assign = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((assign, total))
}

/// Segment interval `[t − d/2, t + d/2]`.
pub fn bounds(a: Anchor) -> (f64, f64) {
    (a.center - a.duration / 2.0, a.center + a.duration / 2.0)
}

pub fn iou_1d(a: Anchor, b: Anchor) -> f64 {
    let (s1, e1) = bounds(a);
    let (s2, e2) = bounds(b);
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = (e1 - s1) + (e2 - s2) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Weights of the matching cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { class: 2.0, l1: 5.0, iou: 2.0 }
    }
}

/// `cost[i][j]` between ground truth `i` and prediction `j`.
pub fn cost_matrix(confidence: &[f64], preds: &[Anchor], gts: &[Anchor], w: MatchWeights) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| {
            preds
                .iter()
                .zip(confidence)
                .map(|(p, &c)| {
                    w.class * (1.0 - c)
                        + w.l1 * ((p.center - g.center).abs() + (p.duration - g.duration).abs())
                        + w.iou * (1.0 - iou_1d(*p, *g))
                })
                .collect()
        })
        .collect()
}
