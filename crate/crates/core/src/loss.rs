//! Set-prediction, video-level and combined training objectives.

use crate::dcssm::Anchor;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::matching::{cost_matrix, hungarian, MatchWeights};
use crate::nn::Cx;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

fn column(t: Vec<f64>) -> Tensor {
    let n = t.len();
    Tensor::from_vec([n, 1], t)
}

/// Summed sigmoid focal loss of `logits: N×1` against 0/1 `targets`.
pub fn focal_loss(cx: &mut Cx, logits: Var, targets: &[f64], p: FocalParams) -> Result<Var> {
    let n = cx.g.value(logits).numel();
    if targets.len() != n {
        return Err(Error::Dimension(format!("{} targets for {n} logits", targets.len())));
    }
    let y = cx.constant(column(targets.to_vec()));
    let prob = cx.g.sigmoid(logits);
    // ce = softplus(z) − y·z
    let sp = cx.g.softplus(logits);
    let yz = cx.g.mul(y, logits)?;
    let ce = cx.g.sub(sp, yz)?;
    // 1 − p_t = y + p − 2·y·p
    let sign = cx.constant(column(targets.iter().map(|&t| 1.0 - 2.0 * t).collect()));
    let sp_term = cx.g.mul(sign, prob)?;
    let miss = cx.g.add(sp_term, y)?;
    let modulator = if p.gamma == 2.0 {
        cx.g.square(miss)
    } else {
        let m = cx.g.clamp_min(miss, 1e-12);
        let l = cx.g.ln(m);
        let l = cx.g.scale(l, p.gamma);
        cx.g.exp(l)
    };
    let alpha = cx.constant(column(targets.iter().map(|&t| t * p.alpha + (1.0 - t) * (1.0 - p.alpha)).collect()));
    let w = cx.g.mul(alpha, modulator)?;
    let l = cx.g.mul(w, ce)?;
    Ok(cx.g.sum(l))
}

/// Per-row `1 − GIoU` between `pred: K×2` (center, duration) and `gts`.
pub fn giou_loss(cx: &mut Cx, pred: Var, gts: &[Anchor]) -> Result<Var> {
    let k = cx.g.value(pred).rows();
    if gts.len() != k {
        return Err(Error::Dimension(format!("{} targets for {k} segments", gts.len())));
    }
    let t = cx.g.slice_cols(pred, 0, 1)?;
    let d = cx.g.slice_cols(pred, 1, 1)?;
    let half = cx.g.scale(d, 0.5);
    let s = cx.g.sub(t, half)?;
    let e = cx.g.add(t, half)?;
    let gs = cx.constant(column(gts.iter().map(|g| g.center - g.duration / 2.0).collect()));
    let ge = cx.constant(column(gts.iter().map(|g| g.center + g.duration / 2.0).collect()));
    let gd = cx.constant(column(gts.iter().map(|g| g.duration).collect()));
    let lo = cx.g.maximum(s, gs)?;
    let hi = cx.g.minimum(e, ge)?;
    let overlap = cx.g.sub(hi, lo)?;
    let inter = cx.g.relu(overlap);
    let total = cx.g.add(d, gd)?;
    let union = cx.g.sub(total, inter)?;
    let union = cx.g.clamp_min(union, 1e-12);
    let hull_hi = cx.g.maximum(e, ge)?;
    let hull_lo = cx.g.minimum(s, gs)?;
    let hull = cx.g.sub(hull_hi, hull_lo)?;
    let hull = cx.g.clamp_min(hull, 1e-12);
    let iou = cx.g.div(inter, union)?;
    let gap = cx.g.sub(hull, union)?;
    let penalty = cx.g.div(gap, hull)?;
    let giou = cx.g.sub(iou, penalty)?;
    let neg = cx.g.neg(giou);
    Ok(cx.g.shift(neg, 1.0))
}

/// Matched set loss of one decoder output and the assignment used
/// (`assignment[i]` is the query matched to target `i`).
pub struct SetLoss {
    pub value: Var,
    pub assignment: Vec<usize>,
}

/// Hungarian-matched focal + L1 + GIoU loss, normalized by the target count.
/// Unmatched queries are pushed toward background.
pub fn set_loss(
    cx: &mut Cx,
    logits: Var,
    anchors: Var,
    gts: &[Anchor],
    w: MatchWeights,
    focal: FocalParams,
) -> Result<SetLoss> {
    let nq = cx.g.value(logits).rows();
    let conf: Vec<f64> = cx.g.value(logits).data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
    let preds = anchors_of(cx.g.value(anchors));
    let (assignment, _) = hungarian(&cost_matrix(&conf, &preds, gts, w))?;
    let mut targets = vec![0.0; nq];
    for &j in &assignment {
        targets[j] = 1.0;
    }
    let norm = 1.0 / gts.len().max(1) as f64;
    let cls = focal_loss(cx, logits, &targets, focal)?;
    let mut value = cx.g.scale(cls, w.class * norm);
    if !gts.is_empty() {
        let matched = cx.g.gather_rows(anchors, assignment.clone())?;
        let target = cx.constant(Tensor::from_vec(
            [gts.len(), 2],
            gts.iter().flat_map(|g| [g.center, g.duration]).collect(),
        ));
        let diff = cx.g.sub(matched, target)?;
        let abs = cx.g.abs(diff);
        let l1 = cx.g.sum(abs);
        let l1 = cx.g.scale(l1, w.l1 * norm);
        let giou = giou_loss(cx, matched, gts)?;
        let giou = cx.g.sum(giou);
        let giou = cx.g.scale(giou, w.iou * norm);
        value = cx.g.add(value, l1)?;
        value = cx.g.add(value, giou)?;
    }
    Ok(SetLoss { value, assignment })
}

/// Binary cross-entropy of `σ(logit)` against the video label.
pub fn video_bce(cx: &mut Cx, logit: Var, label: bool) -> Var {
    let sp = cx.g.softplus(logit);
    if label {
        cx.g.sub(sp, logit).expect("scalar operands")
    } else {
        sp
    }
}

pub fn anchors_of(t: &Tensor) -> Vec<Anchor> {
    t.data().chunks(2).map(|c| Anchor { center: c[0], duration: c[1] }).collect()
}

/// Logged loss terms of one sample (or their batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub matching: f64,
    pub classification: f64,
    pub enhance: f64,
    pub cooperation: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn add_scaled(&mut self, o: &LossComponents, k: f64) {
        self.matching += k * o.matching;
        self.classification += k * o.classification;
        self.enhance += k * o.enhance;
        self.cooperation += k * o.cooperation;
        self.total += k * o.total;
    }
}

/// `L_match + L_cls + λ1·L_enh + λ2·L_coop`, rejecting non-finite terms.
pub fn total_loss(matching: f64, classification: f64, enhance: f64, cooperation: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    for (name, v) in [
        ("matching", matching),
        ("classification", classification),
        ("enhance", enhance),
        ("cooperation", cooperation),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(matching + classification + lambda1 * enhance + lambda2 * cooperation)
}

/// Graph form of [`total_loss`], evaluated in the same order so the value
/// matches it exactly.
pub fn combine(cx: &mut Cx, matching: Var, classification: Var, enhance: Var, cooperation: Var, lambda1: f64, lambda2: f64) -> Result<Var> {
    let a = cx.g.add(matching, classification)?;
    let e = cx.g.scale(enhance, lambda1);
    let b = cx.g.add(a, e)?;
    let k = cx.g.scale(cooperation, lambda2);
    cx.g.add(b, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn weighted_sum_example() {
        let v = total_loss(2.0, 0.5, -0.8, 0.1, 0.5, 0.2).unwrap();
        assert!((v - 2.12).abs() < 1e-12);
        assert_eq!(total_loss(1.0, 2.0, 5.0, 7.0, 0.0, 0.0).unwrap(), 3.0);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, 0.0, 1.0, 1.0), Err(Error::Numeric(m)) if m.contains("matching")));
    }

    #[test]
    fn perfect_components_give_minus_half() {
        let v = total_loss(0.0, 0.0, -1.0, 0.0, 0.5, 0.2).unwrap();
        assert_eq!(v, -0.5);
    }

    #[test]
    fn focal_matches_closed_form() {
        let store = ParamStore::new();
        let mut cx = Cx::eval(&store);
        let z = [0.3, -1.2];
        let y = [1.0, 0.0];
        let l = cx.constant(Tensor::from_vec([2, 1], z.to_vec()));
        let f = focal_loss(&mut cx, l, &y, FocalParams::default()).unwrap();
        let oracle: f64 = z
            .iter()
            .zip(y)
            .map(|(&z, y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                let pt = if y == 1.0 { p } else { 1.0 - p };
                let at = if y == 1.0 { 0.25 } else { 0.75 };
                -at * (1.0 - pt).powi(2) * pt.ln()
            })
            .sum();
        assert!((cx.g.item(f) - oracle).abs() < 1e-12);
    }

    #[test]
    fn giou_of_identical_is_zero_and_disjoint_is_positive() {
        let store = ParamStore::new();
        let mut cx = Cx::eval(&store);
        let p = cx.constant(Tensor::from_vec([2, 2], vec![0.5, 0.2, 0.1, 0.1]));
        let gt = [Anchor { center: 0.5, duration: 0.2 }, Anchor { center: 0.8, duration: 0.1 }];
        let l = giou_loss(&mut cx, p, &gt).unwrap();
        let v = cx.g.value(l).data();
        assert!(v[0].abs() < 1e-15);
        // disjoint: iou 0, hull 0.85 − 0.05 = 0.8, union 0.2 ⇒ 1 + 0.6/0.8
        assert!((v[1] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn no_targets_only_background() {
        let store = ParamStore::new();
        let mut cx = Cx::eval(&store);
        let l = cx.constant(Tensor::from_vec([3, 1], vec![-2.0, -3.0, -1.0]));
        let a = cx.constant(Tensor::from_vec([3, 2], vec![0.5; 6]));
        let s = set_loss(&mut cx, l, a, &[], MatchWeights::default(), FocalParams::default()).unwrap();
        assert!(s.assignment.is_empty());
        let mut cx2 = Cx::eval(&store);
        let l2 = cx2.constant(Tensor::from_vec([3, 1], vec![-2.0, -3.0, -1.0]));
        let f = focal_loss(&mut cx2, l2, &[0.0; 3], FocalParams::default()).unwrap();
        assert!((cx.g.item(s.value) - 2.0 * cx2.g.item(f)).abs() < 1e-15);
    }
}
