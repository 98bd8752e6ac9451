//! Detection and classification metrics: AP over confidence-ranked
//! proposals, average recall under proposal budgets, and rank AUC.

use std::io::Write;

use num_rational::Ratio;
use num_traits::{CheckedAdd, ToPrimitive};

use crate::dcssm::Anchor;
use crate::error::{Error, Result};
use crate::matching::iou_1d;
use crate::model::Detection;

pub use crate::matching::iou_1d as iou;

pub const MAP_THRESHOLDS: [f64; 4] = [0.5, 0.75, 0.9, 0.95];
pub const AR_BUDGETS: [usize; 6] = [5, 10, 20, 30, 50, 100];

/// `0.50, 0.55, …, 0.95`.
pub fn ar_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Greedy matching of `order`ed predictions of one video: each takes the
/// best still-unmatched ground truth with IoU ≥ `thr`.
fn greedy_hits(preds: &[Detection], order: &[usize], gts: &[Anchor], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|&j| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let v = iou_1d(preds[j].anchor, *g);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            match best {
                Some((i, _)) => {
                    taken[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn by_confidence(preds: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    idx
}

/// Area under the all-point interpolated precision/recall curve of a ranked
/// hit list, exactly when it fits in 128-bit rationals.
pub fn average_precision_exact(hits: &[bool], n_gt: usize) -> Option<Ratio<i128>> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0i128;
    let prec: Vec<Ratio<i128>> = hits
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            tp += i128::from(h);
            Ratio::new(tp, k as i128 + 1)
        })
        .collect();
    let mut best = Ratio::from_integer(0);
    let mut interp = vec![Ratio::from_integer(0); prec.len()];
    for k in (0..prec.len()).rev() {
        if prec[k] > best {
            best = prec[k];
        }
        interp[k] = best;
    }
    let mut sum = Ratio::from_integer(0i128);
    for (k, &h) in hits.iter().enumerate() {
        if h {
            sum = sum.checked_add(&interp[k])?;
        }
    }
    Some(sum / Ratio::from_integer(n_gt as i128))
}

fn average_precision_f64(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0.0;
    let prec: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            tp += f64::from(u8::from(h));
            tp / (k + 1) as f64
        })
        .collect();
    let mut best = 0.0f64;
    let mut sum = 0.0;
    for k in (0..prec.len()).rev() {
        best = best.max(prec[k]);
        if hits[k] {
            sum += best;
        }
    }
    sum / n_gt as f64
}

pub fn average_precision(hits: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    Some(match average_precision_exact(hits, n_gt) {
        Some(r) => r.to_f64().unwrap_or_else(|| average_precision_f64(hits, n_gt)),
        None => average_precision_f64(hits, n_gt),
    })
}

fn check_lengths(preds: &[Vec<Detection>], gts: &[Vec<Anchor>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} prediction lists for {} videos",
            preds.len(),
            gts.len()
        )));
    }
    if preds.iter().flatten().any(|d| !d.confidence.is_finite()) {
        return Err(Error::Numeric("non-finite prediction confidence".into()));
    }
    Ok(())
}

/// Hit flags of every prediction, globally ranked by confidence.
pub fn ranked_hits(preds: &[Vec<Detection>], gts: &[Vec<Anchor>], thr: f64) -> Vec<bool> {
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (v, (p, g)) in preds.iter().zip(gts).enumerate() {
        let order = by_confidence(p);
        let hits = greedy_hits(p, &order, g, thr);
        for (rank, (&j, h)) in order.iter().zip(hits).enumerate() {
            ranked.push((p[j].confidence, v, rank, h));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    ranked.into_iter().map(|r| r.3).collect()
}

/// AP at each threshold and their mean; `None` when there is no ground truth.
pub fn compute_map(preds: &[Vec<Detection>], gts: &[Vec<Anchor>], thresholds: &[f64]) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    check_lengths(preds, gts)?;
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let ap: Vec<Option<f64>> = thresholds
        .iter()
        .map(|&t| average_precision(&ranked_hits(preds, gts, t), n_gt))
        .collect();
    Ok((ap.clone(), mean(&ap)))
}

fn mean(xs: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = xs.iter().copied().collect();
    let vals = vals?;
    if vals.is_empty() {
        return None;
    }
    Some(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Recall with the top-`k` proposals per video, averaged over
/// [`ar_thresholds`]; exact as a ratio of integer counts.
pub fn average_recall(preds: &[Vec<Detection>], gts: &[Vec<Anchor>], k: usize) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let thresholds = ar_thresholds();
    let mut found = 0u64;
    for (p, g) in preds.iter().zip(gts) {
        let mut order = by_confidence(p);
        order.truncate(k);
        for &t in &thresholds {
            found += greedy_hits(p, &order, g, t).iter().filter(|&&h| h).count() as u64;
        }
    }
    Some(Ratio::new(found as i128, (n_gt * thresholds.len()) as i128).to_f64().expect("bounded ratio"))
}

pub fn compute_mar(preds: &[Vec<Detection>], gts: &[Vec<Anchor>], budgets: &[usize]) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    check_lengths(preds, gts)?;
    let ar: Vec<Option<f64>> = budgets.iter().map(|&k| average_recall(preds, gts, k)).collect();
    Ok((ar.clone(), mean(&ar)))
}

/// Mann–Whitney AUC with ties counted half; `None` for single-class input.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of (pos, neg) pairs ordered correctly, ties once
    let mut twice = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] { p += 1 } else { n += 1 }
            j += 1;
        }
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(Some(Ratio::new(twice as i128, (2 * pos * neg) as i128).to_f64().expect("bounded ratio")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub budgets: Vec<usize>,
    pub ar: Vec<Option<f64>>,
    pub mar: Option<f64>,
    pub auc: Option<f64>,
    pub videos: usize,
    pub segments: usize,
}

impl EvalReport {
    pub fn compute(
        preds: &[Vec<Detection>],
        gts: &[Vec<Anchor>],
        scores: &[f64],
        labels: &[bool],
        thresholds: &[f64],
        budgets: &[usize],
    ) -> Result<Self> {
        let (ap, map) = compute_map(preds, gts, thresholds)?;
        let (ar, mar) = compute_mar(preds, gts, budgets)?;
        Ok(Self {
            thresholds: thresholds.to_vec(),
            ap,
            map,
            budgets: budgets.to_vec(),
            ar,
            mar,
            auc: compute_auc(scores, labels)?,
            videos: preds.len(),
            segments: gts.iter().map(Vec::len).sum(),
        })
    }

    /// `metric,key,value` rows; absent values are left empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        writeln!(w, "metric,key,value")?;
        for (t, v) in self.thresholds.iter().zip(&self.ap) {
            writeln!(w, "ap,{t},{}", f(*v))?;
        }
        writeln!(w, "map,,{}", f(self.map))?;
        for (k, v) in self.budgets.iter().zip(&self.ar) {
            writeln!(w, "ar,{k},{}", f(*v))?;
        }
        writeln!(w, "mar,,{}", f(self.mar))?;
        writeln!(w, "auc,,{}", f(self.auc))?;
        writeln!(w, "videos,,{}", self.videos)?;
        writeln!(w, "segments,,{}", self.segments)?;
        writeln!(w, "ar_iou_thresholds,,0.5:0.05:0.95")?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into());
        let aps: Vec<String> = self.thresholds.iter().zip(&self.ap).map(|(t, v)| format!("AP@{t}={}", f(*v))).collect();
        let ars: Vec<String> = self.budgets.iter().zip(&self.ar).map(|(k, v)| format!("AR@{k}={}", f(*v))).collect();
        format!(
            "mAP={} [{}] mAR={} [{}] AUC={} ({} videos, {} segments; AR IoU 0.5:0.05:0.95)",
            f(self.map),
            aps.join(" "),
            f(self.mar),
            ars.join(" "),
            f(self.auc),
            self.videos,
            self.segments
        )
    }
}
