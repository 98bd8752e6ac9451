//! Learnable relay tokens that bridge subsequences of a long scan, plus the
//! two auxiliary objectives on them.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Builder, Cx, ParamId};
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-12;

/// How the cosine target of the enhancement loss is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EnhanceOperand {
    /// Relay states after the scan, against post-scan sequence tokens.
    #[default]
    PostScan,
    /// Raw relay embeddings, against post-scan sequence tokens.
    Embedding,
}

/// `N_r × C` relay embeddings shared by every layer that uses them.
#[derive(Clone, Debug)]
pub struct RelayBank {
    pub tokens: ParamId,
    pub count: usize,
    pub gamma: f64,
}

impl RelayBank {
    pub fn new(b: &mut Builder, name: &str, count: usize, c: usize, gamma: f64) -> Result<Self> {
        let bound = 1.0 / (c as f64).sqrt();
        let tokens = b.uniform(name, &[count, c], bound)?;
        Ok(Self { tokens, count, gamma })
    }
}

/// Where relay tokens sit in an augmented sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertionMap {
    pub len: usize,
    /// Augmented index of every relay token, in order.
    pub relay_positions: Vec<usize>,
    /// Augmented index of every original token, in order.
    pub seq_positions: Vec<usize>,
    /// Original-index `[start, end)` of the `N_r + 1` subsequences.
    pub segments: Vec<(usize, usize)>,
}

impl InsertionMap {
    pub fn augmented_len(&self) -> usize {
        self.len + self.relay_positions.len()
    }

    /// Original tokens adjacent to relay `k`: the segments on either side.
    pub fn neighbours(&self, k: usize) -> std::ops::Range<usize> {
        self.segments[k].0..self.segments[k + 1].1
    }

    /// Gather indices into `concat_rows([x, relays])` producing the
    /// augmented order.
    fn gather_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.augmented_len()];
        for (i, &p) in self.seq_positions.iter().enumerate() {
            idx[p] = i;
        }
        for (k, &p) in self.relay_positions.iter().enumerate() {
            idx[p] = self.len + k;
        }
        idx
    }
}

/// Splits `t` tokens into `n_r + 1` near-equal subsequences (earlier ones take
/// the remainder) and places relay `k` right after subsequence `k`.
pub fn insertion_map(t: usize, n_r: usize) -> InsertionMap {
    let parts = n_r + 1;
    let (base, rem) = (t / parts, t % parts);
    let mut segments = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < rem);
        segments.push((start, start + len));
        start += len;
    }
    let mut relay_positions = Vec::with_capacity(n_r);
    let mut seq_positions = Vec::with_capacity(t);
    let mut pos = 0;
    for (i, &(s, e)) in segments.iter().enumerate() {
        for _ in s..e {
            seq_positions.push(pos);
            pos += 1;
        }
        if i < n_r {
            relay_positions.push(pos);
            pos += 1;
        }
    }
    InsertionMap { len: t, relay_positions, seq_positions, segments }
}

pub fn insert(cx: &mut Cx, x: Var, relays: Var, map: &InsertionMap) -> Result<Var> {
    let (t, c) = cx.g.value(x).dims2();
    let (n_r, cr) = cx.g.value(relays).dims2();
    if t != map.len || n_r != map.relay_positions.len() || c != cr {
        return Err(Error::Dimension(format!(
            "inserting {n_r}×{cr} relays into {t}×{c} with a map for {} tokens and {} relays",
            map.len,
            map.relay_positions.len()
        )));
    }
    let all = cx.g.concat_rows(&[x, relays])?;
    cx.g.gather_rows(all, map.gather_index())
}

/// Inverse of [`insert`]: the sequence in original order and the relay rows.
pub fn strip(cx: &mut Cx, aug: Var, map: &InsertionMap) -> Result<(Var, Option<Var>)> {
    let rows = cx.g.value(aug).rows();
    if rows != map.augmented_len() {
        return Err(Error::Dimension(format!("{rows} rows, map expects {}", map.augmented_len())));
    }
    let seq = cx.g.gather_rows(aug, map.seq_positions.clone())?;
    let relays = if map.relay_positions.is_empty() {
        None
    } else {
        Some(cx.g.gather_rows(aug, map.relay_positions.clone())?)
    };
    Ok((seq, relays))
}

/// Value-level insertion for inspection and tests.
pub fn insert_values(x: &Tensor, relays: &Tensor) -> Result<(Tensor, InsertionMap)> {
    let map = insertion_map(x.rows(), relays.rows());
    let store = crate::nn::ParamStore::new();
    let mut cx = Cx::eval(&store);
    let (xv, rv) = (cx.constant(x.clone()), cx.constant(relays.clone()));
    let aug = insert(&mut cx, xv, rv, &map)?;
    Ok((cx.g.value(aug).clone(), map))
}

pub fn strip_values(aug: &Tensor, map: &InsertionMap) -> Result<(Tensor, Option<Tensor>)> {
    let store = crate::nn::ParamStore::new();
    let mut cx = Cx::eval(&store);
    let a = cx.constant(aug.clone());
    let (s, r) = strip(&mut cx, a, map)?;
    Ok((cx.g.value(s).clone(), r.map(|r| cx.g.value(r).clone())))
}

/// An auxiliary loss term, flagged when it is vacuous.
pub struct Term {
    pub value: Var,
    pub degenerate: bool,
}

fn row_norms(cx: &mut Cx, x: Var) -> Var {
    let sq = cx.g.square(x);
    let s = cx.g.row_sum(sq);
    let s = cx.g.clamp_min(s, NORM_FLOOR * NORM_FLOOR);
    let n = cx.g.sqrt(s);
    cx.g.clamp_min(n, NORM_FLOOR)
}

/// `−mean_k cos(r_k, mean of the tokens in the two subsequences around k)`.
pub fn enhance_loss(cx: &mut Cx, relays: Var, seq_out: Var, map: &InsertionMap) -> Result<Term> {
    let n_r = map.relay_positions.len();
    if n_r == 0 {
        log::warn!("relay enhancement loss requested with no relay tokens; contributing 0");
        return Ok(Term { value: cx.g.scalar(0.0), degenerate: true });
    }
    let t = cx.g.value(seq_out).rows();
    let mut avg = vec![0.0; n_r * t];
    for k in 0..n_r {
        let nb = map.neighbours(k);
        if nb.is_empty() {
            return Err(Error::Contract(format!("relay {k} has no neighbouring tokens ({t} tokens)")));
        }
        let w = 1.0 / nb.len() as f64;
        for j in nb {
            avg[k * t + j] = w;
        }
    }
    let avg = cx.constant(Tensor::from_vec([n_r, t], avg));
    let target = cx.g.matmul(avg, seq_out)?;
    let prod = cx.g.mul(relays, target)?;
    let dots = cx.g.row_sum(prod);
    let nr = row_norms(cx, relays);
    let nt = row_norms(cx, target);
    let denom = cx.g.mul(nr, nt)?;
    let cos = cx.g.div(dots, denom)?;
    let m = cx.g.mean(cos);
    Ok(Term { value: cx.g.neg(m), degenerate: false })
}

/// `‖R Rᵀ − γ I‖²_F` on raw embeddings.
pub fn cooperation_loss(cx: &mut Cx, relays: Var, gamma: f64) -> Result<Term> {
    let n_r = cx.g.value(relays).rows();
    if n_r == 0 {
        log::warn!("relay cooperation loss requested with no relay tokens; contributing 0");
        return Ok(Term { value: cx.g.scalar(0.0), degenerate: true });
    }
    let gram = cx.g.matmul_nt(relays, relays)?;
    let mut target = Tensor::eye(n_r);
    target.data_mut().iter_mut().for_each(|v| *v *= gamma);
    let target = cx.constant(target);
    let d = cx.g.sub(gram, target)?;
    let sq = cx.g.square(d);
    Ok(Term { value: cx.g.sum(sq), degenerate: false })
}

/// Value-level enhancement loss from plain tensors.
pub fn enhance_loss_value(relays: &Tensor, seq_out: &Tensor) -> Result<(f64, bool)> {
    let store = crate::nn::ParamStore::new();
    let mut cx = Cx::eval(&store);
    let map = insertion_map(seq_out.rows(), relays.rows());
    let (r, s) = (cx.constant(relays.clone()), cx.constant(seq_out.clone()));
    let term = enhance_loss(&mut cx, r, s, &map)?;
    Ok((cx.g.item(term.value), term.degenerate))
}

pub fn cooperation_loss_value(relays: &Tensor, gamma: f64) -> Result<(f64, bool)> {
    let store = crate::nn::ParamStore::new();
    let mut cx = Cx::eval(&store);
    let r = cx.constant(relays.clone());
    let term = cooperation_loss(&mut cx, r, gamma)?;
    Ok((cx.g.item(term.value), term.degenerate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_for_small_cases() {
        let m = insertion_map(8, 1);
        assert_eq!(m.relay_positions, vec![4]);
        assert_eq!(m.augmented_len(), 9);
        let m = insertion_map(9, 2);
        assert_eq!(m.relay_positions, vec![3, 7]);
        assert_eq!(m.segments, vec![(0, 3), (3, 6), (6, 9)]);
    }

    #[test]
    fn insert_then_strip_is_identity() {
        let x = Tensor::from_vec([5, 2], (0..10).map(f64::from).collect());
        let r = Tensor::from_vec([2, 2], vec![-1.0, -2.0, -3.0, -4.0]);
        let (aug, map) = insert_values(&x, &r).unwrap();
        assert_eq!(aug.rows(), 7);
        assert_eq!(aug.row(map.relay_positions[0]), &[-1.0, -2.0]);
        let (s, rr) = strip_values(&aug, &map).unwrap();
        assert_eq!(s, x);
        assert_eq!(rr.unwrap(), r);
    }

    #[test]
    fn cooperation_examples() {
        let (v, _) = cooperation_loss_value(&Tensor::eye(2), 1.0).unwrap();
        assert_eq!(v, 0.0);
        let r = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let (v, _) = cooperation_loss_value(&r, 1.0).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn enhancement_of_aligned_relay_is_minus_one() {
        let seq = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let (v, deg) = enhance_loss_value(&Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap(), &seq).unwrap();
        assert!(!deg);
        assert!((v + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_relays_contribute_zero_and_warn() {
        let seq = Tensor::zeros([4, 2]);
        let (v, deg) = enhance_loss_value(&Tensor::zeros([0, 2]), &seq).unwrap();
        assert_eq!((v, deg), (0.0, true));
        let (v, deg) = cooperation_loss_value(&Tensor::zeros([0, 2]), 1.0).unwrap();
        assert_eq!((v, deg), (0.0, true));
    }
}
