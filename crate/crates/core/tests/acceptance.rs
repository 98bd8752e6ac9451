//! Acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line.
//!
//! The training-protocol checks (ablation ordering, relay long-range gap,
//! relay receptive field) are `#[ignore]`d: at the pinned scale they need
//! tens of CPU-hours. Run them with `cargo test --release -p deformtrace
//! --test acceptance -- --ignored --nocapture`. `DT_ACCEPT_TRAIN`,
//! `DT_ACCEPT_TEST`, `DT_ACCEPT_EPOCHS` and `DT_ACCEPT_SEEDS` shrink the
//! protocol for smoke runs; the printed line then says `reduced`.

mod common;

use std::sync::Mutex;
use std::time::Instant;

use common::{check_params, probe, rng, uniform};
use deformtrace::attention::{DeformableAttention, Mhsa, Reference};
use deformtrace::bench::{self, BenchKind};
use deformtrace::config::RunConfig;
use deformtrace::dcssm::{Anchor, DcSsmBlock};
use deformtrace::deform::{reference_points, split_levels, DeformableSampler, DsSsmBlock};
use deformtrace::experiment::{mean_map, off_band_pairs, run_cell, run_grid, Cell, CellResult};
use deformtrace::gradcheck::{grad_check, param_grad_check};
use deformtrace::matching::{hungarian, iou_1d};
use deformtrace::metrics::{average_precision_exact, average_recall, compute_auc, compute_map, compute_mar};
use deformtrace::model::{Detection, GroundTruth, Model, ModelConfig, Variant};
use deformtrace::nn::{Builder, Cx, ParamStore};
use deformtrace::optim::AdamW;
use deformtrace::relay::{cooperation_loss, enhance_loss, insertion_map, RelayBank};
use deformtrace::ssm::{hidden_attention_per_channel, FbSsm, SsmParams};
use deformtrace::{Tensor, Var};
use num_rational::Ratio;
use rand::Rng;

/// Keeps timing-sensitive and compute-heavy checks from sharing the CPU.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("[{}] criterion {id}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

// ------------------------------------------------------------ 1. gradients

const BLOCK_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;

fn perturbed(mut store: ParamStore, seed: u64) -> ParamStore {
    store.perturb(0.3, &mut rng(seed));
    store
}

/// Worst error of each block, checked against `BLOCK_TOL`.
fn block_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    // selective scan: every operand, both directions, two segment lengths
    let (t, c, s) = (8, 3, 2);
    let ops = [
        uniform(&[t, c], -1.0, 1.0, 1),
        uniform(&[t, c], 0.05, 0.8, 2),
        uniform(&[c, s], -0.5, 0.5, 3),
        uniform(&[t, s], -1.0, 1.0, 4),
        uniform(&[t, s], -1.0, 1.0, 5),
    ];
    let w = uniform(&[t, c], -1.0, 1.0, 6);
    let mut worst: f64 = 0.0;
    for (seg, reverse) in [(8, false), (8, true), (4, false), (4, true)] {
        for which in 0..5 {
            let (all, w) = (ops.clone(), w.clone());
            let e = grad_check(
                move |g, v| {
                    let mut vars: Vec<Var> = all.iter().map(|t| g.constant(t.clone())).collect();
                    vars[which] = v;
                    let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], seg, reverse)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                },
                &ops[which],
                common::STEP,
            )
            .unwrap();
            worst = worst.max(e);
        }
    }
    out.push(("selective_scan", worst));

    // fb_ssm with a learnable input
    {
        let mut store = ParamStore::new();
        let mut r = rng(10);
        let mut b = Builder::new(&mut store, &mut r);
        let fb = FbSsm::new(&mut b, "fb", 4, 3).unwrap();
        let x = b.tensor("x", uniform(&[7, 4], -1.0, 1.0, 11)).unwrap();
        let store = perturbed(store, 12);
        let e = check_params(
            &store,
            |cx| {
                let xv = cx.p(x);
                let y = fb.forward(cx, xv)?;
                probe(cx, y, 13)
            },
            6,
        );
        out.push(("fb_ssm", e.worst));
    }

    let grid = reference_points(8, 2, 1.0, 1.0, 8.0).unwrap();

    // deformable self-scan sampler with random offsets
    {
        let mut store = ParamStore::new();
        let mut r = rng(20);
        let mut b = Builder::new(&mut store, &mut r);
        let sampler = DeformableSampler::new(&mut b, "ds", 4, 2, 2).unwrap();
        let x = b.tensor("x", uniform(&[12, 4], -1.0, 1.0, 21)).unwrap();
        let store = perturbed(store, 22);
        let e = check_params(
            &store,
            |cx| {
                let xv = cx.p(x);
                let y = sampler.forward(cx, xv, &grid)?;
                probe(cx, y, 23)
            },
            8,
        );
        out.push(("deformable_self_scan", e.worst));
    }

    // ds_ssm block with relay tokens, through its output and relay losses
    {
        let mut store = ParamStore::new();
        let mut r = rng(30);
        let mut b = Builder::new(&mut store, &mut r);
        let block = DsSsmBlock::new(&mut b, "blk", 4, 2, 2, 3, true).unwrap();
        let bank = RelayBank::new(&mut b, "relay", 2, 4, 1.0).unwrap();
        let x = b.tensor("x", uniform(&[12, 4], -1.0, 1.0, 31)).unwrap();
        let store = perturbed(store, 32);
        let e = check_params(
            &store,
            |cx| {
                let xv = cx.p(x);
                let o = block.forward(cx, xv, &grid, Some(&bank))?;
                let p = probe(cx, o.out, 33)?;
                let r = o.relay.expect("relay bank given");
                let enh = enhance_loss(cx, r.relay_out, r.seq_out, &r.map)?.value;
                let tokens = cx.p(bank.tokens);
                let coop = cooperation_loss(cx, tokens, bank.gamma)?.value;
                let l = cx.g.add(p, enh)?;
                cx.g.add(l, coop)
            },
            6,
        );
        out.push(("ds_ssm_block", e.worst));
    }

    // dc_ssm block reading learnable encoder features
    {
        let mut store = ParamStore::new();
        let mut r = rng(40);
        let mut b = Builder::new(&mut store, &mut r);
        let block = DcSsmBlock::new(&mut b, "dc", 4, 2, 3, 3, true).unwrap();
        let mem = b.tensor("mem", uniform(&[12, 4], -1.0, 1.0, 41)).unwrap();
        let q = b.tensor("q", uniform(&[3, 4], -1.0, 1.0, 42)).unwrap();
        let store = perturbed(store, 43);
        let anchors = [
            Anchor { center: 0.31, duration: 0.27 },
            Anchor { center: 0.62, duration: 0.41 },
            Anchor { center: 0.13, duration: 0.09 },
        ];
        let e = check_params(
            &store,
            |cx| {
                let m = cx.p(mem);
                let levels = split_levels(cx, m, &grid)?;
                let qv = cx.p(q);
                let y = block.forward(cx, qv, &anchors, &levels, &grid)?;
                probe(cx, y, 44)
            },
            8,
        );
        out.push(("dc_ssm_block", e.worst));
    }

    // attention: positional MHSA and deformable attention in both modes
    {
        let mut store = ParamStore::new();
        let mut r = rng(50);
        let mut b = Builder::new(&mut store, &mut r);
        let mhsa = Mhsa::new(&mut b, "mhsa", 8, 2).unwrap();
        let dfa = DeformableAttention::new(&mut b, "dfa", 8, 2, 2, 2).unwrap();
        let mem = b.tensor("mem", uniform(&[12, 8], -1.0, 1.0, 51)).unwrap();
        let q = b.tensor("q", uniform(&[3, 8], -1.0, 1.0, 52)).unwrap();
        let store = perturbed(store, 53);
        let anchors = [
            Anchor { center: 0.27, duration: 0.33 },
            Anchor { center: 0.58, duration: 0.21 },
            Anchor { center: 0.81, duration: 0.12 },
        ];
        let e = check_params(
            &store,
            |cx| {
                let qv = cx.p(q);
                let m = cx.p(mem);
                let a = mhsa.forward(cx, qv, &anchors)?;
                let c = dfa.forward(cx, qv, Reference::Anchors(&anchors), m, &grid)?;
                let s = dfa.forward(cx, m, Reference::Tokens, m, &grid)?;
                let pa = probe(cx, a, 54)?;
                let pc = probe(cx, c, 55)?;
                let ps = probe(cx, s, 56)?;
                let l = cx.g.add(pa, pc)?;
                cx.g.add(l, ps)
            },
            6,
        );
        out.push(("attention", e.worst));
    }
    out
}

fn end_to_end_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        input_channels: 4,
        channels: 16,
        levels: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        samples: 2,
        queries: 4,
        relays: 2,
        variant,
        ..ModelConfig::default()
    }
}

/// Hungarian-matched total loss of a tiny model; the decoder's sampling
/// anchors are pinned at their unperturbed values because the tape treats
/// them as constants.
fn end_to_end_error(variant: Variant) -> f64 {
    let mut model = Model::new(end_to_end_config(variant), 3).unwrap();
    model.store.perturb(0.05, &mut rng(4));
    let video = uniform(&[16, 4], -1.0, 1.0, 5);
    let audio = uniform(&[16, 4], -1.0, 1.0, 6);
    let gt = GroundTruth {
        segments: vec![Anchor { center: 0.3, duration: 0.2 }, Anchor { center: 0.7, duration: 0.15 }],
        label: true,
    };
    let mut cx = Cx::train(&model.store);
    let out = model.forward(&mut cx, &video, &audio).unwrap();
    let pinned = out.sampling_anchors.clone();
    let obj = model.objective(&mut cx, &out, &gt).unwrap();
    let grads = cx.backward(obj.total).unwrap();
    let check = param_grad_check(
        &model.store,
        &grads,
        |s| {
            let mut cx = Cx::eval(s);
            let m = Model::with_store(model.config.clone(), s.clone())?;
            let out = m.forward_pinned(&mut cx, &video, &audio, Some(&pinned))?;
            let obj = m.objective(&mut cx, &out, &gt)?;
            Ok(cx.g.item(obj.total))
        },
        common::STEP,
        3,
        common::FLOOR,
        7,
    )
    .unwrap();
    check.worst
}

#[test]
fn c1_gradient_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let blocks = block_errors();
    let e2e: Vec<(Variant, f64)> =
        [Variant::DeformTrace, Variant::VanillaSsm, Variant::FullFormer].into_iter().map(|v| (v, end_to_end_error(v))).collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = blocks.iter().all(|b| b.1 < BLOCK_TOL) && e2e.iter().all(|e| e.1 < END_TO_END_TOL) && secs < 300.0;
    let mut parts: Vec<String> = blocks.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    parts.extend(e2e.iter().map(|(v, e)| format!("end-to-end[{v}] {e:.1e}")));
    report(
        1,
        "gradient correctness",
        pass,
        &format!("max rel err {} (blocks < {BLOCK_TOL:e}, end-to-end < {END_TO_END_TOL:e}); {secs:.1}s", parts.join(", ")),
    );
}

// ------------------------------------------------------ 2. scan vs unroll

/// `y_t[c] = Σ_j Σ_{s ≤ t} C_t[j] (Π_{i=s+1}^{t} ā_i[c,j]) b̄_s[c,j] x_s[c]`,
/// evaluated directly in `O(T²)`.
fn unrolled(x: &Tensor, delta: &Tensor, a_log: &Tensor, b: &Tensor, c: &Tensor) -> Tensor {
    let (t, ch) = x.dims2();
    let s = a_log.cols();
    let abar = |i: usize, k: usize, j: usize| (-delta.at(i, k) * a_log.at(k, j).exp()).exp();
    let mut y = vec![0.0; t * ch];
    for tt in 0..t {
        for k in 0..ch {
            let mut acc = 0.0;
            for j in 0..s {
                for src in 0..=tt {
                    let decay: f64 = (src + 1..=tt).map(|i| abar(i, k, j)).product();
                    acc += c.at(tt, j) * decay * delta.at(src, k) * b.at(src, j) * x.at(src, k);
                }
            }
            y[tt * ch + k] = acc;
        }
    }
    Tensor::from_vec([t, ch], y)
}

fn flip_rows(x: &Tensor) -> Tensor {
    let (t, c) = x.dims2();
    Tensor::from_vec([t, c], (0..t).rev().flat_map(|i| x.row(i).to_vec()).collect())
}

#[test]
fn c2_scan_matches_unrolled_sum() {
    let _g = serial();
    let mut r = rng(2024);
    let (mut worst_scan, mut worst_ha): (f64, f64) = (0.0, 0.0);
    for f in 0..100u64 {
        let t = r.random_range(1..=64);
        let c = r.random_range(1..=4);
        let s = r.random_range(1..=4);
        let x = uniform(&[t, c], -1.0, 1.0, 3 * f);
        let delta = uniform(&[t, c], 0.01, 1.0, 3 * f + 1);
        let a_log = uniform(&[c, s], -1.0, 1.0, 3 * f + 2);
        let bg = uniform(&[t, s], -1.0, 1.0, 1000 + f);
        let cg = uniform(&[t, s], -1.0, 1.0, 2000 + f);
        let reverse = f % 2 == 1;
        let mut g = deformtrace::Graph::new();
        let vars: Vec<Var> = [&x, &delta, &a_log, &bg, &cg].iter().map(|t| g.constant((*t).clone())).collect();
        let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], t, reverse).unwrap();
        let want = if reverse {
            flip_rows(&unrolled(&flip_rows(&x), &flip_rows(&delta), &a_log, &flip_rows(&bg), &flip_rows(&cg)))
        } else {
            unrolled(&x, &delta, &a_log, &bg, &cg)
        };
        worst_scan = worst_scan.max(g.value(y).max_abs_diff(&want));

        // hidden attention of a gated scan reconstructs its output
        let mut store = ParamStore::new();
        let mut pr = rng(5000 + f);
        let params = SsmParams::new(&mut Builder::new(&mut store, &mut pr), "ssm", c, s).unwrap();
        store.perturb(0.5, &mut pr);
        let d = params.discretize(&store, &x).unwrap();
        let alpha = hidden_attention_per_channel(&d).unwrap();
        let y = deformtrace::ssm::selective_scan(&store, &params, &x, deformtrace::ssm::Direction::Forward).unwrap();
        for k in 0..c {
            for tt in 0..t {
                let rec: f64 = (0..t).map(|src| alpha[k][tt * t + src] * x.at(src, k)).sum();
                worst_ha = worst_ha.max((rec - y.at(tt, k)).abs());
            }
        }
    }
    report(
        2,
        "scan vs unrolled oracle",
        worst_scan < 1e-9 && worst_ha < 1e-6,
        &format!("100 fixtures, max |scan − unroll| {worst_scan:.1e} (< 1e-9), max hidden-attention reconstruction error {worst_ha:.1e} (< 1e-6)"),
    );
}

// ----------------------------------------------------------- 3. hungarian

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost[0].len()], 0.0, &mut best);
    best
}

#[test]
fn c3_hungarian_is_optimal() {
    let mut r = rng(33);
    let mut mismatches = Vec::new();
    for i in 0..200 {
        let n = r.random_range(1..=7);
        let m = r.random_range(n..=7);
        let integer = i % 2 == 0;
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| if integer { f64::from(r.random_range(0..10u8)) } else { r.random_range(0.0..10.0) })
                    .collect()
            })
            .collect();
        let (assign, total) = hungarian(&cost).unwrap();
        let mut seen = vec![false; m];
        assert!(assign.iter().all(|&j| !std::mem::replace(&mut seen[j], true)), "assignment not injective");
        let recomputed = assign.iter().enumerate().fold(0.0, |a, (i, &j)| a + cost[i][j]);
        let best = brute_force(&cost);
        if total != best || recomputed != total {
            mismatches.push((i, total, best));
        }
    }
    report(
        3,
        "hungarian optimality",
        mismatches.is_empty(),
        &format!("200 instances (N_f ≤ 7, integer and real costs), {} differ from brute force exactly: {mismatches:?}", mismatches.len()),
    );
}

// -------------------------------------------------------------- 4. metrics

fn det(center: f64, duration: f64, confidence: f64) -> Detection {
    Detection { anchor: Anchor { center, duration }, confidence }
}

#[test]
fn c4_metric_fixtures() {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let a = Anchor { center: 0.5, duration: 0.2 };
    check("iou identical", iou_1d(a, a) == 1.0);
    check("iou disjoint", iou_1d(a, Anchor { center: 0.9, duration: 0.1 }) == 0.0);
    check("iou 0.6", (iou_1d(a, Anchor { center: 0.55, duration: 0.2 }) - 0.6).abs() < 1e-12);

    check("AP 5/6 exact", average_precision_exact(&[true, false, true], 2) == Some(Ratio::new(5, 6)));
    let gts = vec![vec![Anchor { center: 0.2, duration: 0.1 }, Anchor { center: 0.7, duration: 0.1 }]];
    let preds = vec![vec![det(0.2, 0.1, 0.9), det(0.45, 0.1, 0.8), det(0.7, 0.1, 0.7)]];
    let (ap, _) = compute_map(&preds, &gts, &[0.5]).unwrap();
    check("AP 5/6 ranked", ap[0] == Some(5.0 / 6.0));
    let one = vec![vec![Anchor { center: 0.3, duration: 0.2 }]];
    check("mAP perfect", compute_map(&[vec![det(0.3, 0.2, 1.0)]], &one, &[0.5, 0.75, 0.9, 0.95]).unwrap().1 == Some(1.0));
    check("mAP disjoint", compute_map(&[vec![det(0.8, 0.1, 1.0)]], &one, &[0.5, 0.75, 0.9, 0.95]).unwrap().1 == Some(0.0));
    check("mAP no gts absent", compute_map(&[vec![det(0.8, 0.1, 1.0)]], &[vec![]], &[0.5]).unwrap().1.is_none());

    let g = vec![vec![a]];
    check("AR perfect", average_recall(&[vec![det(0.5, 0.2, 0.9)]], &g, 1) == Some(1.0));
    check("AR k=0", average_recall(&[vec![det(0.5, 0.2, 0.9)]], &g, 0) == Some(0.0));
    let x = 0.2 / 0.72 - 0.2;
    let p = det(0.5 + x / 2.0, 0.2 + x, 0.5);
    check("AR IoU 0.72", average_recall(&[vec![p]], &g, 10) == Some(0.5));
    let (ar, _) = compute_mar(&[vec![p]], &g, &[1, 5]).unwrap();
    check("mAR budgets", ar == vec![Some(0.5), Some(0.5)]);

    check("AUC separated", compute_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap() == Some(1.0));
    check("AUC ties", compute_auc(&[0.4; 4], &[true, false, false, true]).unwrap() == Some(0.5));
    check("AUC pairs", compute_auc(&[0.9, 0.4, 0.6], &[true, false, true]).unwrap() == Some(1.0));
    check("AUC single class absent", compute_auc(&[0.9, 0.4], &[true, true]).unwrap().is_none());
    report(4, "metric oracles", failures.is_empty(), &format!("16 fixtures, failing: {failures:?}"));
}

// ----------------------------------------------- 5, 6, 8. training protocol

struct Protocol {
    train: usize,
    test: usize,
    epochs: usize,
    seeds: Vec<u64>,
}

impl Protocol {
    fn from_env() -> Self {
        let var = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
        Self {
            train: var("DT_ACCEPT_TRAIN", 5000),
            test: var("DT_ACCEPT_TEST", 1000),
            epochs: var("DT_ACCEPT_EPOCHS", 50),
            seeds: (0..var("DT_ACCEPT_SEEDS", 3) as u64).collect(),
        }
    }

    fn reduced(&self) -> bool {
        (self.train, self.test, self.epochs, self.seeds.len()) != (5000, 1000, 50, 3)
    }

    fn describe(&self) -> String {
        format!(
            "{}{} train / {} test, {} epochs, {} seeds",
            if self.reduced() { "reduced: " } else { "" },
            self.train,
            self.test,
            self.epochs,
            self.seeds.len()
        )
    }

    fn base(&self, length: usize) -> RunConfig {
        let mut cfg = RunConfig::tiny();
        cfg.data.samples = self.train;
        cfg.test_samples = self.test;
        cfg.data.length = length;
        cfg.data.difficulty = 0.5;
        cfg.train.epochs = self.epochs;
        cfg
    }
}

fn cells(variants: &[Variant], lengths: &[usize], p: &Protocol, relays: usize) -> Vec<Cell> {
    let mut out = Vec::new();
    for &length in lengths {
        for &variant in variants {
            for &seed in &p.seeds {
                out.push(Cell { variant, relays, length, seed });
            }
        }
    }
    out
}

fn map_of(results: &[CellResult], v: Variant, length: usize, seed: u64) -> f64 {
    mean_map(results, |c| c.variant == v && c.length == length && c.seed == seed).unwrap_or(0.0)
}

#[test]
#[ignore = "pinned protocol trains 9 tiny models on 5000 samples for 50 epochs (~125 CPU-hours on one core)"]
fn c5_ablation_ordering() {
    let _g = serial();
    let p = Protocol::from_env();
    let base = p.base(200);
    let variants = [Variant::DeformTrace, Variant::NoRelay, Variant::VanillaSsm];
    let results = run_grid(&base, &cells(&variants, &[200], &p, base.model.relays)).unwrap();
    let mean = |v: Variant| mean_map(&results, |c| c.variant == v).unwrap_or(0.0);
    let (full, norel, van) = (mean(Variant::DeformTrace), mean(Variant::NoRelay), mean(Variant::VanillaSsm));
    let ordered_seeds = p
        .seeds
        .iter()
        .filter(|&&s| {
            let m = |v| map_of(&results, v, 200, s);
            m(Variant::DeformTrace) > m(Variant::NoRelay) && m(Variant::NoRelay) > m(Variant::VanillaSsm)
        })
        .count();
    let need = (2 * p.seeds.len()).div_ceil(3);
    let pass = full > norel && norel > van && full - van >= 0.05 && ordered_seeds >= need;
    report(
        5,
        "ablation ordering",
        pass,
        &format!(
            "{}; mean mAP deformtrace {:.2} > no_relay {:.2} > vanilla_ssm {:.2}, gap {:.2} pts (≥ 5), ordered in {ordered_seeds}/{} seeds",
            p.describe(),
            100.0 * full,
            100.0 * norel,
            100.0 * van,
            100.0 * (full - van),
            p.seeds.len()
        ),
    );
}

#[test]
#[ignore = "pinned protocol trains 18 tiny models at T up to 800 (several hundred CPU-hours on one core)"]
fn c6_relay_gap_grows_with_length() {
    let _g = serial();
    let p = Protocol::from_env();
    let lengths = [200, 400, 800];
    let base = p.base(200);
    let variants = [Variant::DeformTrace, Variant::NoRelay];
    let results = run_grid(&base, &cells(&variants, &lengths, &p, base.model.relays)).unwrap();
    let mut good = 0;
    let mut gaps_txt = Vec::new();
    for &s in &p.seeds {
        let gaps: Vec<f64> = lengths
            .iter()
            .map(|&t| map_of(&results, Variant::DeformTrace, t, s) - map_of(&results, Variant::NoRelay, t, s))
            .collect();
        if gaps.windows(2).all(|w| w[0] <= w[1]) && gaps[2] > 0.0 {
            good += 1;
        }
        gaps_txt.push(format!("seed {s}: {:?}", gaps.iter().map(|g| format!("{:+.2}", 100.0 * g)).collect::<Vec<_>>()));
    }
    let need = (2 * p.seeds.len()).div_ceil(3);
    report(
        6,
        "relay long-range gap",
        good >= need,
        &format!("{}; mAP gap (pts) at T=200/400/800 {}; monotone and positive at 800 in {good}/{} seeds", p.describe(), gaps_txt.join("; "), p.seeds.len()),
    );
}

#[test]
#[ignore = "pinned protocol trains two tiny models at T=400 on 5000 samples for 50 epochs (~55 CPU-hours on one core)"]
fn c8_relay_receptive_field() {
    let _g = serial();
    let p = Protocol::from_env();
    let base = p.base(400);
    let seed = p.seeds[0];
    let n_r = base.model.relays;
    let (relay_model, _) = run_cell(&base, Cell { variant: Variant::DeformTrace, relays: n_r, length: 400, seed }, |_, _, _| Ok(())).unwrap();
    let (plain_model, _) = run_cell(&base, Cell { variant: Variant::NoRelay, relays: n_r, length: 400, seed }, |_, _, _| Ok(())).unwrap();
    let cfg = Cell { variant: Variant::DeformTrace, relays: n_r, length: 400, seed }.apply(&base).unwrap();
    let test = deformtrace::experiment::splits(&cfg).unwrap().test;
    let pairs = off_band_pairs(&relay_model, &plain_model, &test, 0, n_r).unwrap();
    let wins = pairs.iter().filter(|(a, b)| a > b).count();
    let frac = wins as f64 / pairs.len().max(1) as f64;
    report(
        8,
        "relay receptive field",
        frac >= 0.8,
        &format!("{}; off-band mass (distance > T/(N_r+1)) larger with relays on {wins}/{} eval samples ({:.1}%, need ≥ 80%)", p.describe(), pairs.len(), 100.0 * frac),
    );
}

// -------------------------------------------------------------- 7. scaling

#[test]
fn c7_complexity_slopes() {
    let _g = serial();
    let lengths = bench::powers_of_two(8, 14);
    let scan = bench::run(BenchKind::SsmScan, &lengths, 0).unwrap();
    let attn = bench::run(BenchKind::DenseAttention, &lengths, 0).unwrap();
    report(
        7,
        "complexity slopes",
        scan.slope <= 1.3 && attn.slope >= 1.7,
        &format!("T=2^8..2^14: ssm_scan slope {:.3} (≤ 1.3), dense_attention slope {:.3} (≥ 1.7)", scan.slope, attn.slope),
    );
}

// ------------------------------------------------------ 9. loss surfaces

#[test]
fn c9_relay_loss_surfaces() {
    let _g = serial();
    // cooperation loss alone, N_r = 8, C = 64, plain gradient descent
    let mut store = ParamStore::new();
    let mut r = rng(9);
    let bank = RelayBank::new(&mut Builder::new(&mut store, &mut r), "relay", 8, 64, 1.0).unwrap();
    let mut coop = f64::INFINITY;
    let mut coop_steps = 0;
    for step in 0..5000 {
        let mut cx = Cx::train(&store);
        let tokens = cx.p(bank.tokens);
        let l = cooperation_loss(&mut cx, tokens, 1.0).unwrap().value;
        coop = cx.g.item(l);
        coop_steps = step;
        if coop < 1e-6 {
            break;
        }
        let g = cx.backward(l).unwrap();
        let grad = g.get(bank.tokens).unwrap().to_vec();
        let w = store.get_mut(bank.tokens).data_mut();
        w.iter_mut().zip(grad).for_each(|(w, g)| *w -= 0.05 * g);
    }

    // enhancement loss: relays trained against a frozen post-scan sequence
    let seq = uniform(&[40, 16], -1.0, 1.0, 90);
    let map = insertion_map(40, 4);
    let mut store = ParamStore::new();
    let relays = store.add("relays", uniform(&[4, 16], -1.0, 1.0, 91)).unwrap();
    let mut opt = AdamW::new(&store, 0.0);
    let mut enh = 0.0;
    for _ in 0..3000 {
        let mut cx = Cx::train(&store);
        let rv = cx.p(relays);
        let sv = cx.constant(seq.clone());
        let l = enhance_loss(&mut cx, rv, sv, &map).unwrap().value;
        enh = cx.g.item(l);
        let g = cx.backward(l).unwrap();
        opt.step(&mut store, &g, 1e-2).unwrap();
    }
    report(
        9,
        "relay loss surfaces",
        coop < 1e-6 && (enh + 1.0).abs() < 1e-6,
        &format!("cooperation loss {coop:.2e} after {coop_steps} steps (< 1e-6 within 5000); enhancement loss {enh:.9} (target −1)"),
    );
}
