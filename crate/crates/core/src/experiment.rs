//! Ablation grids: train and evaluate one model per cell with shared seeds.

use std::io::Write;

use crate::config::RunConfig;
use crate::data::{generate_range, Sample};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{Model, Variant};
use crate::train::{evaluate, fit, EpochLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub variant: Variant,
    pub relays: usize,
    pub length: usize,
    pub seed: u64,
}

impl Cell {
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        cfg.model.variant = self.variant;
        cfg.model.relays = self.relays;
        cfg.data.length = self.length;
        cfg.seed = self.seed;
        cfg.resolved()
    }
}

/// Cartesian product in variant, relay count, length, seed order. Empty
/// axes fall back to the base configuration's value.
pub fn grid(base: &RunConfig, variants: &[Variant], relays: &[usize], lengths: &[usize], seeds: &[u64]) -> Vec<Cell> {
    let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let variants = if variants.is_empty() { vec![base.model.variant] } else { variants.to_vec() };
    let relays = or(relays, base.model.relays);
    let lengths = or(lengths, base.data.length);
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let mut out = Vec::new();
    for &variant in &variants {
        for &r in &relays {
            for &length in &lengths {
                for &seed in &seeds {
                    out.push(Cell { variant, relays: r, length, seed });
                }
            }
        }
    }
    out
}

pub struct Splits {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn splits(cfg: &RunConfig) -> Result<Splits> {
    let exec = cfg.train.execution;
    let train = generate_range(&cfg.data, 0, exec)?;
    let (test_cfg, start) = cfg.test_data();
    let test = generate_range(&test_cfg, start, exec)?;
    Ok(Splits { train, test })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    /// Test report of the best-mAP epoch (of the initial model when no epoch
    /// produced a defined mAP).
    pub report: EvalReport,
    pub best_epoch: Option<usize>,
    pub logs: Vec<EpochLog>,
}

/// Trains one cell and returns it with the best-mAP parameters loaded.
pub fn run_cell(
    base: &RunConfig,
    cell: Cell,
    on_epoch: impl FnMut(&EpochLog, &Model, bool) -> Result<()>,
) -> Result<(Model, CellResult)> {
    let cfg = cell.apply(base)?;
    let data = splits(&cfg)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let trained = fit(&mut model, &data.train, &data.test, cfg.train.clone(), on_epoch)?;
    if trained.best.is_some() {
        model.store = trained.best_store;
    }
    let best_epoch = trained.best.map(|b| b.0);
    let report = match best_epoch.and_then(|e| trained.logs[e - 1].report.clone()) {
        Some(r) => r,
        None => evaluate(&model, &data.test, cfg.train.execution)?,
    };
    Ok((model, CellResult { cell, report, best_epoch, logs: trained.logs }))
}

pub fn run_grid(base: &RunConfig, cells: &[Cell]) -> Result<Vec<CellResult>> {
    cells
        .iter()
        .map(|&c| {
            log::info!("cell {} N_r={} T={} seed={}", c.variant, c.relays, c.length, c.seed);
            run_cell(base, c, |_, _, _| Ok(())).map(|r| r.1)
        })
        .collect()
}

/// `row,variant,relays,length,seed,map,mar,auc`; `row` is the ablation-table
/// row of the variant (empty if it has none).
pub fn write_table<W: Write>(results: &[CellResult], mut w: W) -> Result<()> {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    writeln!(w, "row,variant,relays,length,seed,map,mar,auc")?;
    for r in results {
        let c = r.cell;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            c.variant.ablation_row().map(|n| n.to_string()).unwrap_or_default(),
            c.variant,
            c.relays,
            c.length,
            c.seed,
            f(r.report.map),
            f(r.report.mar),
            f(r.report.auc)
        )?;
    }
    Ok(())
}

/// Mean mAP over the cells matching `pred`; `None` if none has a value.
pub fn mean_map(results: &[CellResult], pred: impl Fn(&Cell) -> bool) -> Option<f64> {
    let v: Vec<f64> = results.iter().filter(|r| pred(&r.cell)).filter_map(|r| r.report.map).collect();
    if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) }
}

/// Per-sample off-band hidden-attention mass of encoder layer `layer` for two
/// models, counting pairs farther apart than `T_scan/(n_r + 1)` where
/// `T_scan` is the relay-free scan length.
pub fn off_band_pairs(a: &Model, b: &Model, samples: &[Sample], layer: usize, n_r: usize) -> Result<Vec<(f64, f64)>> {
    samples
        .iter()
        .map(|s| {
            let (ha, ma) = a.hidden_attention(&s.video, &s.audio, layer)?;
            let (hb, mb) = b.hidden_attention(&s.video, &s.audio, layer)?;
            let base_len = |h: &crate::ssm::HiddenAttention, m: &Option<crate::relay::InsertionMap>| {
                m.as_ref().map_or(h.t, |m| m.len)
            };
            let (la, lb) = (base_len(&ha, &ma), base_len(&hb, &mb));
            if la != lb {
                return Err(Error::Dimension(format!("scan lengths differ: {la} vs {lb}")));
            }
            let distance = la as f64 / (n_r + 1) as f64;
            Ok((ha.off_band_mass(distance), hb.off_band_mass(distance)))
        })
        .collect()
}
