use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deformtrace::bench::{self, BenchKind};
use deformtrace::checkpoint;
use deformtrace::config::RunConfig;
use deformtrace::data::{self, Perturbation, Sample};
use deformtrace::experiment::{self, Cell};
use deformtrace::metrics::{AR_BUDGETS, MAP_THRESHOLDS};
use deformtrace::model::{Model, Variant};
use deformtrace::par::Execution;
use deformtrace::train::{self, EpochLog};

#[derive(Parser)]
#[command(name = "deformtrace", version, about = "Temporal forgery localization with deformable state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Run configuration (`version=1` key=value file); defaults to the tiny recipe.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration's `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single worker with in-order reductions.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic split and checkpoint the best-mAP parameters.
    Train,
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Measure runtime scaling of the scan against dense attention.
    Bench(BenchArgs),
    /// Export the hidden-attention matrix of one encoder layer.
    Visualize(VisualizeArgs),
    /// Train and evaluate a grid of variants, relay counts and lengths.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of `.dtfv` feature files with JSON sidecars; defaults to
    /// the configuration's synthetic test split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = MAP_THRESHOLDS.to_vec())]
    thresholds: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = AR_BUDGETS.to_vec())]
    budgets: Vec<usize>,
    /// Additive feature noise level 1..=5 applied before evaluation.
    #[arg(long)]
    noise: Option<u8>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = bench::powers_of_two(8, 14))]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["ssm_scan".to_string(), "dense_attention".to_string()])]
    variants: Vec<String>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index into the synthetic test split.
    #[arg(long, default_value_t = 0, conflicts_with = "features")]
    sample: usize,
    /// A `.dtfv` feature file instead of a synthetic sample.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Keep only the first N frames of the input.
    #[arg(long)]
    truncate: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    relays: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    configure_threads(g.deterministic)?;
    let cfg = load_config(g)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval(a) => cmd_eval(&cfg, &a),
        Command::Bench(a) => cmd_bench(&cfg, &a),
        Command::Visualize(a) => cmd_visualize(&cfg, &a),
        Command::Ablate(a) => cmd_ablate(&cfg, &a),
    }
}

fn configure_threads(deterministic: bool) -> Result<()> {
    let cap = match std::env::var("DT_THREADS") {
        Ok(v) => Some(v.parse::<usize>().with_context(|| format!("DT_THREADS=`{v}` is not a count"))?),
        Err(_) => None,
    };
    let threads = if deterministic { Some(1) } else { cap.filter(|&n| n > 0) };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    Ok(())
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::tiny(),
    };
    for o in &g.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if g.deterministic {
        cfg.train.execution = Execution::Sequential;
    }
    Ok(cfg.resolved()?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,loss,l_match,l_cls,l_enh,l_coop,grad_norm,map,mar,auc";

fn log_row(l: &EpochLog) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let r = l.report.as_ref();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        l.epoch,
        l.lr,
        l.loss.total,
        l.loss.matching,
        l.loss.classification,
        l.loss.enhance,
        l.loss.cooperation,
        l.grad_norm,
        f(r.and_then(|r| r.map)),
        f(r.and_then(|r| r.mar)),
        f(r.and_then(|r| r.auc))
    )
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let splits = experiment::splits(cfg)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let (best, last) = (out.join("best.dtck"), out.join("last.dtck"));
    checkpoint::save(&model.store, &best)?;
    checkpoint::save(&model.store, &last)?;
    let mut log = create(&out.join("train_log.csv"))?;
    writeln!(log, "{TRAIN_LOG_HEADER}")?;
    log.flush()?;
    log::info!(
        "training {} ({} parameters) on {} samples, testing on {}",
        cfg.model.variant,
        model.store.num_scalars(),
        splits.train.len(),
        splits.test.len()
    );
    let result = train::fit(&mut model, &splits.train, &splits.test, cfg.train.clone(), |l, m, improved| {
        writeln!(log, "{}", log_row(l))?;
        log.flush()?;
        checkpoint::save(&m.store, &last)?;
        if improved {
            checkpoint::save(&m.store, &best)?;
        }
        Ok(())
    });
    let result = match result {
        Ok(r) => r,
        Err(e) => bail!("training aborted: {e}; last good parameters kept in {}", last.display()),
    };
    let model = Model::with_store(cfg.model.clone(), result.best_store)?;
    let report = match result.best.and_then(|(e, _)| result.logs[e - 1].report.clone()) {
        Some(r) => r,
        None => train::evaluate(&model, &splits.test, cfg.train.execution)?,
    };
    report.write_csv(create(&out.join("eval.csv"))?)?;
    match result.best {
        Some((e, m)) => println!("best epoch {e}: mAP {:.2}", 100.0 * m),
        None => println!("no epoch with a defined mAP; saved the initial parameters"),
    }
    println!("{}", report.summary());
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let store = checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Model::with_store(cfg.model.clone(), store)
        .with_context(|| format!("checkpoint {} does not fit the configured model", path.display()))
}

fn eval_samples(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<Sample>> {
    match dir {
        Some(d) => Ok(data::load_dataset(d).with_context(|| format!("loading dataset {}", d.display()))?),
        None => {
            let (test, start) = cfg.test_data();
            Ok(data::generate_range(&test, start, cfg.train.execution)?)
        }
    }
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let model = load_model(cfg, &a.checkpoint)?;
    let mut samples = eval_samples(cfg, a.data.as_deref())?;
    if let Some(level) = a.noise {
        samples = data::perturb_features(&samples, Perturbation::GaussianNoise, level, cfg.seed)?;
    }
    let preds = train::predict_all(&model, &samples, cfg.train.execution)?;
    let report = train::evaluate_predictions(&preds, &samples, &a.thresholds, &a.budgets)?;
    let path = cfg.out.join("eval.csv");
    report.write_csv(create(&path)?)?;
    println!("{}", report.summary());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, a: &BenchArgs) -> Result<()> {
    let kinds = a.variants.iter().map(|v| BenchKind::parse(v)).collect::<deformtrace::Result<Vec<_>>>()?;
    let reports = kinds.iter().map(|&k| bench::run(k, &a.lengths, cfg.seed)).collect::<deformtrace::Result<Vec<_>>>()?;
    let path = cfg.out.join("bench.csv");
    bench::write_csv(&reports, create(&path)?)?;
    println!("{}", bench::summary(&reports));
    println!("wrote {}", path.display());
    Ok(())
}

fn write_pgm(path: &Path, n: usize, values: &[f64]) -> Result<()> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut w = create(path)?;
    write!(w, "P5\n{n} {n}\n255\n")?;
    let px: Vec<u8> = values
        .iter()
        .map(|v| if max > 0.0 { (255.0 * v.abs() / max).round() as u8 } else { 0 })
        .collect();
    w.write_all(&px)?;
    w.flush()?;
    Ok(())
}

fn cmd_visualize(cfg: &RunConfig, a: &VisualizeArgs) -> Result<()> {
    let model = load_model(cfg, &a.checkpoint)?;
    let (mut video, mut audio) = match &a.features {
        Some(p) => data::read_features(p)?,
        None => {
            let (test, start) = cfg.test_data();
            let s = data::generate_sample(&test, start + a.sample);
            (s.video, s.audio)
        }
    };
    if let Some(n) = a.truncate {
        let keep = n.min(video.rows());
        let c = video.cols();
        video = deformtrace::Tensor::new([keep, c], video.data()[..keep * c].to_vec())?;
        audio = deformtrace::Tensor::new([keep, c], audio.data()[..keep * c].to_vec())?;
    }
    let (alpha, map) = model.hidden_attention(&video, &audio, a.layer).map_err(|e| match e {
        deformtrace::Error::Capacity(m) => anyhow::anyhow!("{m} (use --truncate to shorten the input)"),
        other => other.into(),
    })?;
    let base_len = map.as_ref().map_or(alpha.t, |m| m.len);
    let relays = map.as_ref().map_or(0, |m| m.relay_positions.len());
    let distance = base_len as f64 / (relays + 1) as f64;
    let mass = alpha.off_band_mass(distance);
    alpha.write_csv(create(&cfg.out.join("alpha.csv"))?)?;
    write_pgm(&cfg.out.join("alpha.pgm"), alpha.t, &alpha.matrix)?;
    let meta = serde_json::json!({
        "layer": a.layer,
        "tokens": alpha.t,
        "sequence_tokens": base_len,
        "relay_positions": map.as_ref().map(|m| m.relay_positions.clone()).unwrap_or_default(),
        "off_band_distance": distance,
        "off_band_mass": mass,
        "max_abs_alpha": alpha.matrix.iter().fold(0.0f64, |m, v| m.max(v.abs())),
    });
    fs::write(cfg.out.join("alpha.json"), serde_json::to_string_pretty(&meta)?)?;
    println!("hidden attention of encoder layer {}: {} tokens ({relays} relays)", a.layer, alpha.t);
    println!("off-band mass (distance > {distance:.2}): {mass:e}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, a: &AblateArgs) -> Result<()> {
    let variants = a.variants.iter().map(|v| Variant::parse(v)).collect::<deformtrace::Result<Vec<_>>>()?;
    let cells: Vec<Cell> = experiment::grid(cfg, &variants, &a.relays, &a.lengths, &a.seeds);
    let results = experiment::run_grid(cfg, &cells)?;
    let path = cfg.out.join("ablation.csv");
    experiment::write_table(&results, create(&path)?)?;
    let mut table = Vec::new();
    experiment::write_table(&results, &mut table)?;
    print!("{}", String::from_utf8(table)?);
    println!("wrote {}", path.display());
    Ok(())
}
