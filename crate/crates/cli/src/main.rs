use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrine_core::dataio::{read_bundle, write_atomic, Checkpoint, DatasetBundle, Fold, RunConfig};
use mrine_core::diffcore::Matrix;
use mrine_core::evalkit::{self, Align, MetricReport};
use mrine_core::lorenz::{self, LorenzConfig, ObsConfig};
use mrine_core::model::{InferenceMode, MrineModel};
use mrine_core::trainer::{self, TrainError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "mrine", version, about = "Multiscale latent dynamical models for spike and field-potential data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    #[command(subcommand)]
    Simulate(Simulate),
    /// Train a model on a bundle and write a checkpoint.
    Train(TrainArgs),
    /// Write inferred latents of every trial as CSV.
    Infer(InferArgs),
    /// Cross-validated linear decoding of a target from latents.
    Decode(DecodeArgs),
    /// Spike AUC and Gaussian CC of the model's signal reconstructions.
    EvalRecon(EvalReconArgs),
    /// Decoding accuracy over a grid of inference-time drop probabilities.
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum Simulate {
    /// Stochastic Lorenz latents with Poisson and Gaussian observations.
    Lorenz(SimArgs),
}

#[derive(Args, Serialize)]
struct SimArgs {
    /// JSON with optional `lorenz`, `obs`, `timescale_ratio` and `name`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides both simulation seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Hold out fold k of N (`k/N`); the held-out trials give the
    /// validation loss.
    #[arg(long)]
    fold: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Epoch log, one JSON object per line.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// filter, smooth or predict:k with k >= 1.
    #[arg(long, default_value = "filter", value_parser = parse_mode)]
    #[serde(serialize_with = "display")]
    mode: InferenceMode,
    #[arg(long, default_value_t = 0.0)]
    drop_s: f64,
    #[arg(long, default_value_t = 0.0)]
    drop_y: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DecodeArgs {
    /// CSV written by `infer`.
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value = "behavior")]
    target: String,
    /// none, downsample:r or avg_pool:r.
    #[arg(long, default_value = "none", value_parser = parse_align)]
    #[serde(serialize_with = "debug")]
    align: Align,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalReconArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "smooth", value_parser = parse_mode)]
    #[serde(serialize_with = "display")]
    mode: InferenceMode,
    /// Evaluate only the held-out trials of fold k of N.
    #[arg(long)]
    fold: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    drop_s: f64,
    #[arg(long, default_value_t = 0.0)]
    drop_y: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON `{"drop_s": [...], "drop_y": [...]}`; every pair is scored.
    #[arg(long)]
    grid: PathBuf,
    /// The readout is fitted on the other folds, scored on this one.
    #[arg(long, default_value = "1/5")]
    fold: String,
    #[arg(long, default_value = "filter", value_parser = parse_mode)]
    #[serde(serialize_with = "display")]
    mode: InferenceMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn debug<T: std::fmt::Debug, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(&format_args!("{v:?}"))
}

fn parse_mode(s: &str) -> Result<InferenceMode, String> {
    s.parse().map_err(|e: mrine_core::model::ModelError| e.to_string())
}

fn parse_align(s: &str) -> Result<Align, String> {
    s.parse().map_err(|e: evalkit::EvalError| e.to_string())
}

/// A failed run: a short machine-readable kind and a message.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Failure { kind, message: message.to_string() }
    }
}

macro_rules! failure_from {
    ($($t:ty => $kind:literal),* $(,)?) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::new($kind, e)
            }
        }
    )*};
}

failure_from! {
    mrine_core::evalkit::EvalError => "eval",
    mrine_core::model::ModelError => "model",
    mrine_core::lorenz::LorenzError => "simulation",
    std::io::Error => "io",
    serde_json::Error => "json",
    TrainError => "train",
}

impl From<mrine_core::dataio::DataError> for Failure {
    fn from(e: mrine_core::dataio::DataError) -> Self {
        let kind = match e {
            mrine_core::dataio::DataError::Config(_) => "config",
            _ => "data",
        };
        Failure::new(kind, e)
    }
}

type Outcome = Result<serde_json::Value, Failure>;

/// Reproducibility record printed on success.
#[derive(Serialize)]
struct Record<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config_sha256: String,
    outputs: serde_json::Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn args_hash(args: &impl Serialize) -> String {
    sha256_hex(serde_json::to_string(args).expect("arguments serialize").as_bytes())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}

fn check_dims(model: &MrineModel, data: &DatasetBundle) -> Result<(), Failure> {
    let (m, d) = (&model.config, &data.manifest);
    if m.n_s != d.n_s || m.n_y != d.n_y {
        return Err(Failure::new(
            "incompatible",
            format!("checkpoint expects n_s={}, n_y={}; data has n_s={}, n_y={}", m.n_s, m.n_y, d.n_s, d.n_y),
        ));
    }
    Ok(())
}

fn parse_fold(s: &str) -> Result<Fold, Failure> {
    s.parse::<Fold>().map_err(|e| Failure::new("usage", e))
}

fn check_prob(name: &str, p: f64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Failure::new("usage", format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SimConfig {
    lorenz: LorenzConfig,
    obs: ObsConfig,
    timescale_ratio: Option<usize>,
    name: Option<String>,
}

fn simulate(args: &SimArgs) -> Outcome {
    let mut cfg: SimConfig = match &args.config {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Failure::new("config", e))?,
        None => SimConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.lorenz.seed = s;
        cfg.obs.seed = s;
    }
    let ratio = cfg.timescale_ratio.unwrap_or(1);
    let sim = lorenz::simulate(&cfg.lorenz, &cfg.obs)?;
    let name = cfg.name.unwrap_or_else(|| "lorenz".into());
    let bundle = lorenz::export_bundle(&sim, ratio, &name, &args.out)?;
    Ok(serde_json::json!({
        "bundle": args.out,
        "trials": bundle.len(),
        "seeds": bundle.manifest.seeds,
        "raw_max_abs": sim.latents.raw_max_abs,
    }))
}

fn train(args: &TrainArgs) -> Outcome {
    let run = RunConfig::from_json(&read_text(&args.config)?)?;
    let data = read_bundle(&args.data)?;
    let (model_cfg, mut train_cfg) = run.resolve(data.manifest.n_s, data.manifest.n_y)?;
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    let (train_idx, val_idx) = match &args.fold {
        Some(f) => parse_fold(f)?.split(data.len()),
        None => ((0..data.len()).collect(), Vec::new()),
    };
    if train_idx.is_empty() {
        return Err(Failure::new("data", "no training trials"));
    }
    let train_set = data.trial_set(&train_idx)?;
    let val_set = if val_idx.is_empty() { None } else { Some(data.trial_set(&val_idx)?) };
    if run.tau.is_none() {
        train_cfg.loss.tau = trainer::tau_for(&model_cfg, &train_set)?;
    }
    let model = MrineModel::init(&model_cfg, train_cfg.seed)?;
    let mut log = match &args.log {
        Some(p) => Some(std::io::BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let mut log_err = None;
    let result = trainer::train_with(model, &train_set, val_set.as_ref(), &train_cfg, |rec| {
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(rec).expect("epoch record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                log_err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let config = run.canonical_json();
    let (model, records) = match result {
        Ok(r) => r,
        Err(TrainError::NonFinite { epoch, last_good }) => {
            let path = args.out.with_extension("last_good.json");
            Checkpoint::new(&last_good, config, &train_cfg, epoch - 1).save(&path)?;
            return Err(Failure::new(
                "train",
                format!("non-finite loss or parameters in epoch {epoch}; last good parameters saved to {}", path.display()),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    let last = records.last().expect("epoch 0 is always logged");
    Checkpoint::new(&model, config, &train_cfg, train_cfg.epochs).save(&args.out)?;
    Ok(serde_json::json!({
        "checkpoint": args.out,
        "seed": train_cfg.seed,
        "tau": train_cfg.loss.tau,
        "train_trials": train_idx.len(),
        "val_trials": val_idx.len(),
        "final_total": last.total,
        "final_val_total": last.val_total,
    }))
}

fn load_model(ckpt: &Path, data: &DatasetBundle) -> Result<MrineModel, Failure> {
    let model = Checkpoint::load(ckpt)?.model()?;
    check_dims(&model, data)?;
    Ok(model)
}

fn infer(args: &InferArgs) -> Outcome {
    check_prob("--drop-s", args.drop_s)?;
    check_prob("--drop-y", args.drop_y)?;
    let data = read_bundle(&args.data)?;
    let model = load_model(&args.ckpt, &data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let res = evalkit::infer_dropped(&model, &data.trial_set(&all)?, args.mode, args.drop_s, args.drop_y, args.seed)?;
    let n_x = model.config.n_x;
    let mut out = String::from("trial,t");
    (0..n_x).for_each(|j| out.push_str(&format!(",x{j}")));
    out.push('\n');
    for (info, x) in data.manifest.trials.iter().zip(&res.x) {
        for i in 0..x.rows {
            out.push_str(&format!("{},{}", info.id, i + res.offset));
            x.row(i).iter().for_each(|v| out.push_str(&format!(",{v:.16e}")));
            out.push('\n');
        }
    }
    write_atomic(&args.out, out.as_bytes())?;
    Ok(serde_json::json!({ "latents": args.out, "mode": args.mode.to_string(), "offset": res.offset }))
}

/// Latent rows per trial, keyed by manifest position, with their step
/// indices.
fn read_latents(path: &Path, data: &DatasetBundle) -> Result<Vec<(usize, Vec<usize>, Matrix)>, Failure> {
    let bad = |m: String| Failure::new("data", format!("{}: {m}", path.display()));
    let text = read_text(path)?;
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
    if head.len() < 3 || head[0] != "trial" || head[1] != "t" {
        return Err(bad("header must start with trial,t".into()));
    }
    let width = head.len() - 2;
    let mut out: Vec<(usize, Vec<usize>, Vec<f64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width + 2 {
            return Err(bad(format!("row {n} has {} fields", f.len())));
        }
        let trial = data.manifest.trials.iter().position(|t| t.id == f[0]).ok_or_else(|| bad(format!("unknown trial {:?}", f[0])))?;
        let t: usize = f[1].parse().map_err(|_| bad(format!("row {n}: bad step {:?}", f[1])))?;
        if t >= data.manifest.trials[trial].len {
            return Err(bad(format!("row {n}: step {t} beyond trial length")));
        }
        if out.last().is_none_or(|(i, ..)| *i != trial) {
            out.push((trial, Vec::new(), Vec::new()));
        }
        let entry = out.last_mut().expect("pushed above");
        entry.1.push(t);
        for v in &f[2..] {
            entry.2.push(v.parse().map_err(|_| bad(format!("row {n}: {v:?} is not a number")))?);
        }
    }
    Ok(out.into_iter().map(|(i, t, v)| (i, t.clone(), Matrix::from_vec(t.len(), width, v))).collect())
}

fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_vec(rows.len(), m.cols, rows.iter().flat_map(|&i| m.row(i).iter().copied()).collect())
}

fn decode(args: &DecodeArgs) -> Outcome {
    if args.target != "behavior" {
        return Err(Failure::new("usage", format!("unknown target {:?}; only \"behavior\" is available", args.target)));
    }
    if args.folds < 2 {
        return Err(Failure::new("usage", "--folds must be at least 2"));
    }
    let data = read_bundle(&args.data)?;
    let latents = read_latents(&args.latents, &data)?;
    if latents.len() < args.folds {
        return Err(Failure::new("data", format!("{} trials cannot form {} folds", latents.len(), args.folds)));
    }
    let x: Vec<Matrix> = latents.iter().map(|(_, _, m)| evalkit::align_timescales(m, args.align)).collect();
    let y: Vec<Matrix> =
        latents.iter().map(|(i, t, _)| evalkit::align_timescales(&select_rows(&data.behavior[*i], t), args.align)).collect();
    let mut report = MetricReport { mode: Some(format!("align={:?}", args.align)), ..MetricReport::default() };
    let mut per_dim = vec![0.0; data.manifest.behavior_dim];
    for k in 1..=args.folds {
        let (tr, te) = Fold { k, n: args.folds }.split(x.len());
        let pick = |v: &[Matrix], idx: &[usize]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let s = evalkit::decode_score(&pick(&x, &tr), &pick(&y, &tr), &pick(&x, &te), &pick(&y, &te))?;
        report.fold_cc.push(s.cc);
        report.fold_r2.push(s.r2);
        per_dim.iter_mut().zip(&s.per_dim_cc).for_each(|(a, v)| *a += v / args.folds as f64);
    }
    report.per_dim_cc = per_dim;
    report.mean_cc = Some(report.fold_cc.iter().sum::<f64>() / args.folds as f64);
    report.mean_r2 = Some(report.fold_r2.iter().sum::<f64>() / args.folds as f64);
    write_atomic(&args.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(serde_json::json!({ "report": args.out, "mean_cc": report.mean_cc, "mean_r2": report.mean_r2 }))
}

/// Model outputs (row `r` is step `r + offset`) and data at the observed
/// steps of their trials.
fn observed_pairs(out: &[Matrix], data: &[Matrix], masks: &[Vec<bool>], trials: &[usize], offset: usize) -> (Matrix, Matrix) {
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (m, &i) in out.iter().zip(trials) {
        let rows: Vec<usize> = (0..m.rows).filter(|&r| masks[i][r + offset]).collect();
        pred.push(select_rows(m, &rows));
        truth.push(select_rows(&data[i], &rows.iter().map(|r| r + offset).collect::<Vec<_>>()));
    }
    (evalkit::stack(&pred), evalkit::stack(&truth))
}

fn eval_recon(args: &EvalReconArgs) -> Outcome {
    check_prob("--drop-s", args.drop_s)?;
    check_prob("--drop-y", args.drop_y)?;
    let data = read_bundle(&args.data)?;
    let model = load_model(&args.ckpt, &data)?;
    let trials = match &args.fold {
        Some(f) => parse_fold(f)?.split(data.len()).1,
        None => (0..data.len()).collect(),
    };
    let res = evalkit::infer_dropped(&model, &data.trial_set(&trials)?, args.mode, args.drop_s, args.drop_y, args.seed)?;
    let off = res.offset;
    let mut report = MetricReport { mode: Some(args.mode.to_string()), ..MetricReport::default() };
    if let Some(rates) = &res.rates {
        let (pred, truth) = observed_pairs(rates, &data.spikes, &data.mask_s, &trials, off);
        report.auc = Some(evalkit::spike_recon_auc(&[pred], &[truth])?);
    }
    if let Some(means) = &res.means {
        let (pred, truth) = observed_pairs(means, &data.gaussian, &data.mask_y, &trials, off);
        report.gaussian_cc = Some(evalkit::mean_cc(&truth, &pred));
    }
    write_atomic(&args.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(serde_json::json!({ "report": args.out, "auc": report.auc, "gaussian_cc": report.gaussian_cc }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    drop_s: Vec<f64>,
    drop_y: Vec<f64>,
}

fn sweep(args: &SweepArgs) -> Outcome {
    let grid: Grid = serde_json::from_str(&read_text(&args.grid)?).map_err(|e| Failure::new("config", e))?;
    let points: Vec<(f64, f64)> = grid.drop_s.iter().flat_map(|&s| grid.drop_y.iter().map(move |&y| (s, y))).collect();
    if points.is_empty() {
        return Err(Failure::new("config", "empty grid"));
    }
    let data = read_bundle(&args.data)?;
    let model = load_model(&args.ckpt, &data)?;
    let (tr, te) = parse_fold(&args.fold)?.split(data.len());
    let sweep = evalkit::robustness_sweep(
        &model,
        &data.trial_set(&tr)?,
        &data.targets(&tr),
        &data.trial_set(&te)?,
        &data.targets(&te),
        &points,
        args.mode,
        args.seed,
    )?;
    let report = MetricReport { mode: Some(args.mode.to_string()), sweep, ..MetricReport::default() };
    write_atomic(&args.out, report.sweep_csv().as_bytes())?;
    Ok(serde_json::json!({ "sweep": args.out, "points": report.sweep.len() }))
}

fn run(cli: &Cli) -> Result<Record<'static>, Failure> {
    let version = env!("CARGO_PKG_VERSION");
    let (command, seed, hash, outputs) = match &cli.command {
        Command::Simulate(Simulate::Lorenz(a)) => {
            let hash = match &a.config {
                Some(p) => sha256_hex(read_text(p)?.as_bytes()),
                None => args_hash(a),
            };
            let out = simulate(a)?;
            ("simulate lorenz", out["seeds"][0].as_u64(), hash, out)
        }
        Command::Train(a) => {
            let run = RunConfig::from_json(&read_text(&a.config)?)?;
            let out = train(a)?;
            ("train", out["seed"].as_u64(), sha256_hex(run.canonical_json().as_bytes()), out)
        }
        Command::Infer(a) => ("infer", Some(a.seed), args_hash(a), infer(a)?),
        Command::Decode(a) => ("decode", None, args_hash(a), decode(a)?),
        Command::EvalRecon(a) => ("eval-recon", Some(a.seed), args_hash(a), eval_recon(a)?),
        Command::Sweep(a) => ("sweep", Some(a.seed), args_hash(a), sweep(a)?),
    };
    Ok(Record { command, version, seed, config_sha256: hash, outputs })
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim(), 2);
        }
    };
    match run(&cli) {
        Ok(record) => {
            println!("{}", serde_json::to_string(&record).expect("record serializes"));
            ExitCode::SUCCESS
        }
        Err(f) if f.kind == "usage" => fail(f.kind, &f.message, 2),
        Err(f) => fail(f.kind, &f.message, 1),
    }
}
