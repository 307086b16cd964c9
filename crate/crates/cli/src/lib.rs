//! Command implementations behind the `biper` binary.
//!
//! Every command returns a JSON summary; the binary prints it as one line.

pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use biper::bitkernel::{bench_gemm, write_bench_csv};
use biper::checkpoint::Checkpoint;
use biper::layers::{Model, Stage};
use biper::packing::PackedModel;
use biper::qe::{golden_section_max, log_grid, pdf_grid, qe_curve, qe_optimal_of_product, write_pdf_csv, LaplaceModel};
use biper::training::{ablate_omega, evaluate, train_stage1, train_stage2_from_checkpoint, write_ablation};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::{load_splits, ExperimentConfig};

/// Bad flags or flag combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "biper", version, about = "Binary neural networks with periodic binarization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// QE at the optimal scale over a log grid of frequencies.
    AnalyzeQe(AnalyzeQeArgs),
    /// Density of sin(omega0 w) for Laplace weights.
    PlotPdf(PlotPdfArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint or packed model.
    Eval(EvalArgs),
    /// Stage-1 frequency ablation.
    AblateOmega(AblateArgs),
    /// Bit-pack the binary layers of a checkpoint.
    Pack(PackArgs),
    /// Float vs packed GEMM throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct AnalyzeQeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub omega_min: Option<f64>,
    #[arg(long)]
    pub omega_max: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PlotPdfArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub omega0: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub stage: u8,
    /// Stage-1 checkpoint (required for stage 2).
    #[arg(long)]
    pub warm: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub omega0: Option<f64>,
    /// Run directory; defaults to the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Split {
    Train,
    #[default]
    Val,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    /// Checkpoint stem (or its .json manifest).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Treat `checkpoint` as a packed model and run the XNOR kernels.
    #[arg(long)]
    pub packed: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub omegas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output stem; writes `<out>.json` and `<out>.bin`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 256, 1024])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(command: Command) -> anyhow::Result<Value> {
    match command {
        Command::AnalyzeQe(a) => cmd_analyze_qe(&a),
        Command::PlotPdf(a) => cmd_plot_pdf(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::AblateOmega(a) => cmd_ablate_omega(&a),
        Command::Pack(a) => cmd_pack(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn positive(name: &str, v: f64) -> anyhow::Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(usage(format!("--{} must be positive and finite, got {}", name, v)))
    }
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

/// Writes `(omega0, gamma_opt, qe)` on a log grid and reports the maximum,
/// refined between the neighbours of the best grid point.
pub fn cmd_analyze_qe(a: &AnalyzeQeArgs) -> anyhow::Result<Value> {
    let cfg = load_config(a.config.as_deref())?.analytics;
    let b = positive("b", a.b.unwrap_or(cfg.b))?;
    let lo = positive("omega-min", a.omega_min.unwrap_or(cfg.omega_min))?;
    let hi = positive("omega-max", a.omega_max.unwrap_or(cfg.omega_max))?;
    let points = a.points.unwrap_or(cfg.points);
    if hi < lo {
        return Err(usage(format!("--omega-max {} is below --omega-min {}", hi, lo)));
    }
    if points == 0 {
        return Err(usage("--points must be at least 1"));
    }
    let model = LaplaceModel::new(b)?;
    let grid = log_grid(lo, hi, points)?;
    let curve = qe_curve(model, &grid)?;
    create_parent(&a.out)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["omega0", "gamma_opt", "qe"])?;
    for r in &curve {
        w.write_record(&[
            format!("{:.10e}", r.omega0),
            format!("{:.12e}", r.gamma),
            format!("{:.12e}", r.qe),
        ])?;
    }
    w.flush()?;
    let best = (0..curve.len())
        .max_by(|&i, &j| curve[i].qe.total_cmp(&curve[j].qe))
        .expect("non-empty grid");
    let (l, r) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let argmax = if r > l {
        golden_section_max(|w| qe_optimal_of_product(w * b), l, r, 1e-12 * r.max(1.0))
    } else {
        grid[best]
    };
    Ok(json!({
        "command": "analyze-qe",
        "rows": curve.len(),
        "b": b,
        "grid_argmax_omega0": grid[best],
        "argmax_omega0": argmax,
        "argmax_product": argmax * b,
        "max_qe": qe_optimal_of_product(argmax * b),
        "out": a.out,
    }))
}

pub fn cmd_plot_pdf(a: &PlotPdfArgs) -> anyhow::Result<Value> {
    let cfg = load_config(a.config.as_deref())?.analytics;
    let b = positive("b", a.b.unwrap_or(cfg.b))?;
    let omega0 = positive("omega0", a.omega0.unwrap_or(cfg.pdf_omega0))?;
    let points = a.points.unwrap_or(cfg.pdf_points);
    if points < 2 {
        return Err(usage("--points must be at least 2"));
    }
    let grid = pdf_grid(omega0, LaplaceModel::new(b)?, points)?;
    create_parent(&a.out)?;
    write_pdf_csv(fs::File::create(&a.out)?, &grid)?;
    Ok(json!({
        "command": "plot-pdf",
        "rows": grid.len(),
        "b": b,
        "omega0": omega0,
        "out": a.out,
    }))
}

fn stage_of(n: u8) -> anyhow::Result<Stage> {
    Stage::from_number(n).map_err(|_| usage(format!("--stage must be 1 or 2, got {}", n)))
}

/// Checkpoint metadata carries the effective config so `eval` can rebuild the data.
fn extra_metadata(cfg: &ExperimentConfig, stats: &biper::data::ChannelStats, acc: &biper::training::Accuracy) -> Value {
    json!({ "config": cfg, "stats": stats, "final_accuracy": acc })
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<Value> {
    let stage = stage_of(a.stage)?;
    match (stage, &a.warm) {
        (Stage::Stage2, None) => return Err(usage("stage 2 needs --warm <stage-1 checkpoint>")),
        (Stage::Stage1, Some(_)) => return Err(usage("--warm only applies to stage 2")),
        _ => {}
    }
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.omega0 {
        cfg.quant.omega0 = positive("omega0", w)?;
    }
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    let sc = cfg.stage_mut(stage);
    if let Some(v) = a.epochs {
        sc.epochs = v;
    }
    if let Some(v) = a.batch_size {
        sc.batch_size = v;
    }
    if let Some(v) = a.lr0 {
        sc.lr0 = v;
    }
    if let Some(v) = a.weight_decay {
        sc.weight_decay = v;
    }
    if let Some(v) = a.momentum {
        sc.momentum = v;
    }
    let tc = cfg.stage(stage).train_config(stage, cfg.seed);
    tc.validate().map_err(|e| usage(e.to_string()))?;
    cfg.quant.validate()?;

    let splits = load_splits(&cfg.data)?;
    let spec = cfg.model_spec(&splits.train)?;
    let (model, record) = match stage {
        Stage::Stage1 => train_stage1(spec, cfg.quant.clone(), &tc, &splits.train, &splits.val)?,
        Stage::Stage2 => {
            let warm_path = a.warm.as_ref().expect("checked above");
            let warm = Checkpoint::load(warm_path)
                .with_context(|| format!("cannot load warm start {}", warm_path.display()))?;
            train_stage2_from_checkpoint(&warm, &spec, &cfg.quant, &tc, &splits.train, &splits.val)?
        }
    };
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join(format!("stage{}_config.toml", stage.number())), cfg.to_toml()?)?;
    let stem = dir.join(format!("stage{}", stage.number()));
    model
        .to_checkpoint(stage, extra_metadata(&cfg, &splits.stats, &record.final_accuracy))?
        .save(&stem)?;
    record.save(&dir, &format!("stage{}_record", stage.number()))?;
    Ok(json!({
        "command": "train",
        "stage": stage.number(),
        "checkpoint": stem,
        "val_top1": record.final_accuracy.top1,
        "val_top5": record.final_accuracy.top5,
        "initial_qe": record.initial_qe(),
        "final_qe": record.final_qe(),
        "b_hat": record.final_b_hat(),
        "epochs": record.epochs.len(),
        "final_train_loss": record.epochs.last().map(|e| e.train_loss),
    }))
}

fn stored_config(metadata: &Value) -> anyhow::Result<ExperimentConfig> {
    let c = metadata
        .get("extra")
        .and_then(|e| e.get("config"))
        .ok_or_else(|| anyhow::anyhow!("checkpoint carries no experiment config"))?;
    Ok(serde_json::from_value(c.clone())?)
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<Value> {
    let stem = a.checkpoint.with_extension("");
    let (mut model, stage, packed, cfg) = if a.packed {
        let p = PackedModel::load(&stem)?;
        let cfg = stored_config(&p.metadata)?;
        let (m, w) = p.into_model()?;
        (m, Stage::Stage2, Some(w), cfg)
    } else {
        let ck = Checkpoint::load(&stem)?;
        let cfg = stored_config(&ck.metadata)?;
        let (m, s) = Model::from_checkpoint(&ck)?;
        (m, s, None, cfg)
    };
    let splits = load_splits(&cfg.data)?;
    let data = match a.split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
    };
    let acc = evaluate(&mut model, data, stage, packed.as_ref())?;
    Ok(json!({
        "command": "eval",
        "stage": stage.number(),
        "packed": a.packed,
        "samples": data.len(),
        "top1": acc.top1,
        "top5": acc.top5,
    }))
}

pub fn cmd_ablate_omega(a: &AblateArgs) -> anyhow::Result<Value> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(o) = &a.omegas {
        cfg.ablation.omegas = o.clone();
    }
    if let Some(s) = &a.seeds {
        cfg.ablation.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        cfg.ablation.stage1.epochs = e;
    }
    if let Some(l) = a.lr0 {
        cfg.ablation.stage1.lr0 = l;
    }
    if cfg.ablation.omegas.is_empty() || cfg.ablation.seeds.is_empty() {
        return Err(usage("ablation needs at least one omega and one seed"));
    }
    for &w in &cfg.ablation.omegas {
        positive("omegas", w)?;
    }
    let dir = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("ablation"));
    let tc = cfg.ablation.stage1.train_config(Stage::Stage1, cfg.seed);
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let splits = load_splits(&cfg.data)?;
    let spec = cfg.model_spec(&splits.train)?;
    let (runs, points) = ablate_omega(
        &spec,
        &cfg.quant,
        &tc,
        &cfg.ablation.omegas,
        &cfg.ablation.seeds,
        &splits.train,
        &splits.val,
    )?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    write_ablation(&dir, &runs, &points)?;
    Ok(json!({
        "command": "ablate-omega",
        "out": dir,
        "points": points,
    }))
}

pub fn cmd_pack(a: &PackArgs) -> anyhow::Result<Value> {
    let ck = Checkpoint::load(&a.checkpoint.with_extension(""))?;
    let (model, _) = Model::from_checkpoint(&ck)?;
    let extra = ck.metadata.get("extra").cloned().unwrap_or(Value::Null);
    let packed = PackedModel::from_model(&model, extra)?;
    let stats = packed.stats();
    packed.save(&a.out)?;
    Ok(json!({
        "command": "pack",
        "out": a.out,
        "binary_weights": stats.binary_weights,
        "packed_payload_bytes": stats.packed_payload_bytes,
        "float_bytes": stats.float_bytes,
        "scale_bytes": stats.scale_bytes,
        "ratio": stats.ratio(),
    }))
}

pub fn cmd_bench(a: &BenchArgs) -> anyhow::Result<Value> {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return Err(usage("--sizes must list positive sizes"));
    }
    let rows = bench_gemm(&a.sizes, a.reps, a.seed)?;
    create_parent(&a.out)?;
    write_bench_csv(fs::File::create(&a.out)?, &rows)?;
    Ok(json!({
        "command": "bench",
        "out": a.out,
        "rows": rows.iter().map(|r| json!({"n": r.n, "ratio": r.ratio})).collect::<Vec<_>>(),
    }))
}

/// Result of one invocation of the binary.
#[derive(Debug)]
pub struct Outcome {
    pub code: u8,
    pub stdout: String,
    pub stderr: String,
}

/// Parses `args` (program name first) and runs the command. Help and version
/// go to stdout with code 0; parse failures are usage errors.
pub fn execute<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let failed = |e: &anyhow::Error| Outcome {
        code: classify(e).1 as u8,
        stdout: String::new(),
        stderr: format!("{}\n", error_line(e)),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            return Outcome {
                code: 0,
                stdout: e.to_string(),
                stderr: String::new(),
            }
        }
        Err(e) if e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            return failed(&usage("missing subcommand; see --help"));
        }
        Err(e) => {
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            return failed(&usage(text.join(" ").trim_start_matches("error: ")));
        }
    };
    match run(cli.command) {
        Ok(summary) => Outcome {
            code: 0,
            stdout: format!("{}\n", summary),
            stderr: String::new(),
        },
        Err(e) => failed(&e),
    }
}

/// `(kind, exit code)` for the one-line error report.
pub fn classify(e: &anyhow::Error) -> (&'static str, i32) {
    if e.downcast_ref::<UsageError>().is_some() {
        return ("usage", 2);
    }
    if let Some(b) = e.downcast_ref::<biper::Error>() {
        let kind = match b {
            biper::Error::Shape { .. } => "shape",
            biper::Error::NonFinite(_) => "non-finite",
            biper::Error::TapeConsumed | biper::Error::NotScalar(_) => "internal",
            biper::Error::InvalidArgument(_) => "invalid-argument",
            biper::Error::Format { .. } => "format",
            biper::Error::Diverged(_) => "diverged",
            biper::Error::Checkpoint(_) => "checkpoint",
            biper::Error::Io(_) => "io",
            biper::Error::Json(_) | biper::Error::Csv(_) => "serialization",
        };
        return (kind, 1);
    }
    if e.downcast_ref::<toml::de::Error>().is_some() {
        return ("config", 1);
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return ("io", 1);
    }
    ("error", 1)
}

/// `error kind=<kind> message="<json-escaped message>"`
pub fn error_line(e: &anyhow::Error) -> String {
    let (kind, _) = classify(e);
    let msg = format!("{:#}", e);
    format!("error kind={} message={}", kind, serde_json::to_string(&msg).expect("string"))
}
