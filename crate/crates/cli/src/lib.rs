//! Command-line front end: `run`, `compare`, `synth` and `eval`.

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ocf_core::engine::{Engine, EngineConfig, Variant};
use ocf_core::eval::{emit_reports, evaluate, order_robustness, read_metrics, read_points, PointRow};
use ocf_core::experiment::{run_stream, RunOptions};
use ocf_core::gaussian::Vector;
use ocf_core::split::SplitCriterion;
use ocf_core::stream::{
    apply_ordering, load_dataset, save_dataset, synth_generate, Observation, Ordering2d, PatchLayout, SynthConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input data.
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Classify<T> {
    fn usage(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| CliError::Usage(e.into()))
    }
    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

#[derive(Parser, Debug)]
#[command(name = "ocf", version, about = "Online clustering of survey feature streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Stream one dataset through one variant and write reports.
    Run(RunArgs),
    /// Run several variants over all three survey orderings.
    Compare(CompareArgs),
    /// Write a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Recompute reports from saved predictions or a snapshot.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderArg {
    We,
    Ns,
    Random,
}

impl From<OrderArg> for Ordering2d {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::We => Ordering2d::We,
            OrderArg::Ns => Ordering2d::Ns,
            OrderArg::Random => Ordering2d::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Aic,
    Bic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Grid,
    Voronoi,
}

#[derive(Args, Debug, Default)]
pub struct SourceArgs {
    /// Dataset CSV (`id,x,y,label,f0..`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate a synthetic dataset instead of loading one.
    #[arg(long)]
    pub synth: bool,
    #[command(flatten)]
    pub synth_flags: SynthFlags,
}

#[derive(Args, Debug, Default, Clone)]
pub struct SynthFlags {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Comma-separated class proportions.
    #[arg(long, value_delimiter = ',')]
    pub proportions: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct EngineFlags {
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub eps_d: Option<f64>,
    #[arg(long)]
    pub eps_v: Option<f64>,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub engine: EngineFlags,
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
    /// oc-density | oc-hkmeans | sam-density | sam-random | sam-principal | only-merging | full-history
    #[arg(long)]
    pub variant: Option<String>,
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub engine: EngineFlags,
    /// Comma-separated variants (default: all seven).
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub synth_flags: SynthFlags,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// points.csv from an earlier run.
    #[arg(long, conflicts_with = "snapshot")]
    pub points: Option<PathBuf>,
    /// metrics.csv to carry into the regenerated report.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Snapshot directory; labels `--data` with the restored model.
    #[arg(long, requires = "data")]
    pub snapshot: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Config file contents; every field optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub engine: Option<serde_json::Value>,
    pub synth: Option<SynthConfig>,
    pub data: Option<PathBuf>,
    pub order: Option<OrderArg>,
}

/// Fully resolved run description, echoed to `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub engine: EngineConfig,
    pub data: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub order: OrderArg,
}

fn read_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .usage()?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .usage()
}

/// defaults < file < flags.
pub fn resolve_engine(file: &FileConfig, flags: &EngineFlags, variant: Option<&str>) -> CliResult<EngineConfig> {
    let mut cfg: EngineConfig = match &file.engine {
        Some(v) => serde_json::from_value(v.clone()).context("engine section of config").usage()?,
        None => EngineConfig::default(),
    };
    if let Some(v) = flags.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.reps {
        cfg.n_sub = v;
    }
    if let Some(v) = flags.eps_d {
        cfg.merge.eps_d = v;
    }
    if let Some(v) = flags.eps_v {
        cfg.merge.eps_v = v;
    }
    if let Some(c) = flags.criterion {
        cfg.split.criterion = match c {
            CriterionArg::Aic => SplitCriterion::Aic,
            CriterionArg::Bic => SplitCriterion::Bic,
        };
    }
    if let Some(v) = flags.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = flags.k_max {
        cfg.k_max = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = variant {
        cfg.variant = v.parse().usage()?;
    }
    cfg.validate().usage()?;
    Ok(cfg)
}

pub fn resolve_synth(base: Option<&SynthConfig>, flags: &SynthFlags) -> CliResult<SynthConfig> {
    let mut cfg = base.cloned().unwrap_or_default();
    if let Some(v) = flags.classes {
        cfg.n_classes = v;
        if flags.proportions.is_none() && cfg.class_proportions.len() != v {
            cfg.class_proportions = vec![1.0 / v as f64; v];
        }
    }
    if let Some(v) = &flags.proportions {
        cfg.class_proportions = v.clone();
        if flags.classes.is_none() {
            cfg.n_classes = v.len();
        }
    }
    if let Some(v) = flags.n_points {
        cfg.n_points = v;
    }
    if let Some(v) = flags.layout {
        cfg.patch_layout = match v {
            LayoutArg::Grid => PatchLayout::Grid,
            LayoutArg::Voronoi => PatchLayout::Voronoi,
        };
    }
    if let Some(v) = flags.separation {
        cfg.feature_separation = v;
    }
    if let Some(v) = flags.noise {
        cfg.feature_noise = v;
    }
    if let Some(v) = flags.dim {
        cfg.d = v;
    }
    if let Some(v) = flags.synth_seed {
        cfg.seed = v;
    }
    cfg.validate().usage()?;
    Ok(cfg)
}

struct Source {
    data: Option<PathBuf>,
    synth: Option<SynthConfig>,
    observations: Vec<Observation>,
}

fn load_source(file: &FileConfig, src: &SourceArgs) -> CliResult<Source> {
    let data = src.data.clone().or_else(|| if src.synth { None } else { file.data.clone() });
    let want_synth = src.synth || (data.is_none() && file.synth.is_some());
    match (data, want_synth) {
        (Some(_), true) => Err(CliError::Usage(anyhow!("give either --data or --synth, not both"))),
        (None, false) => Err(CliError::Usage(anyhow!("no data source: pass --data PATH or --synth"))),
        (Some(path), false) => {
            let observations = load_dataset(&path)
                .with_context(|| format!("loading {}", path.display()))
                .usage()?;
            if observations.is_empty() {
                return Err(CliError::Usage(anyhow!("{} holds no observations", path.display())));
            }
            Ok(Source {
                data: Some(path),
                synth: None,
                observations,
            })
        }
        (None, true) => {
            let cfg = resolve_synth(file.synth.as_ref(), &src.synth_flags)?;
            let observations = synth_generate(&cfg).usage()?;
            Ok(Source {
                data: None,
                synth: Some(cfg),
                observations,
            })
        }
    }
}

fn order(obs: &[Observation], ordering: Ordering2d, seed: u64) -> Vec<Observation> {
    apply_ordering(obs, ordering, seed)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).runtime()?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn create_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .usage()
}

pub fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let file = read_file_config(args.config.as_deref())?;
    let engine = resolve_engine(&file, &args.engine, args.variant.as_deref())?;
    let source = load_source(&file, &args.source)?;
    let order_arg = args.order.or(file.order).unwrap_or(OrderArg::We);
    create_out(&args.out)?;
    let effective = EffectiveConfig {
        engine: engine.clone(),
        data: source.data.clone(),
        synth: source.synth.clone(),
        order: order_arg,
    };
    write_json(&args.out.join("config.json"), &effective)?;

    let stream = order(&source.observations, order_arg.into(), engine.seed);
    let run = run_stream(&stream, &engine, RunOptions::default()).runtime()?;
    let report = run.report(&stream).runtime()?;
    emit_reports(&report, &args.out).runtime()?;
    run.engine.snapshot(args.out.join("snapshot")).runtime()?;

    let failures: usize = run.events.iter().map(|e| e.failures.len()).sum();
    let total_ms: f64 = run.metrics.iter().map(|m| m.wall_time_ms).sum();
    eprintln!(
        "{}: {} observations, {} triggers, {} clusters, F1 {}, {:.0} ms engine time{}",
        engine.variant,
        stream.len(),
        run.events.len(),
        run.engine.model().len(),
        report.macro_f1().map_or("n/a".into(), |f| format!("{f:.4}")),
        total_ms,
        if failures > 0 {
            format!(", {failures} step failures")
        } else {
            String::new()
        }
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub ordering: String,
    pub trigger_index: u64,
    pub cumulative: u64,
    pub f1: Option<f64>,
    pub wall_time_ms: f64,
}

pub fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let file = read_file_config(args.config.as_deref())?;
    let base = resolve_engine(&file, &args.engine, None)?;
    let variants: Vec<Variant> = match &args.variants {
        Some(names) => names.iter().map(|n| n.trim().parse()).collect::<Result<_, _>>().usage()?,
        None => Variant::ALL.to_vec(),
    };
    let source = load_source(&file, &args.source)?;
    create_out(&args.out)?;
    write_json(
        &args.out.join("config.json"),
        &serde_json::json!({
            "engine": base,
            "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
            "data": source.data,
            "synth": source.synth,
        }),
    )?;

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut failed = Vec::new();
    for &variant in &variants {
        let cfg = EngineConfig { variant, ..base.clone() };
        let mut finals = Vec::new();
        for ordering in Ordering2d::ALL {
            let stream = order(&source.observations, ordering, cfg.seed);
            match run_stream(&stream, &cfg, RunOptions::default()) {
                Ok(run) => {
                    eprintln!(
                        "{variant} / {}: {} clusters, F1 {}",
                        ordering.name(),
                        run.engine.model().len(),
                        run.metrics
                            .last()
                            .and_then(|m| m.f1)
                            .map_or("n/a".into(), |f| format!("{f:.4}"))
                    );
                    if let Some(f) = run.metrics.last().and_then(|m| m.f1) {
                        finals.push(f);
                    }
                    rows.extend(run.metrics.iter().map(|m| CompareRow {
                        variant: variant.name().into(),
                        ordering: ordering.name().into(),
                        trigger_index: m.trigger_index,
                        cumulative: m.cumulative,
                        f1: m.f1,
                        wall_time_ms: m.wall_time_ms,
                    }));
                }
                Err(e) => {
                    eprintln!("{variant} / {}: failed: {e}", ordering.name());
                    failed.push(format!("{variant}/{}", ordering.name()));
                }
            }
        }
        let stats = order_robustness(&finals).ok();
        summary.push((variant, finals.len(), stats));
    }

    let mut wtr = csv::Writer::from_path(args.out.join("compare.csv")).runtime()?;
    for r in &rows {
        wtr.serialize(r).runtime()?;
    }
    if rows.is_empty() {
        wtr.write_record(["variant", "ordering", "trigger_index", "cumulative", "f1", "wall_time_ms"])
            .runtime()?;
    }
    wtr.flush().runtime()?;

    let mut wtr = csv::Writer::from_path(args.out.join("summary.csv")).runtime()?;
    wtr.write_record(["variant", "runs", "mean_f1", "std_f1"]).runtime()?;
    for (v, runs, stats) in &summary {
        let (m, s) = stats.map_or((String::new(), String::new()), |(m, s)| (m.to_string(), s.to_string()));
        wtr.write_record([v.name().to_string(), runs.to_string(), m.clone(), s.clone()])
            .runtime()?;
        eprintln!(
            "{:<14} mean F1 {:>8}  std {:>8}",
            v.name(),
            stats.map_or("n/a".into(), |(m, _)| format!("{m:.4}")),
            stats.map_or("n/a".into(), |(_, s)| format!("{s:.4}"))
        );
    }
    wtr.flush().runtime()?;

    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("failed runs: {}", failed.join(", "))))
    }
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let file = read_file_config(args.config.as_deref())?;
    let cfg = resolve_synth(file.synth.as_ref(), &args.synth_flags)?;
    let obs = synth_generate(&cfg).usage()?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(parent)?;
    }
    save_dataset(&args.out, &obs)
        .with_context(|| format!("writing {}", args.out.display()))
        .runtime()?;
    eprintln!("wrote {} observations ({} classes, d = {}) to {}", obs.len(), cfg.n_classes, cfg.d, args.out.display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let points: Vec<PointRow> = match (&args.points, &args.snapshot, &args.data) {
        (Some(p), None, _) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display())).usage()?;
            read_points(f).with_context(|| format!("reading {}", p.display())).usage()?
        }
        (None, Some(dir), Some(data)) => {
            let engine = Engine::restore(dir)
                .with_context(|| format!("restoring {}", dir.display()))
                .usage()?;
            let obs = load_dataset(data).with_context(|| format!("loading {}", data.display())).usage()?;
            let feats: Vec<Vector> = obs.iter().map(|o| Vector::from_column_slice(&o.feature)).collect();
            let pred = engine.infer_batch(&feats).usage()?;
            obs.iter()
                .zip(pred)
                .map(|(o, pred)| PointRow {
                    id: o.id.clone(),
                    x: o.easting,
                    y: o.northing,
                    truth: o.label,
                    pred,
                })
                .collect()
        }
        _ => return Err(CliError::Usage(anyhow!("pass --points, or --snapshot with --data"))),
    };
    if points.is_empty() {
        return Err(CliError::Usage(anyhow!("no predictions to evaluate")));
    }
    let timing = match &args.metrics {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display())).usage()?;
            read_metrics(f).usage()?
        }
        None => Vec::new(),
    };
    let report = evaluate(points, timing).usage()?;
    emit_reports(&report, &args.out).runtime()?;
    match report.macro_f1() {
        Some(f) => eprintln!(
            "{} points, {} clusters, macro F1 {f:.4}, micro F1 {:.4}",
            report.points.len(),
            report.cluster_sizes.len(),
            report.f1.as_ref().map_or(0.0, |s| s.micro_f1)
        ),
        None => eprintln!(
            "{} points, {} clusters, no ground truth: entropy-only report",
            report.points.len(),
            report.cluster_sizes.len()
        ),
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
