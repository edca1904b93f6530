//! Headless entry points: pretraining, adaptation runs, sweeps, evaluation,
//! dataset rendering and the HTTP service.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use wstta_core::adaptation::Method;
use wstta_core::detector::train::{train, LabeledImage, StepLosses, TrainConfig};
use wstta_core::detector::{DetectorConfig, DetectorModel};
use wstta_core::eval::EvalResult;
use wstta_core::scene::{
    export_frames, generate_split, DomainSpec, SceneConfig, Split, CATEGORIES,
};
use wstta_core::session::{evaluate_split, run_session, RunReport, SessionConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    /// A result fell short of a requested threshold.
    #[error("gate failed: {0}")]
    Gate(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Gate(_) => 3,
        }
    }
}

impl From<wstta_core::Error> for CliError {
    fn from(e: wstta_core::Error) -> Self {
        match e {
            wstta_core::Error::Usage(m) => CliError::Usage(m),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "wstta", version, about = "Weakly supervised test-time adaptation of a small detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the detector on source-domain frames.
    Pretrain(PretrainArgs),
    /// Stream target frames through one adaptation method.
    Adapt(AdaptArgs),
    /// Repeat adaptation runs over a list of values of one setting.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Write frames and annotations of a split to disk.
    Render(RenderArgs),
    /// Serve sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    /// Initialization and minibatch seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Source training frames.
    #[arg(long, default_value_t = 2000)]
    pub frames: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Loss curve CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Source-test frames for the post-training evaluation (0 skips it).
    #[arg(long, default_value_t = 200)]
    pub eval_frames: usize,
    /// Exit with status 3 when source-test mAP (0-1) is below this.
    #[arg(long)]
    pub min_source_map: Option<f64>,
}

/// Run settings shared by `adapt`, `sweep` and `serve`. A JSON config file
/// uses the same names (snake_case); flags win over the file.
#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// source | bn-stats | dua | wstta | oracle-ft
    #[arg(long)]
    pub method: Option<String>,
    /// Stream frames to adapt on.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Weak-label bit flip probability.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Re-shuffle the selected frames with this seed.
    #[arg(long)]
    pub order_seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Target-test evaluation cadence in steps (0: final only).
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub test_frames: Option<usize>,
}

impl RunOptions {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Fields set in `self` win.
    pub fn or(self, other: RunOptions) -> RunOptions {
        RunOptions {
            method: self.method.or(other.method),
            frames: self.frames.or(other.frames),
            omega: self.omega.or(other.omega),
            delta: self.delta.or(other.delta),
            lambda: self.lambda.or(other.lambda),
            alpha: self.alpha.or(other.alpha),
            tau: self.tau.or(other.tau),
            noise: self.noise.or(other.noise),
            seed: self.seed.or(other.seed),
            order_seed: self.order_seed.or(other.order_seed),
            data_seed: self.data_seed.or(other.data_seed),
            eval_every: self.eval_every.or(other.eval_every),
            test_frames: self.test_frames.or(other.test_frames),
        }
    }

    /// Flags merged over the optional config file.
    pub fn resolve(self, config: Option<&Path>) -> Result<RunOptions> {
        Ok(match config {
            Some(p) => self.or(RunOptions::load(p)?),
            None => self,
        })
    }

    pub fn session_config(&self) -> Result<SessionConfig> {
        let mut c = SessionConfig::default();
        if let Some(m) = &self.method {
            c.adaptation.method = Method::parse(m)?;
        }
        let a = &mut c.adaptation;
        for (dst, src) in [
            (&mut a.omega, self.omega),
            (&mut a.delta, self.delta),
            (&mut a.lambda, self.lambda),
            (&mut a.alpha, self.alpha),
            (&mut a.tau, self.tau),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        c.budget = self.frames.unwrap_or(c.budget);
        c.noise = self.noise.unwrap_or(c.noise);
        c.seed = self.seed.unwrap_or(c.seed);
        c.order_seed = self.order_seed.or(c.order_seed);
        c.data_seed = self.data_seed.unwrap_or(c.data_seed);
        c.eval_every = self.eval_every.unwrap_or(c.eval_every);
        c.test_frames = self.test_frames.unwrap_or(c.test_frames);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub run: RunOptions,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// NDJSON report; a CSV with the same stem is written next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vary {
    Noise,
    Omega,
    Order,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub vary: Vary,
    /// Comma-separated values (not used with `--vary order`).
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Repeat r runs with seed `seed_base + r` (order sweeps: order seed).
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    #[command(flatten)]
    pub run: RunOptions,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for per-run reports, `runs.ndjson` and `summary.csv`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// source-train | source-test | target-stream | target-test
    #[arg(long, default_value = "target-test")]
    pub split: String,
    /// Frames to evaluate (default: the whole split).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

impl DomainArg {
    fn spec(self) -> DomainSpec {
        match self {
            DomainArg::Source => DomainSpec::SOURCE,
            DomainArg::Target => DomainSpec::TARGET,
        }
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = DomainArg::Target)]
    pub domain: DomainArg,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Scene generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split whose frame ids are rendered (default: source-train for the
    /// source domain, target-stream for the target domain).
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Checkpoint used by sessions that do not name one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON run options used as session defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Event logs and checkpoints.
    #[arg(long, default_value = "wstta-data")]
    pub data_dir: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

pub fn load_model(path: &Path) -> Result<DetectorModel> {
    DetectorModel::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Pretrains the reference detector on source-train frames. Returns the model
/// and the per-step losses.
pub fn pretrain(
    steps: usize,
    seed: u64,
    data_seed: u64,
    frames: usize,
    lr: f64,
) -> Result<(DetectorModel, Vec<StepLosses>)> {
    let scene = SceneConfig::default();
    let data = generate_split(&scene, data_seed, Split::SourceTrain, frames, &DomainSpec::SOURCE)?;
    let labeled: Vec<LabeledImage<'_>> = data
        .iter()
        .map(|f| LabeledImage {
            image: &f.image,
            targets: &f.gt_boxes,
        })
        .collect();
    let init = DetectorModel::new(DetectorConfig::reference(), seed, &CATEGORIES)?;
    let tc = TrainConfig {
        steps,
        learning_rate: lr,
        seed,
        ..TrainConfig::default()
    };
    let mut curve = Vec::with_capacity(steps);
    let (model, _) = train(&init, &labeled, &tc, |step, l| {
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.4}", l.total);
        }
        curve.push(l.clone());
    })?;
    Ok((model, curve))
}

pub fn write_curve(path: &Path, curve: &[StepLosses]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "step,rpn_cls,rpn_box,roi_cls,total")?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(w, "{i},{},{},{},{}", l.rpn_cls, l.rpn_box, l.roi_cls, l.total)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let (model, curve) = pretrain(a.steps, a.seed, a.data_seed, a.frames, a.lr)?;
    model
        .save(&a.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    let curve_path = a.curve.unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    write_curve(&curve_path, &curve)?;
    println!("checkpoint {} ({})", a.out.display(), model.digest());
    println!("loss curve {}", curve_path.display());
    if a.eval_frames > 0 {
        let res = eval_model(&model, Split::SourceTest, a.eval_frames, a.data_seed)?;
        println!("source-test mAP50 {:.4}", res.map50);
        if let Some(min) = a.min_source_map {
            if res.map50 < min {
                return Err(CliError::Gate(format!(
                    "source-test mAP {:.4} is below {min}",
                    res.map50
                )));
            }
        }
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `path` (NDJSON) and the CSV next to it.
pub fn write_report(report: &RunReport, path: &Path) -> Result<PathBuf> {
    let mut w = create(path)?;
    report.write_ndjson(&mut w)?;
    w.flush()?;
    let csv = path.with_extension("csv");
    let mut w = create(&csv)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(csv)
}

fn fmt_map(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |m| format!("{:.2}", 100.0 * m))
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let config = a.run.resolve(a.config.as_deref())?.session_config()?;
    let model = load_model(&a.model)?;
    let report = run_session(model, config)?;
    if let Some(path) = &a.report {
        let csv = write_report(&report, path)?;
        println!("report {} / {}", path.display(), csv.display());
    }
    println!(
        "method {} frames {} errors {} final mAP50 {} online mAP50 {} wall {:.1}s",
        report.config.adaptation.method.name(),
        report.steps.len(),
        report.errors.len(),
        fmt_map(report.final_map()),
        fmt_map(report.online_map()),
        report.wall_clock_secs
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub vary: Vary,
    /// `None` in order sweeps.
    pub value: Option<f64>,
    pub repeat: usize,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: Option<f64>,
    /// Final target-test mAP50 of each repeat, 0-1 scale.
    pub maps: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single repeat).
    pub std: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Configurations of every (value, repeat) pair, in output order.
pub fn sweep_configs(
    base: &SessionConfig,
    vary: Vary,
    values: &[f64],
    repeats: usize,
    seed_base: u64,
) -> Result<Vec<(Option<f64>, usize, SessionConfig)>> {
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let values: Vec<Option<f64>> = match vary {
        Vary::Order if !values.is_empty() => {
            return Err(CliError::Usage("--vary order takes no --values".into()))
        }
        Vary::Order => vec![None],
        _ if values.is_empty() => return Err(CliError::Usage("--values is empty".into())),
        _ => values.iter().copied().map(Some).collect(),
    };
    let mut out = Vec::new();
    for v in values {
        for r in 0..repeats {
            let mut c = base.clone();
            let seed = seed_base + r as u64;
            match (vary, v) {
                (Vary::Noise, Some(x)) => {
                    c.noise = x;
                    c.seed = seed;
                }
                (Vary::Omega, Some(x)) => {
                    c.adaptation.omega = x;
                    c.seed = seed;
                }
                _ => c.order_seed = Some(seed),
            }
            c.validate()?;
            out.push((v, r, c));
        }
    }
    Ok(out)
}

/// Runs every configuration on `jobs` worker threads (0: rayon default).
/// Results keep the input order.
pub fn run_many(
    model: &DetectorModel,
    configs: Vec<SessionConfig>,
    jobs: usize,
) -> Result<Vec<RunReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| {
        configs
            .into_par_iter()
            .map(|c| run_session(model.clone(), c).map_err(CliError::from))
            .collect()
    })
}

pub fn sweep(
    model: &DetectorModel,
    base: &SessionConfig,
    vary: Vary,
    values: &[f64],
    repeats: usize,
    seed_base: u64,
    jobs: usize,
) -> Result<(Vec<SweepRow>, Vec<SweepRun>)> {
    let plan = sweep_configs(base, vary, values, repeats, seed_base)?;
    let reports = run_many(model, plan.iter().map(|(_, _, c)| c.clone()).collect(), jobs)?;
    let runs: Vec<SweepRun> = plan
        .into_iter()
        .zip(reports)
        .map(|((value, repeat, _), report)| SweepRun {
            vary,
            value,
            repeat,
            report,
        })
        .collect();
    let mut rows: Vec<SweepRow> = Vec::new();
    for run in &runs {
        let map = run.report.final_map().unwrap_or(f64::NAN);
        match rows.last_mut() {
            Some(row) if row.value == run.value && run.repeat > 0 => row.maps.push(map),
            _ => rows.push(SweepRow {
                value: run.value,
                maps: vec![map],
                mean: 0.0,
                std: 0.0,
            }),
        }
    }
    for row in &mut rows {
        (row.mean, row.std) = mean_std(&row.maps);
    }
    Ok((rows, runs))
}

/// One line of `runs.ndjson`.
#[derive(Serialize)]
struct RunLine<'a> {
    vary: Vary,
    value: Option<f64>,
    repeat: usize,
    seed: u64,
    order_seed: Option<u64>,
    final_map50: Option<f64>,
    online_map50: Option<f64>,
    momentum: Vec<f64>,
    report: &'a str,
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow], runs: &[SweepRun]) -> Result<()> {
    let run_dir = dir.join("runs");
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", run_dir.display())))?;
    let mut index = create(&dir.join("runs.ndjson"))?;
    for run in runs {
        let name = match run.value {
            Some(v) => format!("{v}-r{}.ndjson", run.repeat),
            None => format!("r{}.ndjson", run.repeat),
        };
        write_report(&run.report, &run_dir.join(&name))?;
        let line = RunLine {
            vary: run.vary,
            value: run.value,
            repeat: run.repeat,
            seed: run.report.config.seed,
            order_seed: run.report.config.order_seed,
            final_map50: run.report.final_map(),
            online_map50: run.report.online_map(),
            momentum: run.report.momentum_trajectory(),
            report: &name,
        };
        serde_json::to_writer(&mut index, &line).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(index)?;
    }
    index.flush()?;
    let mut csv = create(&dir.join("summary.csv"))?;
    writeln!(csv, "value,repeats,mean_map50,std_map50")?;
    for row in rows {
        let v = row.value.map_or_else(String::new, |v| v.to_string());
        writeln!(csv, "{v},{},{},{}", row.maps.len(), row.mean, row.std)?;
    }
    csv.flush()?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = a.run.resolve(a.config.as_deref())?.session_config()?;
    let model = load_model(&a.model)?;
    let (rows, runs) = sweep(&model, &base, a.vary, &a.values, a.repeats, a.seed_base, a.jobs)?;
    if let Some(dir) = &a.out_dir {
        write_sweep(dir, &rows, &runs)?;
    }
    println!("{:>10}  {:>7}  mAP50 (mean ± std)", format!("{:?}", a.vary).to_lowercase(), "repeats");
    for row in &rows {
        let v = row.value.map_or_else(|| "shuffled".into(), |v| v.to_string());
        println!(
            "{v:>10}  {:>7}  {:.2} ± {:.2}",
            row.maps.len(),
            100.0 * row.mean,
            100.0 * row.std
        );
    }
    Ok(())
}

pub fn eval_model(model: &DetectorModel, split: Split, count: usize, data_seed: u64) -> Result<EvalResult> {
    let defaults = SessionConfig::default().adaptation;
    Ok(evaluate_split(
        model,
        &SceneConfig::default(),
        data_seed,
        split,
        count,
        &split.domain(),
        defaults.score_threshold,
        defaults.nms_iou,
    )?)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let split = Split::parse(&a.split)?;
    let model = load_model(&a.model)?;
    let count = a.count.unwrap_or(split.default_count());
    let res = eval_model(&model, split, count, a.data_seed)?;
    let out = serde_json::json!({
        "split": split.name(),
        "frames": count,
        "categories": model.categories,
        "result": res,
    });
    println!("{out}");
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let split = match &a.split {
        Some(s) => Split::parse(s)?,
        None if a.domain == DomainArg::Source => Split::SourceTrain,
        None => Split::TargetStream,
    };
    let frames = generate_split(&SceneConfig::default(), a.seed, split, a.count, &a.domain.spec())?;
    export_frames(&frames, &a.out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.out_dir.display())))?;
    println!("wrote {} frames to {}", frames.len(), a.out_dir.display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => RunOptions::load(p)?.session_config()?,
        None => SessionConfig::default(),
    };
    if let Some(m) = &a.model {
        load_model(m)?;
    }
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address: {e}")))?;
    let config = wstta_server::ServerConfig {
        model: a.model,
        base,
        data_dir: a.data_dir,
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(wstta_server::serve(config, addr))?;
    Ok(())
}
