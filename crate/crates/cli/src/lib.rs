//! Experiment front end for the `frkan` library.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 a knot audit outside its proven bounds.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use config::{parse_value, resolve, CommandKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0:#}")]
    Validation(anyhow::Error),
    #[error("runtime failure: {0:#}")]
    Runtime(anyhow::Error),
    #[error("bound check failed: {0}")]
    BoundCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::BoundCheck(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "frkan", version, about = "Free-knot KAN experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on a task and write metrics and a checkpoint.
    Train(Flags),
    /// Train on a Feynman equation (or any regression task).
    Approx(Flags),
    /// Count the breakpoints of a checkpoint along a 1-D slice.
    Knots(Flags),
    /// Train identical networks that differ only in grid range.
    Stability(Flags),
    /// Itemized parameter counts for an architecture.
    Paramcount(Flags),
    /// Sample one learned activation curve to CSV.
    ExportActivation(Flags),
    /// Run whatever command the config file names.
    Run(Flags),
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// JSON config file, nested or with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// Layer descriptor such as `in:2 -> frkan:64 -> frkan:1`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long = "G")]
    pub intervals: Option<usize>,
    #[arg(long = "K")]
    pub order: Option<usize>,
    /// Grid range `a,b`.
    #[arg(long, allow_hyphen_values = true)]
    pub range: Option<String>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long = "Z")]
    pub shift_scale: Option<f64>,
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long)]
    pub no_silu: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Step cap for training, and the step count for `stability`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub equation: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// CSV or IDX image file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Grid ranges for `stability`, each `a,b`.
    #[arg(long, allow_hyphen_values = true)]
    pub ranges: Vec<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Audit the two-layer sawtooth construction.
    #[arg(long)]
    pub sawtooth: bool,
    #[arg(long)]
    pub slice_dim: Option<usize>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub unit: Option<usize>,
    /// Scan lattice size for `knots`, curve points for `export-activation`.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Arbitrary override `key=value`, value parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_pair(raw: &str, what: &str) -> Result<[f64; 2], CliError> {
    let bad = || CliError::Validation(anyhow::anyhow!("{what} `{raw}` must be `a,b`"));
    let (a, b) = raw.split_once(',').ok_or_else(bad)?;
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    Ok([a, b])
}

impl Flags {
    /// Overrides in application order; `--set` entries come last.
    pub fn overrides(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut o: Vec<(String, Value)> = Vec::new();
        let mut put = |k: &str, v: Value| o.push((k.to_string(), v));
        if let Some(v) = &self.model {
            put("model.kind", json!(v));
        }
        if let Some(v) = &self.arch {
            put("model.arch", json!(v));
        }
        if let Some(v) = self.hidden {
            put("model.hidden", json!(v));
        }
        if let Some(v) = self.intervals {
            put("model.grid.G", json!(v));
        }
        if let Some(v) = self.order {
            put("model.grid.K", json!(v));
        }
        if let Some(r) = &self.range {
            let [a, b] = parse_pair(r, "--range")?;
            put("model.grid.a", json!(a));
            put("model.grid.b", json!(b));
        }
        if let Some(v) = self.groups {
            put("model.groups", json!(v));
        }
        if let Some(v) = self.shift_scale {
            put("model.Z", json!(v));
        }
        if let Some(v) = &self.norm {
            put("model.norm", json!(v));
        }
        if self.no_silu {
            put("model.silu", json!(false));
            put("stability.silu", json!(false));
        }
        if let Some(v) = self.lambda {
            put("train.lambda", json!(v));
        }
        if let Some(v) = self.lr {
            put("train.lr", json!(v));
            put("stability.lr", json!(v));
        }
        if let Some(v) = self.epochs {
            put("train.epochs", json!(v));
        }
        if let Some(v) = self.batch {
            put("train.batch", json!(v));
        }
        if let Some(v) = self.steps {
            put("train.max_steps", json!(v));
            put("stability.steps", json!(v));
        }
        if let Some(v) = self.seed {
            put("seed", json!(v));
        }
        if let Some(v) = &self.task {
            put("task.kind", json!(v));
        }
        if let Some(v) = &self.equation {
            put("task.equation", json!(v));
        }
        if let Some(v) = self.n {
            put("task.n", json!(v));
        }
        if let Some(v) = &self.data {
            put("task.path", json!(v));
        }
        if let Some(v) = &self.labels {
            put("task.labels_path", json!(v));
        }
        if !self.ranges.is_empty() {
            let rs = self
                .ranges
                .iter()
                .map(|r| parse_pair(r, "--ranges"))
                .collect::<Result<Vec<_>, _>>()?;
            put("stability.ranges", json!(rs));
        }
        if let Some(v) = self.depth {
            put("stability.depth", json!(v));
        }
        if let Some(v) = self.width {
            put("stability.width", json!(v));
        }
        if let Some(v) = &self.checkpoint {
            put("knots.checkpoint", json!(v));
            put("export.checkpoint", json!(v));
        }
        if self.sawtooth {
            put("knots.sawtooth", json!(true));
        }
        if let Some(v) = self.slice_dim {
            put("knots.slice_dim", json!(v));
        }
        if let Some(v) = self.layer {
            put("export.layer", json!(v));
        }
        if let Some(v) = self.unit {
            put("export.unit", json!(v));
        }
        if let Some(v) = self.samples {
            put("knots.samples", json!(v));
            put("export.samples", json!(v));
        }
        if let Some(v) = &self.out {
            put("out", json!(v));
        }
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                CliError::Validation(anyhow::anyhow!("--set `{s}` must be `key=value`"))
            })?;
            put(k.trim(), parse_value(v.trim()));
        }
        Ok(o)
    }
}

fn looks_like_pair(raw: &str) -> bool {
    raw.split_once(',')
        .is_some_and(|(a, b)| a.trim().parse::<f64>().is_ok() && b.trim().parse::<f64>().is_ok())
}

/// Rewrites `--ranges a,b c,d` as `--ranges=a,b --ranges=c,d` so that
/// negative pairs are not mistaken for flags and the list stops at the
/// next real flag.
pub fn expand_ranges(args: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len());
    let mut in_ranges = false;
    for a in args {
        let text = a.to_str().map(str::to_owned);
        match text.as_deref() {
            Some("--ranges") => in_ranges = true,
            Some(t) if in_ranges && looks_like_pair(t) => {
                out.push(OsString::from(format!("--ranges={t}")))
            }
            _ => {
                in_ranges = false;
                out.push(a);
            }
        }
    }
    out
}

/// Sizes the global rayon pool from `FRKAN_THREADS` when set.
fn init_threads() {
    if let Some(n) = std::env::var("FRKAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

/// Parses arguments, runs the command, and returns the summary.
pub fn run_args<I, T>(args: I) -> Result<Value, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = expand_ranges(args.into_iter().map(Into::into).collect());
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Validation(e.into()))?;
    let (kind, flags) = match cli.command {
        Command::Train(f) => (Some(CommandKind::Train), f),
        Command::Approx(f) => (Some(CommandKind::Approx), f),
        Command::Knots(f) => (Some(CommandKind::Knots), f),
        Command::Stability(f) => (Some(CommandKind::Stability), f),
        Command::Paramcount(f) => (Some(CommandKind::Paramcount), f),
        Command::ExportActivation(f) => (Some(CommandKind::ExportActivation), f),
        Command::Run(f) => (None, f),
    };
    if kind.is_none() && flags.config.is_none() {
        return Err(CliError::Validation(anyhow::anyhow!(
            "`run` needs --config"
        )));
    }
    let mut overrides = flags.overrides()?;
    if let Some(k) = kind {
        overrides.insert(0, ("command".into(), json!(k.name())));
    }
    let cfg = resolve(flags.config.as_deref(), &overrides).map_err(CliError::Validation)?;
    commands::execute(&cfg)
}

/// Entry point used by the binary; prints the summary or the error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_threads();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if let Err(e) = Cli::try_parse_from(expand_ranges(args.clone())) {
        if !e.use_stderr() {
            // --help and --version
            let _ = e.print();
            return 0;
        }
    }
    match run_args(args) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).unwrap_or_default()
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
