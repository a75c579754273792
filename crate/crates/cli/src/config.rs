//! Experiment configuration: defaults, JSON files (nested or flat dotted
//! keys), and per-key overrides merged in that order.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use frkan::layers::{Architecture, LayerKind, NormPlacement};
use frkan::spline::GridSpec;
use frkan::training::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    #[default]
    Train,
    Approx,
    Knots,
    Stability,
    Paramcount,
    ExportActivation,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Train => "train",
            CommandKind::Approx => "approx",
            CommandKind::Knots => "knots",
            CommandKind::Stability => "stability",
            CommandKind::Paramcount => "paramcount",
            CommandKind::ExportActivation => "export-activation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    #[serde(rename = "G")]
    pub intervals: usize,
    #[serde(rename = "K")]
    pub order: usize,
    pub a: f64,
    pub b: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            intervals: 20,
            order: 3,
            a: -10.0,
            b: 10.0,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec {
        GridSpec::new(self.intervals, self.order, self.a, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: LayerKind,
    /// Layer descriptor; when absent `in:d -> kind:hidden -> out:o` is built
    /// from the task's dimensions.
    pub arch: Option<String>,
    pub hidden: usize,
    pub grid: GridConfig,
    /// FR-KAN groups per layer (capped at the layer input width); absent
    /// means `ceil(d_in / 4)`.
    pub groups: Option<usize>,
    #[serde(rename = "Z")]
    pub shift_scale: f64,
    pub silu: bool,
    pub norm: NormPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: LayerKind::Frkan,
            arch: None,
            hidden: 16,
            grid: GridConfig::default(),
            groups: None,
            shift_scale: 8.0,
            silu: true,
            norm: NormPlacement::Hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lambda: f64,
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            lr: t.learning_rate,
            epochs: t.epochs,
            batch: t.batch_size,
            lambda: t.lambda,
            max_steps: None,
            adam: t.adam,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch,
            lambda: self.lambda,
            seed,
            adam: self.adam,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Runge,
    Feynman,
    Classification,
    Csv,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Absent means Feynman for `approx` and Runge otherwise.
    pub kind: Option<TaskKind>,
    pub equation: String,
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    /// CSV file, or IDX image file.
    pub path: Option<PathBuf>,
    /// IDX label file.
    pub labels_path: Option<PathBuf>,
    /// CSV label column name; absent means the last column.
    pub label_column: Option<String>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: None,
            equation: "I.6.2".into(),
            n: 3000,
            classes: 10,
            dim: 10,
            path: None,
            labels_path: None,
            label_column: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySettings {
    pub ranges: Vec<[f64; 2]>,
    pub depth: usize,
    pub steps: usize,
    pub width: usize,
    pub samples: usize,
    pub lr: f64,
    /// SiLU residual path; off by default so the spline path drives the
    /// comparison.
    pub silu: bool,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        StabilitySettings {
            ranges: vec![[-1.0, 1.0], [-10.0, 10.0]],
            depth: 4,
            steps: 1000,
            width: 16,
            samples: 2000,
            lr: 1e-2,
            silu: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnotSettings {
    pub checkpoint: Option<PathBuf>,
    /// Audit the two-layer sawtooth construction instead of a checkpoint.
    /// Its first layer swings over `[-1, 1]`, so it only creates new knots
    /// when the grid spacing is below 2.
    pub sawtooth: bool,
    pub slice_dim: usize,
    /// Scan interval; absent bounds default to the first spline layer's
    /// grid range (or `[-1, 1]` for ReLU networks).
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub samples: usize,
}

impl Default for KnotSettings {
    fn default() -> Self {
        KnotSettings {
            checkpoint: None,
            sawtooth: false,
            slice_dim: 0,
            lo: None,
            hi: None,
            samples: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportSettings {
    pub checkpoint: Option<PathBuf>,
    pub layer: usize,
    /// Group index for FR-KAN layers, edge index `i * d_out + o` for KAN.
    pub unit: usize,
    pub samples: usize,
}

impl Default for ExportSettings {
    fn default() -> Self {
        ExportSettings {
            checkpoint: None,
            layer: 0,
            unit: 0,
            samples: 1001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub command: CommandKind,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub task: TaskConfig,
    pub stability: StabilitySettings,
    pub knots: KnotSettings,
    pub export: ExportSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            command: CommandKind::Train,
            seed: 2024,
            out: PathBuf::from("out"),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            task: TaskConfig::default(),
            stability: StabilitySettings::default(),
            knots: KnotSettings::default(),
            export: ExportSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn task_kind(&self) -> TaskKind {
        self.task.kind.unwrap_or(match self.command {
            CommandKind::Approx => TaskKind::Feynman,
            _ => TaskKind::Runge,
        })
    }

    /// Hash input: everything except the output directory.
    pub fn identity(&self) -> ExperimentConfig {
        ExperimentConfig {
            out: PathBuf::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let g = &self.model.grid;
        if !(g.a.is_finite() && g.b.is_finite() && g.b > g.a) {
            bail!("model.grid: range [{}, {}] must satisfy a < b", g.a, g.b);
        }
        if g.intervals == 0 {
            bail!("model.grid.G must be at least 1");
        }
        if g.order == 0 || g.order > frkan::spline::MAX_ORDER {
            bail!("model.grid.K must lie in 1..={}", frkan::spline::MAX_ORDER);
        }
        if !(self.model.shift_scale > 0.0) {
            bail!("model.Z must be positive, got {}", self.model.shift_scale);
        }
        if self.model.groups == Some(0) {
            bail!("model.groups must be at least 1");
        }
        if self.model.hidden == 0 {
            bail!("model.hidden must be at least 1");
        }
        if let Some(arch) = &self.model.arch {
            Architecture::parse(arch, self.model.kind)
                .with_context(|| format!("model.arch `{arch}`"))?;
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            bail!("train.lr must be positive, got {}", t.lr);
        }
        if t.epochs == 0 {
            bail!("train.epochs must be at least 1");
        }
        if t.batch == 0 {
            bail!("train.batch must be at least 1");
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            bail!("train.lambda must be non-negative, got {}", t.lambda);
        }
        if matches!(self.command, CommandKind::Train | CommandKind::Approx) {
            match self.task_kind() {
                TaskKind::Csv if self.task.path.is_none() => {
                    bail!("task.path is required for csv tasks")
                }
                TaskKind::Idx if self.task.path.is_none() || self.task.labels_path.is_none() => {
                    bail!("task.path and task.labels_path are required for idx tasks")
                }
                TaskKind::Feynman => {
                    frkan::tasks::feynman_spec(&self.task.equation).context("task.equation")?;
                }
                _ => {}
            }
            if self.task.n < 10 {
                bail!("task.n must be at least 10, got {}", self.task.n);
            }
        }
        if self.command == CommandKind::Stability {
            let s = &self.stability;
            if s.ranges.is_empty() {
                bail!("stability.ranges must not be empty");
            }
            for r in &s.ranges {
                if !(r[0] < r[1]) {
                    bail!("stability.ranges: [{}, {}] must satisfy a < b", r[0], r[1]);
                }
            }
            if s.depth == 0 || s.steps == 0 || s.width == 0 {
                bail!("stability.depth, stability.steps and stability.width must be positive");
            }
        }
        if self.command == CommandKind::Knots
            && self.knots.checkpoint.is_none()
            && !self.knots.sawtooth
        {
            bail!("knots.checkpoint is required unless knots.sawtooth is set");
        }
        if self.command == CommandKind::ExportActivation && self.export.checkpoint.is_none() {
            bail!("export.checkpoint is required");
        }
        if self.command == CommandKind::ExportActivation && self.export.samples < 2 {
            bail!("export.samples must be at least 2");
        }
        Ok(())
    }
}

/// Turns `{"a.b": 1}` into `{"a": {"b": 1}}`, recursively.
pub fn expand_dotted(value: Value) -> anyhow::Result<Value> {
    match value {
        Value::Object(map) => {
            let mut out = Value::Object(Map::new());
            for (k, v) in map {
                let v = expand_dotted(v)?;
                set_path(&mut out, &k, v)?;
            }
            Ok(out)
        }
        other => Ok(other),
    }
}

/// Sets `path` (dot separated) inside `root`, merging objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed key `{path}`");
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => bail!("key `{path}`: `{}` is not an object", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            match (obj.get_mut(*part), value) {
                (Some(existing @ Value::Object(_)), Value::Object(new)) => {
                    for (k, v) in new {
                        set_path(existing, &k, v)?;
                    }
                }
                (_, v) => {
                    obj.insert(part.to_string(), v);
                }
            }
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Parses an override value: JSON when it parses, otherwise a string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Defaults, then the file, then `overrides` in order.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[(String, Value)],
) -> anyhow::Result<ExperimentConfig> {
    let mut root = serde_json::to_value(ExperimentConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let parsed: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        if !parsed.is_object() {
            bail!("config file {} must hold a JSON object", path.display());
        }
        let expanded = expand_dotted(parsed)?;
        if let Value::Object(m) = expanded {
            for (k, v) in m {
                set_path(&mut root, &k, v)?;
            }
        }
    }
    for (k, v) in overrides {
        set_path(&mut root, k, v.clone())?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(root).context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}
