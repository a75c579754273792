//! Losses, Adam, metrics and the training loop.
//!
//! A mini-batch is split into fixed chunks of [`CHUNK`] samples. Each chunk
//! records its own tape on a worker thread and the chunk gradients are then
//! summed in chunk order, so results do not depend on thread scheduling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tape, Var};
use crate::layers::{init_network, LayerError, LayerKind, Network, NetworkConfig, NormPlacement};
use crate::spline::GridSpec;
use crate::tasks::{generate_classification, Dataset, DatasetSplit, Targets, TaskError};

/// Samples per tape.
pub const CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("metric {metric:?} does not apply to {task} targets")]
    MetricMismatch { metric: Metric, task: &'static str },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "gradient length");
    assert_eq!(params.len(), state.m.len(), "optimizer state length");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Mean over outputs of the squared error, or softmax cross-entropy.
fn sample_loss<G: Graph>(g: &mut G, out: &[G::T], targets: &Targets, i: usize) -> G::T {
    match targets {
        Targets::Values(v) => {
            let sq: Vec<G::T> = out
                .iter()
                .zip(&v[i])
                .map(|(&o, &t)| {
                    let t = g.constant(t);
                    let d = g.sub(o, t);
                    g.mul(d, d)
                })
                .collect();
            let s = g.sum(&sq);
            let k = g.constant(out.len() as f64);
            g.div(s, k)
        }
        Targets::Classes { labels, .. } => {
            let mut m = out[0];
            for &o in &out[1..] {
                m = g.max(m, o);
            }
            let exps: Vec<G::T> = out
                .iter()
                .map(|&o| {
                    let d = g.sub(o, m);
                    g.exp(d)
                })
                .collect();
            let z = g.sum(&exps);
            let lse = g.ln(z);
            let lse = g.add(lse, m);
            g.sub(lse, out[labels[i]])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    /// `task_loss + λ · penalty`.
    pub loss: f64,
    pub task_loss: f64,
    pub penalty: f64,
    pub gradient: Vec<f64>,
}

fn value_and_grad<F>(params: &[f64], f: F) -> Result<(f64, Vec<f64>), TrainError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::with_capacity(params.len() * 4);
    let vars: Vec<Var> = params.iter().map(|&p| tape.parameter(p)).collect();
    let root = f(&mut tape, &vars);
    if let Some(e) = tape.fault() {
        return Err(TrainError::NonFiniteValue(e.to_string()));
    }
    let grads = tape.backward(root)?;
    Ok((tape.value_of(root), grads.into_vec()))
}

/// Mean task loss over `indices` plus `λ` times the total spline penalty.
pub fn regularized_loss(
    net: &Network,
    data: &Dataset,
    indices: &[usize],
    lambda: f64,
) -> Result<LossGrad, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptySplit("batch"));
    }
    let params = net.parameters();
    let n = indices.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>), TrainError>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            value_and_grad(&params, |tape, vars| {
                let bound = net.bind(tape, vars);
                let mut terms = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let x: Vec<Var> = data.features[i].iter().map(|&v| tape.constant(v)).collect();
                    let out = bound.forward(tape, &x);
                    terms.push(sample_loss(tape, &out, &data.targets, i));
                }
                let s = tape.sum(&terms);
                let inv = tape.constant(1.0 / n);
                tape.mul(s, inv)
            })
        })
        .collect();
    let mut task_loss = 0.0;
    let mut gradient = vec![0.0; params.len()];
    for part in parts {
        let (v, g) = part?;
        task_loss += v;
        gradient.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let (penalty, pg) = value_and_grad(&params, |tape, vars| net.penalty(tape, vars))?;
    if lambda != 0.0 {
        gradient
            .iter_mut()
            .zip(&pg)
            .for_each(|(a, b)| *a += lambda * b);
    }
    let loss = task_loss + lambda * penalty;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteValue(format!("loss = {loss}")));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteValue(format!("gradient entry {i}")));
    }
    Ok(LossGrad {
        loss,
        task_loss,
        penalty,
        gradient,
    })
}

/// Loss value only, on plain values (no tape).
pub fn loss_value(
    net: &Network,
    data: &Dataset,
    indices: &[usize],
    lambda: f64,
) -> Result<f64, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptySplit("batch"));
    }
    let bound = net.bind_values();
    let mut eval = crate::autodiff::Eval;
    let mut task = 0.0;
    for &i in indices {
        let out = bound.forward(&mut eval, &data.features[i]);
        task += sample_loss(&mut eval, &out, &data.targets, i);
    }
    Ok(task / indices.len() as f64 + lambda * net.penalty_value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Accuracy,
    CrossEntropy,
}

impl Metric {
    pub fn default_for(targets: &Targets) -> Metric {
        if targets.is_classification() {
            Metric::Accuracy
        } else {
            Metric::Rmse
        }
    }
}

pub fn predict_all(net: &Network, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TrainError> {
    let bound = net.bind_values();
    features
        .par_iter()
        .map(|x| bound.predict(x).map_err(TrainError::from))
        .collect()
}

pub fn rmse(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in p.iter().zip(t) {
            s += (a - b) * (a - b);
            count += 1;
        }
    }
    (s / count.max(1) as f64).sqrt()
}

/// First index of the largest logit.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| argmax(l) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = l.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            lse - l[y]
        })
        .sum();
    total / labels.len().max(1) as f64
}

pub fn evaluate(net: &Network, data: &Dataset, metric: Metric) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let pred = predict_all(net, &data.features)?;
    match (&data.targets, metric) {
        (Targets::Values(t), Metric::Rmse) => Ok(rmse(&pred, t)),
        (Targets::Classes { labels, .. }, Metric::Accuracy) => Ok(accuracy(&pred, labels)),
        (Targets::Classes { labels, .. }, Metric::CrossEntropy) => Ok(cross_entropy(&pred, labels)),
        (Targets::Values(_), m) => Err(TrainError::MetricMismatch {
            metric: m,
            task: "regression",
        }),
        (Targets::Classes { .. }, m) => Err(TrainError::MetricMismatch {
            metric: m,
            task: "classification",
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the coefficient smoothness penalty.
    pub lambda: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 128,
            lambda: 1e-4,
            seed: 2024,
            adam: AdamConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// SHA-256 of the JSON encoding of `value`, as hex.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub penalty: f64,
    /// Evaluation metric, filled on the last step of each epoch.
    pub metric: Option<f64>,
    pub nan: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_metric: f64,
    pub eval_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub metric: Metric,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// First step whose loss or gradient was not finite.
    pub nan_step: Option<usize>,
    pub wall_time_secs: f64,
    pub config_hash: String,
    pub final_train_metric: f64,
    pub final_eval_metric: f64,
    pub final_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub metric: Metric,
    pub final_train_metric: f64,
    pub final_eval_metric: f64,
    pub final_penalty: f64,
    pub final_loss: Option<f64>,
    pub steps: usize,
    pub nan_step: Option<usize>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn completed_steps(&self) -> usize {
        self.steps.iter().filter(|s| !s.nan).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,metric,penalty,nan_flag\n");
        for s in &self.steps {
            let metric = s.metric.map(|m| format!("{m:.17e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.17e},{},{:.17e},{}\n",
                s.step,
                s.loss,
                metric,
                s.penalty,
                u8::from(s.nan)
            ));
        }
        out
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            config_hash: self.config_hash.clone(),
            metric: self.metric,
            final_train_metric: self.final_train_metric,
            final_eval_metric: self.final_eval_metric,
            final_penalty: self.final_penalty,
            final_loss: self.steps.iter().rev().find(|s| !s.nan).map(|s| s.loss),
            steps: self.completed_steps(),
            nan_step: self.nan_step,
            wall_time_secs: self.wall_time_secs,
        }
    }
}

fn knots_sorted(net: &Network) -> bool {
    net.stages().iter().all(|st| {
        st.layer.spline_groups().iter().all(|g| {
            let t = g.knots.effective_knots();
            let gap = g.knots.min_gap();
            t.windows(2).all(|w| w[1] - w[0] >= gap * (1.0 - 1e-9))
        })
    })
}

fn metric_or_nan(net: &Network, data: &Dataset, metric: Metric) -> Result<f64, TrainError> {
    match evaluate(net, data, metric) {
        Ok(v) => Ok(v),
        Err(TrainError::Layer(LayerError::NonFiniteValue)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Seeded mini-batch training; halts at the first non-finite loss.
pub fn train(
    net: &mut Network,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if split.test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let started = Instant::now();
    let metric = Metric::default_for(&split.train.targets);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut params = net.parameters();
    let mut state = AdamState::new(params.len());
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut nan_step = None;
    let mut step = 0;
    'outer: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            step += 1;
            match regularized_loss(net, &split.train, batch, cfg.lambda) {
                Ok(lg) => {
                    adam_step(
                        &mut params,
                        &lg.gradient,
                        &mut state,
                        cfg.learning_rate,
                        &cfg.adam,
                    );
                    if params.iter().any(|p| !p.is_finite()) {
                        steps.push(StepRecord {
                            step,
                            epoch,
                            loss: lg.loss,
                            penalty: lg.penalty,
                            metric: None,
                            nan: true,
                        });
                        nan_step = Some(step);
                        break 'outer;
                    }
                    net.set_parameters(&params)?;
                    debug_assert!(knots_sorted(net), "knots unsorted after step {step}");
                    steps.push(StepRecord {
                        step,
                        epoch,
                        loss: lg.loss,
                        penalty: lg.penalty,
                        metric: None,
                        nan: false,
                    });
                }
                Err(TrainError::NonFiniteValue(_)) | Err(TrainError::Autodiff(_)) => {
                    steps.push(StepRecord {
                        step,
                        epoch,
                        loss: f64::NAN,
                        penalty: f64::NAN,
                        metric: None,
                        nan: true,
                    });
                    nan_step = Some(step);
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let train_metric = metric_or_nan(net, &split.train, metric)?;
        let eval_metric = metric_or_nan(net, &split.test, metric)?;
        if let Some(last) = steps.last_mut() {
            last.metric = Some(eval_metric);
        }
        epochs.push(EpochRecord {
            epoch,
            step,
            train_metric,
            eval_metric,
        });
    }
    let final_train_metric = metric_or_nan(net, &split.train, metric)?;
    let final_eval_metric = metric_or_nan(net, &split.test, metric)?;
    Ok(RunRecord {
        metric,
        steps,
        epochs,
        nan_step,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config_hash: config_hash(cfg),
        final_train_metric,
        final_eval_metric,
        final_penalty: net.penalty_value(),
    })
}

/// Networks differing only in grid range, trained on Gaussian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub ranges: Vec<[f64; 2]>,
    /// Number of FR-KAN layers.
    pub depth: usize,
    pub steps: usize,
    pub seed: u64,
    pub width: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub samples: usize,
    pub intervals: usize,
    pub order: usize,
    pub groups: Option<usize>,
    pub shift_scale: f64,
    pub silu: bool,
    pub norm: NormPlacement,
    pub train: TrainConfig,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            ranges: vec![[-1.0, 1.0], [-10.0, 10.0]],
            depth: 4,
            steps: 1000,
            seed: 2024,
            width: 16,
            input_dim: 10,
            classes: 10,
            samples: 2000,
            intervals: 20,
            order: 3,
            groups: None,
            shift_scale: 8.0,
            silu: false,
            norm: NormPlacement::Hidden,
            train: TrainConfig {
                learning_rate: 1e-2,
                epochs: usize::MAX / 2,
                ..TrainConfig::default()
            },
        }
    }
}

impl StabilityConfig {
    pub fn architecture(&self) -> String {
        let mut s = format!("in:{}", self.input_dim);
        for _ in 1..self.depth {
            s.push_str(&format!(" -> frkan:{}", self.width));
        }
        s.push_str(&format!(" -> frkan:{}", self.classes));
        s
    }

    pub fn network_config(&self, range: [f64; 2]) -> NetworkConfig {
        NetworkConfig {
            architecture: self.architecture(),
            default_kind: LayerKind::Frkan,
            grid: GridSpec::new(self.intervals, self.order, range[0], range[1]),
            groups: self.groups,
            shift_scale: self.shift_scale,
            silu: self.silu,
            norm: self.norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRun {
    pub range: [f64; 2],
    pub record: RunRecord,
}

pub fn grid_range_experiment(cfg: &StabilityConfig) -> Result<Vec<RangeRun>, TrainError> {
    if cfg.depth == 0 {
        return Err(TrainError::InvalidConfig("depth must be at least 1".into()));
    }
    let data = generate_classification(cfg.samples, cfg.classes, cfg.input_dim, cfg.seed)?;
    let train_cfg = TrainConfig {
        max_steps: Some(cfg.steps),
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    cfg.ranges
        .iter()
        .map(|&range| {
            let mut net = init_network(&cfg.network_config(range), cfg.seed)?;
            let mut record = train(&mut net, &data, &train_cfg)?;
            record.config_hash = config_hash(&(cfg, range));
            Ok(RangeRun { range, record })
        })
        .collect()
}
