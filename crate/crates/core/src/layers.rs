//! Network layers and their assembly.
//!
//! Three layer kinds share one forward interface, written against
//! [`Graph`] so the same code serves plain evaluation and gradient recording:
//!
//! * [`KanLayer`]: a spline per edge on one fixed grid, combined as
//!   `Σ_i A_b[i,o]·spline_{i,o}(x_i) + A_s[i,o]·SiLU(x_i)`.
//! * [`FrKanLayer`]: `h` shared activations with learnable knot shifts and
//!   a single weight `A` for both paths, `Σ_i A[i,o]·(spline_{g(i)}(x_i) + SiLU(x_i))`.
//! * [`MlpLayer`]: affine map followed by ReLU (identity on the output layer).
//!
//! Parameters are exposed as one flat vector in a fixed per-stage order
//! (norm scale, norm shift, then the layer's own arrays); [`ParamClass`]
//! labels every entry.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Eval, Graph};
use crate::spline::{
    basis_window, second_difference_penalty, spline_value, GridSpec, KnotVector, SplineError,
    SplineGroup,
};

/// Variance floor inside [`LayerNorm`].
pub const NORM_EPS: f64 = 1e-9;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("bad architecture: {0}")]
    BadArchitecture(String),
    #[error("input has {got} features, network expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("non-finite value in network output")]
    NonFiniteValue,
    #[error("parameter vector has {got} entries, network has {expected}")]
    ParameterLength { expected: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Kan,
    Frkan,
    Mlp,
}

impl LayerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kan" => Some(LayerKind::Kan),
            "frkan" => Some(LayerKind::Frkan),
            "mlp" => Some(LayerKind::Mlp),
            _ => None,
        }
    }

    pub fn is_spline(self) -> bool {
        !matches!(self, LayerKind::Mlp)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Kan => "kan",
            LayerKind::Frkan => "frkan",
            LayerKind::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Where [`LayerNorm`] goes in front of spline layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    None,
    /// Every spline layer except the first.
    #[default]
    Hidden,
    All,
}

/// Role of one entry of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    /// `A_b` of a KAN layer.
    SplineWeight,
    /// `A_s` of a KAN layer.
    SiluWeight,
    /// `A` of an FR-KAN layer.
    SharedWeight,
    Coefficient,
    Shift,
    Weight,
    Bias,
    NormScale,
    NormShift,
}

/// Parsed form of `in:2 -> frkan:64 -> out:1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input: usize,
    pub layers: Vec<(LayerKind, usize)>,
}

impl Architecture {
    /// `out` (and a missing kind on the output) inherits the previous layer's
    /// kind, or `default_kind` when there is no hidden layer. `→` and `->`
    /// are both accepted as separators.
    pub fn parse(desc: &str, default_kind: LayerKind) -> Result<Self, LayerError> {
        let bad = |m: String| LayerError::BadArchitecture(m);
        let normalized = desc.replace('→', "->");
        let tokens: Vec<&str> = normalized.split("->").map(str::trim).collect();
        if tokens.len() < 2 {
            return Err(bad(format!(
                "`{desc}` needs an input and at least one layer"
            )));
        }
        let parse_token = |tok: &str| -> Result<(String, usize), LayerError> {
            let (name, width) = tok
                .split_once(':')
                .ok_or_else(|| bad(format!("token `{tok}` is not `kind:width`")))?;
            let width: usize = width
                .trim()
                .parse()
                .map_err(|_| bad(format!("token `{tok}` has a non-integer width")))?;
            if width == 0 {
                return Err(bad(format!("token `{tok}` has zero width")));
            }
            Ok((name.trim().to_ascii_lowercase(), width))
        };
        let (first, input) = parse_token(tokens[0])?;
        if first != "in" {
            return Err(bad(format!(
                "descriptor must start with `in:`, found `{}`",
                tokens[0]
            )));
        }
        let mut layers = Vec::new();
        let last = tokens.len() - 1;
        for (pos, tok) in tokens.iter().enumerate().skip(1) {
            let (name, width) = parse_token(tok)?;
            let kind = if name == "out" {
                if pos != last {
                    return Err(bad("`out:` must be the last token".into()));
                }
                layers.last().map(|&(k, _)| k).unwrap_or(default_kind)
            } else {
                LayerKind::parse(&name)
                    .ok_or_else(|| bad(format!("unknown layer kind `{name}`")))?
            };
            layers.push((kind, width));
        }
        Ok(Architecture { input, layers })
    }

    pub fn output(&self) -> usize {
        self.layers.last().map(|l| l.1).unwrap_or(self.input)
    }

    /// `(d_in, d_out, kind)` per layer.
    pub fn shapes(&self) -> Vec<(usize, usize, LayerKind)> {
        let mut d_in = self.input;
        self.layers
            .iter()
            .map(|&(kind, d_out)| {
                let s = (d_in, d_out, kind);
                d_in = d_out;
                s
            })
            .collect()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "in:{}", self.input)?;
        for (kind, w) in &self.layers {
            write!(f, " -> {kind}:{w}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Zero-mean, unit-variance rescaling before the affine `γ, β`.
    pub fn normalize<G: Graph>(g: &mut G, x: &[G::T]) -> Vec<G::T> {
        let n = g.constant(x.len() as f64);
        let total = g.sum(x);
        let mean = g.div(total, n);
        let centered: Vec<G::T> = x.iter().map(|&v| g.sub(v, mean)).collect();
        let squares: Vec<G::T> = centered.iter().map(|&c| g.mul(c, c)).collect();
        let ss = g.sum(&squares);
        let var = g.div(ss, n);
        let eps = g.constant(NORM_EPS);
        let var = g.add(var, eps);
        let sd = g.sqrt(var);
        centered.iter().map(|&c| g.div(c, sd)).collect()
    }

    fn forward<G: Graph>(&self, g: &mut G, p: &[G::T], x: &[G::T]) -> Vec<G::T> {
        let d = self.dim();
        let (gamma, beta) = p.split_at(d);
        Self::normalize(g, x)
            .into_iter()
            .enumerate()
            .map(|(i, z)| g.mul_add(gamma[i], z, beta[i]))
            .collect()
    }
}

fn accumulate<G: Graph>(g: &mut G, acc: Option<G::T>, term: G::T) -> Option<G::T> {
    Some(match acc {
        Some(a) => g.add(a, term),
        None => term,
    })
}

fn finish<G: Graph>(g: &mut G, out: Vec<Option<G::T>>) -> Vec<G::T> {
    out.into_iter()
        .map(|v| v.unwrap_or_else(|| g.constant(0.0)))
        .collect()
}

/// Fixed-grid KAN layer; every edge has its own coefficients on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KanLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub knots: KnotVector,
    /// Edge-major: `coefficients[(i * d_out + o) * (G + K) + j]`.
    pub coefficients: Vec<f64>,
    /// `A_b[i * d_out + o]`.
    pub spline_weight: Vec<f64>,
    /// `A_s[i * d_out + o]`.
    pub silu_weight: Vec<f64>,
    pub silu: bool,
}

impl KanLayer {
    pub fn zeros(d_in: usize, d_out: usize, grid: GridSpec) -> Result<Self, LayerError> {
        let knots = KnotVector::uniform(grid)?;
        let nb = knots.num_basis();
        Ok(KanLayer {
            d_in,
            d_out,
            knots,
            coefficients: vec![0.0; d_in * d_out * nb],
            spline_weight: vec![0.0; d_in * d_out],
            silu_weight: vec![0.0; d_in * d_out],
            silu: true,
        })
    }

    pub fn edge_coefficients(&self, i: usize, o: usize) -> &[f64] {
        let nb = self.knots.num_basis();
        let e = i * self.d_out + o;
        &self.coefficients[e * nb..(e + 1) * nb]
    }

    pub fn edge_group(&self, i: usize, o: usize) -> SplineGroup {
        SplineGroup {
            knots: self.knots.clone(),
            coefficients: self.edge_coefficients(i, o).to_vec(),
        }
    }

    pub fn param_len(&self) -> usize {
        self.coefficients.len() + 2 * self.d_in * self.d_out
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.coefficients);
        out.extend_from_slice(&self.spline_weight);
        out.extend_from_slice(&self.silu_weight);
    }

    fn read_params(&mut self, p: &[f64]) {
        let (c, rest) = p.split_at(self.coefficients.len());
        let (ab, as_) = rest.split_at(self.spline_weight.len());
        self.coefficients.copy_from_slice(c);
        self.spline_weight.copy_from_slice(ab);
        self.silu_weight.copy_from_slice(as_);
    }

    fn classes(&self, out: &mut Vec<ParamClass>) {
        out.extend(std::iter::repeat_n(
            ParamClass::Coefficient,
            self.coefficients.len(),
        ));
        out.extend(std::iter::repeat_n(
            ParamClass::SplineWeight,
            self.spline_weight.len(),
        ));
        out.extend(std::iter::repeat_n(
            ParamClass::SiluWeight,
            self.silu_weight.len(),
        ));
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        p: &[G::T],
        knots: &[G::T],
        x: &[G::T],
    ) -> Vec<G::T> {
        let nb = self.knots.num_basis();
        let edges = self.d_in * self.d_out;
        let (coef, rest) = p.split_at(edges * nb);
        let (ab, as_) = rest.split_at(edges);
        let order = self.knots.order();
        let mut out: Vec<Option<G::T>> = vec![None; self.d_out];
        for (i, &xi) in x.iter().enumerate() {
            let window = basis_window(g, xi, knots, order);
            let silu = if self.silu { Some(g.silu(xi)) } else { None };
            for (o, slot) in out.iter_mut().enumerate() {
                let e = i * self.d_out + o;
                let mut term = None;
                if let Some(w) = &window {
                    let c = &coef[e * nb..(e + 1) * nb];
                    let mut s = None;
                    for (r, &b) in w.values.iter().enumerate() {
                        let cb = g.mul(c[w.first + r], b);
                        s = accumulate(g, s, cb);
                    }
                    if let Some(s) = s {
                        term = Some(g.mul(ab[e], s));
                    }
                }
                if let Some(sv) = silu {
                    let t = g.mul(as_[e], sv);
                    term = accumulate(g, term, t);
                }
                if let Some(t) = term {
                    *slot = accumulate(g, *slot, t);
                }
            }
        }
        finish(g, out)
    }
}

/// Free-knot KAN layer with `h` shared activation groups.
#[derive(Debug, Clone, PartialEq)]
pub struct FrKanLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub groups: Vec<SplineGroup>,
    /// `A[i * d_out + o]`, shared by the spline and SiLU paths.
    pub weight: Vec<f64>,
    pub silu: bool,
}

impl FrKanLayer {
    pub fn zeros(d_in: usize, d_out: usize, h: usize, grid: GridSpec) -> Result<Self, LayerError> {
        if h == 0 || h > d_in {
            return Err(LayerError::BadArchitecture(format!(
                "group count h={h} must lie in 1..={d_in}"
            )));
        }
        let knots = KnotVector::uniform(grid)?;
        Ok(FrKanLayer {
            d_in,
            d_out,
            groups: (0..h).map(|_| SplineGroup::zeros(knots.clone())).collect(),
            weight: vec![0.0; d_in * d_out],
            silu: true,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Contiguous blocks: input `i` uses group `⌊i·h / d_in⌋`.
    pub fn group_of(&self, i: usize) -> usize {
        i * self.groups.len() / self.d_in
    }

    pub fn grid(&self) -> GridSpec {
        self.groups[0].knots.spec()
    }

    pub fn param_len(&self) -> usize {
        let s = self.grid();
        self.weight.len() + self.groups.len() * (s.num_basis() + s.intervals + 1)
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        for gr in &self.groups {
            out.extend_from_slice(&gr.coefficients);
        }
        for gr in &self.groups {
            out.extend_from_slice(gr.knots.shift());
        }
    }

    fn read_params(&mut self, p: &[f64]) -> Result<(), SplineError> {
        let (w, mut rest) = p.split_at(self.weight.len());
        self.weight.copy_from_slice(w);
        for gr in &mut self.groups {
            let (c, r) = rest.split_at(gr.coefficients.len());
            gr.coefficients.copy_from_slice(c);
            rest = r;
        }
        for gr in &mut self.groups {
            let (s, r) = rest.split_at(gr.knots.shift().len());
            gr.knots.set_shift(s)?;
            rest = r;
        }
        Ok(())
    }

    fn classes(&self, out: &mut Vec<ParamClass>) {
        let s = self.grid();
        let h = self.groups.len();
        out.extend(std::iter::repeat_n(
            ParamClass::SharedWeight,
            self.weight.len(),
        ));
        out.extend(std::iter::repeat_n(
            ParamClass::Coefficient,
            h * s.num_basis(),
        ));
        out.extend(std::iter::repeat_n(
            ParamClass::Shift,
            h * (s.intervals + 1),
        ));
    }

    /// Per-group effective knots recorded from the shift parameters.
    fn bind_knots<G: Graph>(&self, g: &mut G, p: &[G::T]) -> Vec<Vec<G::T>> {
        let s = self.grid();
        let shift_start = self.weight.len() + self.groups.len() * s.num_basis();
        let n_shift = s.intervals + 1;
        self.groups
            .iter()
            .enumerate()
            .map(|(k, gr)| {
                let sh = &p[shift_start + k * n_shift..shift_start + (k + 1) * n_shift];
                gr.knots.free_knots(g, sh)
            })
            .collect()
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        p: &[G::T],
        knots: &[Vec<G::T>],
        x: &[G::T],
    ) -> Vec<G::T> {
        let s = self.grid();
        let nb = s.num_basis();
        let (a, coef) = p.split_at(self.weight.len());
        let mut out: Vec<Option<G::T>> = vec![None; self.d_out];
        for (i, &xi) in x.iter().enumerate() {
            let k = self.group_of(i);
            let c = &coef[k * nb..(k + 1) * nb];
            let mut act = spline_value(g, xi, &knots[k], c, s.order);
            if self.silu {
                let sv = g.silu(xi);
                act = g.add(act, sv);
            }
            for (o, slot) in out.iter_mut().enumerate() {
                let t = g.mul(a[i * self.d_out + o], act);
                *slot = accumulate(g, *slot, t);
            }
        }
        finish(g, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// `W[i * d_out + o]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl MlpLayer {
    pub fn zeros(d_in: usize, d_out: usize, activation: Activation) -> Self {
        MlpLayer {
            d_in,
            d_out,
            weight: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
            activation,
        }
    }

    pub fn param_len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Breakpoints `t_j = -b_j / w_j` of a single-input ReLU layer.
    pub fn predicted_knots(&self) -> Vec<f64> {
        if self.d_in != 1 || self.activation != Activation::Relu {
            return Vec::new();
        }
        let mut t: Vec<f64> = (0..self.d_out)
            .filter(|&o| self.weight[o] != 0.0)
            .map(|o| -self.bias[o] / self.weight[o])
            .collect();
        t.sort_by(f64::total_cmp);
        t
    }

    pub fn forward<G: Graph>(&self, g: &mut G, p: &[G::T], x: &[G::T]) -> Vec<G::T> {
        let (w, b) = p.split_at(self.weight.len());
        (0..self.d_out)
            .map(|o| {
                let mut z = b[o];
                for (i, &xi) in x.iter().enumerate() {
                    z = g.mul_add(w[i * self.d_out + o], xi, z);
                }
                match self.activation {
                    Activation::Relu => g.relu(z),
                    Activation::Identity => z,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Kan(KanLayer),
    FrKan(FrKanLayer),
    Mlp(MlpLayer),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Kan(_) => LayerKind::Kan,
            Layer::FrKan(_) => LayerKind::Frkan,
            Layer::Mlp(_) => LayerKind::Mlp,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Layer::Kan(l) => (l.d_in, l.d_out),
            Layer::FrKan(l) => (l.d_in, l.d_out),
            Layer::Mlp(l) => (l.d_in, l.d_out),
        }
    }

    pub fn grid(&self) -> Option<GridSpec> {
        match self {
            Layer::Kan(l) => Some(l.knots.spec()),
            Layer::FrKan(l) => Some(l.grid()),
            Layer::Mlp(_) => None,
        }
    }

    pub fn param_len(&self) -> usize {
        match self {
            Layer::Kan(l) => l.param_len(),
            Layer::FrKan(l) => l.param_len(),
            Layer::Mlp(l) => l.param_len(),
        }
    }

    /// Every spline group of the layer (one per edge for KAN).
    pub fn spline_groups(&self) -> Vec<SplineGroup> {
        match self {
            Layer::Kan(l) => (0..l.d_in)
                .flat_map(|i| (0..l.d_out).map(move |o| (i, o)))
                .map(|(i, o)| l.edge_group(i, o))
                .collect(),
            Layer::FrKan(l) => l.groups.clone(),
            Layer::Mlp(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub norm: Option<LayerNorm>,
    pub layer: Layer,
}

impl Stage {
    pub fn param_len(&self) -> usize {
        self.norm.as_ref().map_or(0, |n| 2 * n.dim()) + self.layer.param_len()
    }
}

/// Itemized parameter counts of one stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParamCount {
    pub kind: Option<LayerKind>,
    pub d_in: usize,
    pub d_out: usize,
    pub norm_scale: usize,
    pub norm_shift: usize,
    pub spline_weight: usize,
    pub silu_weight: usize,
    pub shared_weight: usize,
    pub coefficients: usize,
    pub shifts: usize,
    pub weight: usize,
    pub bias: usize,
    pub total: usize,
    /// `d_in·d_out·(G+K+1)`: spline coefficients and one combined weight per
    /// edge, the coarser convention for KAN layers. Only set for KAN.
    pub combined_convention: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub layers: Vec<LayerParamCount>,
    pub total: usize,
}

/// Settings for [`init_network`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub architecture: String,
    pub default_kind: LayerKind,
    pub grid: GridSpec,
    /// FR-KAN group count, capped at each layer's input width; `None` means
    /// `ceil(d_in / 4)` per layer.
    pub groups: Option<usize>,
    /// Shift initialisation scale `Z`.
    pub shift_scale: f64,
    pub silu: bool,
    pub norm: NormPlacement,
}

impl NetworkConfig {
    pub fn new(architecture: impl Into<String>, default_kind: LayerKind, grid: GridSpec) -> Self {
        NetworkConfig {
            architecture: architecture.into(),
            default_kind,
            grid,
            groups: None,
            shift_scale: 8.0,
            silu: true,
            norm: NormPlacement::Hidden,
        }
    }
}

pub fn default_groups(d_in: usize) -> usize {
    d_in.div_ceil(4).max(1)
}

/// Deterministic initialisation from `seed`.
pub fn init_network(config: &NetworkConfig, seed: u64) -> Result<Network, LayerError> {
    let arch = Architecture::parse(&config.architecture, config.default_kind)?;
    config.grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef_dist = Normal::new(0.0, 0.1 / (config.grid.num_basis() as f64).sqrt())
        .expect("positive standard deviation");
    let shapes = arch.shapes();
    let n_layers = shapes.len();
    let mut stages = Vec::with_capacity(n_layers);
    for (idx, &(d_in, d_out, kind)) in shapes.iter().enumerate() {
        let bound = 1.0 / (d_in as f64).sqrt();
        let fan_in = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let layer = match kind {
            LayerKind::Kan => {
                let mut l = KanLayer::zeros(d_in, d_out, config.grid)?;
                l.silu = config.silu;
                l.spline_weight = fan_in(d_in * d_out, &mut rng);
                l.silu_weight = fan_in(d_in * d_out, &mut rng);
                for c in l.coefficients.iter_mut() {
                    *c = coef_dist.sample(&mut rng);
                }
                Layer::Kan(l)
            }
            LayerKind::Frkan => {
                let h = config
                    .groups
                    .map_or_else(|| default_groups(d_in), |h| h.min(d_in));
                let mut l = FrKanLayer::zeros(d_in, d_out, h, config.grid)?;
                l.silu = config.silu;
                l.weight = fan_in(d_in * d_out, &mut rng);
                for gr in l.groups.iter_mut() {
                    for c in gr.coefficients.iter_mut() {
                        *c = coef_dist.sample(&mut rng);
                    }
                }
                for gr in l.groups.iter_mut() {
                    let shift = gr.knots.sample_shift(config.shift_scale, &mut rng);
                    gr.knots.set_shift(&shift)?;
                }
                Layer::FrKan(l)
            }
            LayerKind::Mlp => {
                let act = if idx + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let mut l = MlpLayer::zeros(d_in, d_out, act);
                l.weight = fan_in(d_in * d_out, &mut rng);
                l.bias = fan_in(d_out, &mut rng);
                Layer::Mlp(l)
            }
        };
        let wants_norm = kind.is_spline()
            && match config.norm {
                NormPlacement::None => false,
                NormPlacement::Hidden => idx > 0,
                NormPlacement::All => true,
            };
        stages.push(Stage {
            norm: wants_norm.then(|| LayerNorm::new(d_in)),
            layer,
        });
    }
    Network::from_stages(stages)
}

/// An ordered stack of stages with compatible dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    architecture: Architecture,
    stages: Vec<Stage>,
}

impl Network {
    pub fn from_stages(stages: Vec<Stage>) -> Result<Self, LayerError> {
        let first = stages
            .first()
            .ok_or_else(|| LayerError::BadArchitecture("network has no layers".into()))?;
        let input = first.layer.dims().0;
        let mut d = input;
        let mut layers = Vec::with_capacity(stages.len());
        for (i, st) in stages.iter().enumerate() {
            let (d_in, d_out) = st.layer.dims();
            if d_in == 0 || d_out == 0 {
                return Err(LayerError::BadArchitecture(format!(
                    "layer {i} has zero width"
                )));
            }
            if d_in != d {
                return Err(LayerError::BadArchitecture(format!(
                    "layer {i} expects {d_in} inputs but receives {d}"
                )));
            }
            if let Some(n) = &st.norm {
                if n.dim() != d_in || n.beta.len() != d_in {
                    return Err(LayerError::BadArchitecture(format!(
                        "norm before layer {i} has width {} instead of {d_in}",
                        n.dim()
                    )));
                }
            }
            layers.push((st.layer.kind(), d_out));
            d = d_out;
        }
        Ok(Network {
            architecture: Architecture { input, layers },
            stages,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn descriptor(&self) -> String {
        self.architecture.to_string()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage] {
        &mut self.stages
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input
    }

    pub fn output_dim(&self) -> usize {
        self.architecture.output()
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(Stage::param_len).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for st in &self.stages {
            if let Some(n) = &st.norm {
                out.extend_from_slice(&n.gamma);
                out.extend_from_slice(&n.beta);
            }
            match &st.layer {
                Layer::Kan(l) => l.write_params(&mut out),
                Layer::FrKan(l) => l.write_params(&mut out),
                Layer::Mlp(l) => {
                    out.extend_from_slice(&l.weight);
                    out.extend_from_slice(&l.bias);
                }
            }
        }
        out
    }

    /// Writes a flat parameter vector back and refreshes every knot vector.
    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<(), LayerError> {
        if flat.len() != self.num_params() {
            return Err(LayerError::ParameterLength {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut rest = flat;
        for st in &mut self.stages {
            if let Some(n) = &mut st.norm {
                let d = n.dim();
                n.gamma.copy_from_slice(&rest[..d]);
                n.beta.copy_from_slice(&rest[d..2 * d]);
                rest = &rest[2 * d..];
            }
            let len = st.layer.param_len();
            let (p, r) = rest.split_at(len);
            match &mut st.layer {
                Layer::Kan(l) => l.read_params(p),
                Layer::FrKan(l) => l.read_params(p)?,
                Layer::Mlp(l) => {
                    let (w, b) = p.split_at(l.weight.len());
                    l.weight.copy_from_slice(w);
                    l.bias.copy_from_slice(b);
                }
            }
            rest = r;
        }
        Ok(())
    }

    pub fn param_classes(&self) -> Vec<ParamClass> {
        let mut out = Vec::with_capacity(self.num_params());
        for st in &self.stages {
            if let Some(n) = &st.norm {
                out.extend(std::iter::repeat_n(ParamClass::NormScale, n.dim()));
                out.extend(std::iter::repeat_n(ParamClass::NormShift, n.dim()));
            }
            match &st.layer {
                Layer::Kan(l) => l.classes(&mut out),
                Layer::FrKan(l) => l.classes(&mut out),
                Layer::Mlp(l) => {
                    out.extend(std::iter::repeat_n(ParamClass::Weight, l.weight.len()));
                    out.extend(std::iter::repeat_n(ParamClass::Bias, l.bias.len()));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> ParamCount {
        let layers: Vec<LayerParamCount> = self
            .stages
            .iter()
            .map(|st| {
                let (d_in, d_out) = st.layer.dims();
                let mut c = LayerParamCount {
                    kind: Some(st.layer.kind()),
                    d_in,
                    d_out,
                    ..Default::default()
                };
                if let Some(n) = &st.norm {
                    c.norm_scale = n.dim();
                    c.norm_shift = n.dim();
                }
                match &st.layer {
                    Layer::Kan(l) => {
                        c.coefficients = l.coefficients.len();
                        c.spline_weight = l.spline_weight.len();
                        c.silu_weight = l.silu_weight.len();
                        c.combined_convention = Some(d_in * d_out * (l.knots.num_basis() + 1));
                    }
                    Layer::FrKan(l) => {
                        c.shared_weight = l.weight.len();
                        c.coefficients = l.groups.iter().map(|g| g.coefficients.len()).sum();
                        c.shifts = l.groups.iter().map(|g| g.knots.shift().len()).sum();
                    }
                    Layer::Mlp(l) => {
                        c.weight = l.weight.len();
                        c.bias = l.bias.len();
                    }
                }
                c.total = c.norm_scale
                    + c.norm_shift
                    + c.spline_weight
                    + c.silu_weight
                    + c.shared_weight
                    + c.coefficients
                    + c.shifts
                    + c.weight
                    + c.bias;
                c
            })
            .collect();
        let total = layers.iter().map(|l| l.total).sum();
        ParamCount { layers, total }
    }

    /// Records parameters-dependent state (knots) once; the result can
    /// evaluate many inputs.
    pub fn bind<G: Graph>(&self, g: &mut G, params: &[G::T]) -> BoundNetwork<'_, G::T> {
        assert_eq!(params.len(), self.num_params(), "parameter vector length");
        let mut offsets = Vec::with_capacity(self.stages.len());
        let mut knots = Vec::with_capacity(self.stages.len());
        let mut pos = 0;
        for st in &self.stages {
            offsets.push(pos);
            let norm_len = st.norm.as_ref().map_or(0, |n| 2 * n.dim());
            let lp = &params[pos + norm_len..pos + st.param_len()];
            knots.push(match &st.layer {
                Layer::Kan(l) => vec![l.knots.fixed_knots(g)],
                Layer::FrKan(l) => l.bind_knots(g, lp),
                Layer::Mlp(_) => Vec::new(),
            });
            pos += st.param_len();
        }
        BoundNetwork {
            net: self,
            params: params.to_vec(),
            offsets,
            knots,
        }
    }

    /// Plain-value binding, shareable across threads.
    pub fn bind_values(&self) -> BoundNetwork<'_, f64> {
        let p = self.parameters();
        self.bind(&mut Eval, &p)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, LayerError> {
        self.bind_values().predict(x)
    }

    /// Sum of the second-difference penalty over every spline group.
    pub fn penalty<G: Graph>(&self, g: &mut G, params: &[G::T]) -> G::T {
        let mut terms = Vec::new();
        let mut pos = 0;
        for st in &self.stages {
            let norm_len = st.norm.as_ref().map_or(0, |n| 2 * n.dim());
            let lp = &params[pos + norm_len..pos + st.param_len()];
            match &st.layer {
                Layer::Kan(l) => {
                    let nb = l.knots.num_basis();
                    if nb >= 3 {
                        for e in 0..l.d_in * l.d_out {
                            terms.push(second_difference_penalty(
                                g,
                                &lp[e * nb..(e + 1) * nb],
                                l.knots.spacing(),
                            ));
                        }
                    }
                }
                Layer::FrKan(l) => {
                    let s = l.grid();
                    let nb = s.num_basis();
                    let coef = &lp[l.weight.len()..];
                    if nb >= 3 {
                        for k in 0..l.num_groups() {
                            terms.push(second_difference_penalty(
                                g,
                                &coef[k * nb..(k + 1) * nb],
                                s.spacing(),
                            ));
                        }
                    }
                }
                Layer::Mlp(_) => {}
            }
            pos += st.param_len();
        }
        g.sum(&terms)
    }

    pub fn penalty_value(&self) -> f64 {
        let p = self.parameters();
        self.penalty(&mut Eval, &p)
    }

    pub fn has_norm(&self) -> bool {
        self.stages.iter().any(|s| s.norm.is_some())
    }
}

/// A network with its parameters and knots already on a graph.
#[derive(Debug, Clone)]
pub struct BoundNetwork<'a, T> {
    net: &'a Network,
    params: Vec<T>,
    offsets: Vec<usize>,
    knots: Vec<Vec<Vec<T>>>,
}

impl<T: Copy + fmt::Debug> BoundNetwork<'_, T> {
    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Inputs seen by every layer (after its norm), followed by the output.
    pub fn forward_trace<G: Graph<T = T>>(&self, g: &mut G, x: &[T]) -> Vec<Vec<T>> {
        let mut trace = Vec::with_capacity(self.net.stages.len() + 1);
        let mut h = x.to_vec();
        for (idx, st) in self.net.stages.iter().enumerate() {
            let start = self.offsets[idx];
            let mut p = &self.params[start..start + st.param_len()];
            if let Some(n) = &st.norm {
                let (np, rest) = p.split_at(2 * n.dim());
                h = n.forward(g, np, &h);
                p = rest;
            }
            let next = match &st.layer {
                Layer::Kan(l) => l.forward(g, p, &self.knots[idx][0], &h),
                Layer::FrKan(l) => l.forward(g, p, &self.knots[idx], &h),
                Layer::Mlp(l) => l.forward(g, p, &h),
            };
            trace.push(std::mem::replace(&mut h, next));
        }
        trace.push(h);
        trace
    }

    pub fn forward<G: Graph<T = T>>(&self, g: &mut G, x: &[T]) -> Vec<T> {
        self.forward_trace(g, x)
            .pop()
            .expect("trace ends with the output")
    }
}

impl BoundNetwork<'_, f64> {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, LayerError> {
        if x.len() != self.net.input_dim() {
            return Err(LayerError::InputLength {
                expected: self.net.input_dim(),
                got: x.len(),
            });
        }
        let y = self.forward(&mut Eval, x);
        if y.iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(LayerError::NonFiniteValue)
        }
    }

    /// Layer inputs and output for one sample, as plain values.
    pub fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.forward_trace(&mut Eval, x)
    }
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    architecture: String,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormRecord {
    gamma: Vec<String>,
    beta: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LayerRecord {
    Kan {
        dims: [usize; 2],
        #[serde(rename = "G")]
        intervals: usize,
        #[serde(rename = "K")]
        order: usize,
        a: f64,
        b: f64,
        silu: bool,
        norm: Option<NormRecord>,
        coefficients: Vec<String>,
        spline_weight: Vec<String>,
        silu_weight: Vec<String>,
    },
    Frkan {
        dims: [usize; 2],
        #[serde(rename = "G")]
        intervals: usize,
        #[serde(rename = "K")]
        order: usize,
        h: usize,
        a: f64,
        b: f64,
        silu: bool,
        norm: Option<NormRecord>,
        weight: Vec<String>,
        coefficients: Vec<String>,
        shift: Vec<String>,
    },
    Mlp {
        dims: [usize; 2],
        activation: Activation,
        norm: Option<NormRecord>,
        weight: Vec<String>,
        bias: Vec<String>,
    },
}

fn encode(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.16e}")).collect()
}

fn decode(v: &[String], what: &str, expected: usize) -> Result<Vec<f64>, LayerError> {
    if v.len() != expected {
        return Err(LayerError::CorruptCheckpoint(format!(
            "{what} has {} entries, expected {expected}",
            v.len()
        )));
    }
    v.iter()
        .map(|s| {
            s.parse::<f64>().map_err(|_| {
                LayerError::CorruptCheckpoint(format!("{what}: `{s}` is not a number"))
            })
        })
        .collect()
}

fn encode_norm(n: &Option<LayerNorm>) -> Option<NormRecord> {
    n.as_ref().map(|n| NormRecord {
        gamma: encode(&n.gamma),
        beta: encode(&n.beta),
    })
}

fn decode_norm(n: &Option<NormRecord>, d_in: usize) -> Result<Option<LayerNorm>, LayerError> {
    n.as_ref()
        .map(|r| {
            Ok(LayerNorm {
                gamma: decode(&r.gamma, "norm gamma", d_in)?,
                beta: decode(&r.beta, "norm beta", d_in)?,
            })
        })
        .transpose()
}

impl Network {
    pub fn to_checkpoint_json(&self) -> String {
        let layers = self
            .stages
            .iter()
            .map(|st| {
                let norm = encode_norm(&st.norm);
                match &st.layer {
                    Layer::Kan(l) => LayerRecord::Kan {
                        dims: [l.d_in, l.d_out],
                        intervals: l.knots.intervals(),
                        order: l.knots.order(),
                        a: l.knots.lower(),
                        b: l.knots.upper(),
                        silu: l.silu,
                        norm,
                        coefficients: encode(&l.coefficients),
                        spline_weight: encode(&l.spline_weight),
                        silu_weight: encode(&l.silu_weight),
                    },
                    Layer::FrKan(l) => {
                        let s = l.grid();
                        let coefficients: Vec<f64> = l
                            .groups
                            .iter()
                            .flat_map(|g| g.coefficients.iter().copied())
                            .collect();
                        let shift: Vec<f64> = l
                            .groups
                            .iter()
                            .flat_map(|g| g.knots.shift().iter().copied())
                            .collect();
                        LayerRecord::Frkan {
                            dims: [l.d_in, l.d_out],
                            intervals: s.intervals,
                            order: s.order,
                            h: l.num_groups(),
                            a: s.lower,
                            b: s.upper,
                            silu: l.silu,
                            norm,
                            weight: encode(&l.weight),
                            coefficients: encode(&coefficients),
                            shift: encode(&shift),
                        }
                    }
                    Layer::Mlp(l) => LayerRecord::Mlp {
                        dims: [l.d_in, l.d_out],
                        activation: l.activation,
                        norm,
                        weight: encode(&l.weight),
                        bias: encode(&l.bias),
                    },
                }
            })
            .collect();
        let file = CheckpointFile {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            architecture: self.descriptor(),
            layers,
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, LayerError> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| LayerError::CorruptCheckpoint(e.to_string()))?;
        if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(LayerError::CorruptCheckpoint(format!(
                "unsupported schema version {}",
                file.schema_version
            )));
        }
        let corrupt = |e: LayerError| match e {
            LayerError::CorruptCheckpoint(m) => LayerError::CorruptCheckpoint(m),
            other => LayerError::CorruptCheckpoint(other.to_string()),
        };
        let mut stages = Vec::with_capacity(file.layers.len());
        for rec in &file.layers {
            let stage = match rec {
                LayerRecord::Kan {
                    dims: [d_in, d_out],
                    intervals,
                    order,
                    a,
                    b,
                    silu,
                    norm,
                    coefficients,
                    spline_weight,
                    silu_weight,
                } => {
                    let grid = GridSpec::new(*intervals, *order, *a, *b);
                    let mut l = KanLayer::zeros(*d_in, *d_out, grid).map_err(corrupt)?;
                    let edges = d_in * d_out;
                    l.coefficients =
                        decode(coefficients, "coefficients", edges * grid.num_basis())?;
                    l.spline_weight = decode(spline_weight, "spline_weight", edges)?;
                    l.silu_weight = decode(silu_weight, "silu_weight", edges)?;
                    l.silu = *silu;
                    Stage {
                        norm: decode_norm(norm, *d_in)?,
                        layer: Layer::Kan(l),
                    }
                }
                LayerRecord::Frkan {
                    dims: [d_in, d_out],
                    intervals,
                    order,
                    h,
                    a,
                    b,
                    silu,
                    norm,
                    weight,
                    coefficients,
                    shift,
                } => {
                    let grid = GridSpec::new(*intervals, *order, *a, *b);
                    let mut l = FrKanLayer::zeros(*d_in, *d_out, *h, grid).map_err(corrupt)?;
                    l.weight = decode(weight, "weight", d_in * d_out)?;
                    let nb = grid.num_basis();
                    let ns = intervals + 1;
                    let c = decode(coefficients, "coefficients", h * nb)?;
                    let s = decode(shift, "shift", h * ns)?;
                    for (k, gr) in l.groups.iter_mut().enumerate() {
                        gr.coefficients.copy_from_slice(&c[k * nb..(k + 1) * nb]);
                        gr.knots
                            .set_shift(&s[k * ns..(k + 1) * ns])
                            .map_err(|e| corrupt(e.into()))?;
                    }
                    l.silu = *silu;
                    Stage {
                        norm: decode_norm(norm, *d_in)?,
                        layer: Layer::FrKan(l),
                    }
                }
                LayerRecord::Mlp {
                    dims: [d_in, d_out],
                    activation,
                    norm,
                    weight,
                    bias,
                } => {
                    let mut l = MlpLayer::zeros(*d_in, *d_out, *activation);
                    l.weight = decode(weight, "weight", d_in * d_out)?;
                    l.bias = decode(bias, "bias", *d_out)?;
                    Stage {
                        norm: decode_norm(norm, *d_in)?,
                        layer: Layer::Mlp(l),
                    }
                }
            };
            stages.push(stage);
        }
        let net = Network::from_stages(stages).map_err(corrupt)?;
        if net.descriptor() != file.architecture {
            return Err(LayerError::CorruptCheckpoint(format!(
                "architecture `{}` does not match layers `{}`",
                file.architecture,
                net.descriptor()
            )));
        }
        Ok(net)
    }
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<(), LayerError> {
    std::fs::write(path, net.to_checkpoint_json())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network, LayerError> {
    let text = std::fs::read_to_string(path)?;
    Network::from_checkpoint_json(&text)
}
