//! Breakpoint counting for piecewise-linear network maps and the knot-count
//! bounds they are compared against.
//!
//! The scanner samples `f` on a uniform lattice, flags lattice intervals where
//! the one-sided slopes around them differ, and refines each flag by
//! bisection. Only order-1 splines and ReLU layers produce slope jumps; for
//! higher orders the knots are too smooth to see this way.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{Activation, KanLayer, Layer, LayerError, Network, Stage};
use crate::spline::GridSpec;

#[derive(Debug, Error)]
pub enum KnotError {
    #[error("knot analysis supports order-1 splines only, found order {0}")]
    UnsupportedOrder(usize),
    #[error("function is not finite at x = {0}")]
    NonFiniteValue(f64),
    #[error("invalid detector settings: {0}")]
    InvalidSettings(String),
    #[error("invalid bound arguments: {0}")]
    InvalidBoundInput(String),
    #[error("layer {0} is not piecewise linear: {1}")]
    UnsupportedLayer(usize, String),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeThreshold {
    /// Fraction of the largest lattice slope magnitude.
    Relative(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSettings {
    pub samples: usize,
    pub threshold: SlopeThreshold,
    /// `None` means `1e-5 · (hi - lo)`.
    pub merge_tolerance: Option<f64>,
    pub refinement_depth: u32,
}

impl Default for ScanSettings {
    fn default() -> Self {
        ScanSettings {
            samples: 200_000,
            threshold: SlopeThreshold::Relative(1e-3),
            merge_tolerance: None,
            refinement_depth: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub samples: usize,
    pub slope_threshold: f64,
    pub refinement_depth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointReport {
    pub interval: [f64; 2],
    pub positions: Vec<f64>,
    pub slope_jumps: Vec<f64>,
    pub interior_count: usize,
    pub merge_tolerance: f64,
    pub detector: DetectorSettings,
}

/// Interior breakpoints of `f` on `[lo, hi]`.
pub fn scan_breakpoints<F>(
    f: F,
    lo: f64,
    hi: f64,
    settings: &ScanSettings,
) -> Result<BreakpointReport, KnotError>
where
    F: Fn(f64) -> f64 + Sync,
{
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(KnotError::InvalidSettings(format!(
            "interval [{lo}, {hi}] is empty"
        )));
    }
    if settings.samples < 1000 {
        return Err(KnotError::InvalidSettings(format!(
            "samples = {} is below the minimum of 1000",
            settings.samples
        )));
    }
    let n = settings.samples;
    let step = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n)
        .map(|k| if k == n - 1 { hi } else { lo + k as f64 * step })
        .collect();
    let ys: Vec<f64> = xs.par_iter().map(|&x| f(x)).collect();
    if let Some(k) = ys.iter().position(|y| !y.is_finite()) {
        return Err(KnotError::NonFiniteValue(xs[k]));
    }
    // slope[k] covers [x_k, x_{k+1}]
    let slope: Vec<f64> = (0..n - 1)
        .map(|k| (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]))
        .collect();
    let max_slope = slope.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    let threshold = match settings.threshold {
        SlopeThreshold::Relative(r) => r * max_slope,
        SlopeThreshold::Absolute(t) => t,
    };
    let merge_tol = settings.merge_tolerance.unwrap_or(1e-5 * (hi - lo));
    let detector = DetectorSettings {
        samples: n,
        slope_threshold: threshold,
        refinement_depth: settings.refinement_depth,
    };
    let m = slope.len();
    // jump[k] = slope right of interval k minus slope left of it, k in 1..m-1
    let jump = |k: usize| slope[k + 1] - slope[k - 1];
    let mut candidates = Vec::new();
    if threshold > 0.0 && m >= 3 {
        for k in 1..m - 1 {
            let t = jump(k).abs();
            if t <= threshold {
                continue;
            }
            let left = if k > 1 { jump(k - 1).abs() } else { 0.0 };
            let right = if k + 1 < m - 1 {
                jump(k + 1).abs()
            } else {
                0.0
            };
            if t >= left && t >= right {
                candidates.push(k);
            }
        }
    }
    let refined: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|&k| {
            let p = refine(&f, &xs, &ys, k, settings.refinement_depth);
            (p, jump(k))
        })
        .collect();
    let mut positions: Vec<f64> = Vec::with_capacity(refined.len());
    let mut slope_jumps: Vec<f64> = Vec::with_capacity(refined.len());
    for (p, j) in refined {
        match positions.last() {
            Some(&q) if p - q <= merge_tol => {
                let last = slope_jumps.len() - 1;
                if j.abs() > slope_jumps[last].abs() {
                    positions[last] = p;
                    slope_jumps[last] = j;
                }
            }
            _ => {
                positions.push(p);
                slope_jumps.push(j);
            }
        }
    }
    Ok(BreakpointReport {
        interval: [lo, hi],
        interior_count: positions.len(),
        positions,
        slope_jumps,
        merge_tolerance: merge_tol,
        detector,
    })
}

/// Bisection between the left line through lattice points `k-1, k` and the
/// right line through `k+1, k+2`.
fn refine<F: Fn(f64) -> f64>(f: &F, xs: &[f64], ys: &[f64], k: usize, depth: u32) -> f64 {
    let line = |i: usize, x: f64| {
        let s = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        ys[i] + s * (x - xs[i])
    };
    let n = xs.len();
    let (mut a, mut b) = (xs[k], xs[k + 1]);
    let right_base = if k + 2 < n { k + 1 } else { k };
    for _ in 0..depth {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let y = f(mid);
        let dl = (y - line(k - 1, mid)).abs();
        let dr = (y - line(right_base, mid)).abs();
        if dl <= dr {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundFormula {
    Theorem1,
    Theorem2,
    Lemma2Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundResult {
    pub lower: u64,
    /// Saturates at `u64::MAX`.
    pub upper: u64,
    pub formula: BoundFormula,
}

fn check_grid_args(g: usize, k: usize, l: usize) -> Result<(), KnotError> {
    if g < 2 || k < 1 || l < 1 {
        return Err(KnotError::InvalidBoundInput(format!(
            "need G >= 2, K >= 1, L >= 1; got G={g}, K={k}, L={l}"
        )));
    }
    Ok(())
}

fn pow_sat(base: u64, exp: usize) -> u64 {
    base.saturating_pow(u32::try_from(exp).unwrap_or(u32::MAX))
}

/// `G+K <= N <= (G+K) + (G(G-1))^L`.
pub fn theorem1_bounds(g: usize, k: usize, l: usize) -> Result<BoundResult, KnotError> {
    theorem2_bounds(g, k, l, 1).map(|b| BoundResult {
        formula: BoundFormula::Theorem1,
        ..b
    })
}

/// `G+K <= N <= h(G+K) + (hG(G-1))^L`.
pub fn theorem2_bounds(g: usize, k: usize, l: usize, h: usize) -> Result<BoundResult, KnotError> {
    check_grid_args(g, k, l)?;
    if h < 1 {
        return Err(KnotError::InvalidBoundInput("need h >= 1".into()));
    }
    let (g, k, h) = (g as u64, k as u64, h as u64);
    let base = h.saturating_mul(g).saturating_mul(g - 1);
    Ok(BoundResult {
        lower: g + k,
        upper: h.saturating_mul(g + k).saturating_add(pow_sat(base, l)),
        formula: BoundFormula::Theorem2,
    })
}

/// Knots after a ReLU layer of width `n` fed by a map with `m_prev` knots.
pub fn lemma2_mlp_bound(m_prev: u64, n: u64) -> u64 {
    m_prev.saturating_add(n.saturating_mul(m_prev.saturating_add(1)))
}

/// `Σ ⌊|Δy_i| / Δg⌋`: knots a layer adds when its input sweeps `Δy_i` per
/// segment across a grid of spacing `Δg`.
pub fn predict_new_knots(deltas: &[f64], dg: f64) -> Result<u64, KnotError> {
    if !(dg > 0.0 && dg.is_finite()) {
        return Err(KnotError::InvalidBoundInput(format!(
            "Δg must be positive, got {dg}"
        )));
    }
    Ok(deltas
        .iter()
        .map(|d| {
            let q = d.abs() / dg;
            // absorb round-off such as 2 / 0.4 = 4.999...
            (q * (1.0 + 1e-12)).floor() as u64
        })
        .sum())
}

/// Two width-1 order-1 KAN layers: the first is the alternating sawtooth
/// `c_j = (-1)^j`, the second has coefficients drawn from `U[0, 1]`.
pub fn build_sawtooth_network(
    g: usize,
    k: usize,
    a: f64,
    b: f64,
    seed: u64,
) -> Result<Network, KnotError> {
    if k != 1 {
        return Err(KnotError::UnsupportedOrder(k));
    }
    if g < 2 {
        return Err(KnotError::InvalidBoundInput(format!(
            "sawtooth needs G >= 2, got {g}"
        )));
    }
    let grid = GridSpec::new(g, k, a, b);
    let mut first = KanLayer::zeros(1, 1, grid).map_err(KnotError::Layer)?;
    first.silu = false;
    first.spline_weight = vec![1.0];
    for (j, c) in first.coefficients.iter_mut().enumerate() {
        *c = if j % 2 == 0 { 1.0 } else { -1.0 };
    }
    let mut second = KanLayer::zeros(1, 1, grid).map_err(KnotError::Layer)?;
    second.silu = false;
    second.spline_weight = vec![1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in second.coefficients.iter_mut() {
        *c = rng.random_range(0.0..1.0);
    }
    Ok(Network::from_stages(vec![
        Stage {
            norm: None,
            layer: Layer::Kan(first),
        },
        Stage {
            norm: None,
            layer: Layer::Kan(second),
        },
    ])?)
}

/// Affine line `t ↦ anchor + t · direction` through input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSlice {
    pub anchor: Vec<f64>,
    pub direction: Vec<f64>,
}

impl InputSlice {
    /// The `dim`-th coordinate axis through the origin.
    pub fn axis(input_dim: usize, dim: usize) -> Self {
        let mut direction = vec![0.0; input_dim];
        direction[dim] = 1.0;
        InputSlice {
            anchor: vec![0.0; input_dim],
            direction,
        }
    }

    /// All inputs equal to `t`.
    pub fn diagonal(input_dim: usize) -> Self {
        InputSlice {
            anchor: vec![0.0; input_dim],
            direction: vec![1.0; input_dim],
        }
    }

    pub fn point(&self, t: f64) -> Vec<f64> {
        self.anchor
            .iter()
            .zip(&self.direction)
            .map(|(a, d)| a + t * d)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotAudit {
    pub interval: [f64; 2],
    pub positions: Vec<f64>,
    pub slope_jumps: Vec<f64>,
    pub interior_count: usize,
    /// Count compared with the bounds: interior plus the two range endpoints
    /// for spline networks, interior only for ReLU networks.
    pub measured_total: u64,
    pub bounds: BoundResult,
    /// Exact single-layer count `G + K` (order-1 spline networks only).
    pub single_layer_count: Option<u64>,
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub pass: bool,
    pub convention: String,
    pub detector: DetectorSettings,
    pub merge_tolerance: f64,
}

/// Bound appropriate for the network's layer mix.
pub fn network_bounds(net: &Network) -> Result<BoundResult, KnotError> {
    let mut spline_layers = 0;
    let mut max_g = 0;
    let mut order = 1;
    let mut max_h = 0;
    let mut relu = Vec::new();
    for st in net.stages() {
        match &st.layer {
            Layer::Kan(l) => {
                spline_layers += 1;
                max_g = max_g.max(l.knots.intervals());
                order = l.knots.order();
            }
            Layer::FrKan(l) => {
                spline_layers += 1;
                max_g = max_g.max(l.grid().intervals);
                order = l.grid().order;
                max_h = max_h.max(l.num_groups());
            }
            Layer::Mlp(l) => {
                if l.activation == Activation::Relu {
                    relu.push(l.d_out as u64);
                }
            }
        }
    }
    if spline_layers == 0 {
        let upper = relu.iter().fold(0u64, |m, &n| lemma2_mlp_bound(m, n));
        return Ok(BoundResult {
            lower: 0,
            upper,
            formula: BoundFormula::Lemma2Mlp,
        });
    }
    let depth = spline_layers + relu.len();
    if max_h > 0 {
        theorem2_bounds(max_g, order, depth, max_h)
    } else {
        theorem1_bounds(max_g, order, depth)
    }
}

fn check_piecewise_linear(net: &Network) -> Result<(), KnotError> {
    for (idx, st) in net.stages().iter().enumerate() {
        if st.norm.is_some() {
            return Err(KnotError::UnsupportedLayer(
                idx,
                "preceded by layer norm".into(),
            ));
        }
        if let Some(grid) = st.layer.grid() {
            if grid.order != 1 {
                return Err(KnotError::UnsupportedOrder(grid.order));
            }
        }
    }
    Ok(())
}

/// Scans the sum of the network outputs along `slice` over `[lo, hi]` and
/// compares the count with [`network_bounds`].
pub fn audit_network_knots(
    net: &Network,
    slice: &InputSlice,
    lo: f64,
    hi: f64,
    settings: &ScanSettings,
) -> Result<KnotAudit, KnotError> {
    check_piecewise_linear(net)?;
    if slice.anchor.len() != net.input_dim() || slice.direction.len() != net.input_dim() {
        return Err(KnotError::Layer(LayerError::InputLength {
            expected: net.input_dim(),
            got: slice.anchor.len().min(slice.direction.len()),
        }));
    }
    let bound = net.bind_values();
    let report = scan_breakpoints(
        |t| {
            bound
                .predict(&slice.point(t))
                .map(|y| y.iter().sum())
                .unwrap_or(f64::NAN)
        },
        lo,
        hi,
        settings,
    )?;
    let bounds = network_bounds(net)?;
    let is_spline = bounds.formula != BoundFormula::Lemma2Mlp;
    let measured_total = report.interior_count as u64 + if is_spline { 2 } else { 0 };
    let single_layer_count = match net.stages() {
        [only] => only.layer.grid().map(|g| (g.intervals + g.order) as u64),
        _ => None,
    };
    let lower_ok = bounds.lower <= measured_total;
    let upper_ok = measured_total <= bounds.upper;
    let convention = if is_spline {
        "measured_total = interior breakpoints + 2 range endpoints; segment sums over i = 1..G-1 (the i = 1..G variant adds one segment per layer); upper bound uses the literal (G(G-1))^L product"
    } else {
        "measured_total = interior breakpoints; bound chains m_l = m_{l-1} + n_l (m_{l-1} + 1) over ReLU layers"
    };
    Ok(KnotAudit {
        interval: report.interval,
        positions: report.positions,
        slope_jumps: report.slope_jumps,
        interior_count: report.interior_count,
        measured_total,
        bounds,
        single_layer_count,
        lower_ok,
        upper_ok,
        pass: lower_ok && upper_ok,
        convention: convention.to_string(),
        detector: report.detector,
        merge_tolerance: report.merge_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{FrKanLayer, MlpLayer};

    #[test]
    fn single_kink_of_abs() {
        let r = scan_breakpoints(f64::abs, -1.0, 1.0, &ScanSettings::default()).unwrap();
        assert_eq!(r.interior_count, 1);
        assert!(r.positions[0].abs() <= 1e-6);
        assert!((r.slope_jumps[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn affine_has_no_kinks() {
        let r = scan_breakpoints(|x| 3.0 * x + 2.0, -1.0, 1.0, &ScanSettings::default()).unwrap();
        assert_eq!(r.interior_count, 0);
    }

    #[test]
    fn off_lattice_kink_is_located() {
        let p = 0.123_456_789;
        let r = scan_breakpoints(
            |x| (x - p).max(0.0) * 4.0,
            -1.0,
            1.0,
            &ScanSettings::default(),
        )
        .unwrap();
        assert_eq!(r.interior_count, 1);
        assert!((r.positions[0] - p).abs() <= 1e-9);
    }

    #[test]
    fn non_finite_is_reported() {
        let err = scan_breakpoints(
            |x| 1.0 / x,
            -1.0,
            1.0,
            &ScanSettings {
                samples: 1001,
                ..Default::default()
            },
        );
        assert!(matches!(err, Err(KnotError::NonFiniteValue(_))));
        let few = scan_breakpoints(
            f64::abs,
            -1.0,
            1.0,
            &ScanSettings {
                samples: 10,
                ..Default::default()
            },
        );
        assert!(matches!(few, Err(KnotError::InvalidSettings(_))));
    }

    #[test]
    fn theorem_bound_examples() {
        let b = theorem1_bounds(5, 3, 1).unwrap();
        assert_eq!((b.lower, b.upper), (8, 28));
        assert_eq!(theorem1_bounds(5, 3, 2).unwrap().upper, 408);
        let b = theorem1_bounds(2, 1, 1).unwrap();
        assert_eq!((b.lower, b.upper), (3, 5));
        for (g, k, l) in [(5, 3, 1), (7, 1, 3), (20, 3, 2)] {
            let one = theorem1_bounds(g, k, l).unwrap();
            let two = theorem2_bounds(g, k, l, 1).unwrap();
            assert_eq!((one.lower, one.upper), (two.lower, two.upper));
            assert_eq!(theorem2_bounds(g, k, l, 4).unwrap().lower, one.lower);
        }
        assert_eq!(theorem2_bounds(5, 3, 1, 2).unwrap().upper, 56);
        assert!(theorem1_bounds(1, 1, 1).is_err());
        assert_eq!(theorem1_bounds(1000, 3, 50).unwrap().upper, u64::MAX);
    }

    #[test]
    fn lemma2_examples() {
        assert_eq!(lemma2_mlp_bound(0, 5), 5);
        assert_eq!(lemma2_mlp_bound(5, 3), 23);
        assert_eq!(lemma2_mlp_bound(0, 1), 1);
    }

    #[test]
    fn new_knot_prediction() {
        assert_eq!(predict_new_knots(&[0.1, 0.3, 0.39], 0.4).unwrap(), 0);
        assert_eq!(predict_new_knots(&[2.0], 0.4).unwrap(), 5);
        assert_eq!(predict_new_knots(&[0.4], 0.4).unwrap(), 1);
        assert!(predict_new_knots(&[1.0], 0.0).is_err());
    }

    #[test]
    fn sawtooth_first_layer() {
        let net = build_sawtooth_network(5, 1, -1.0, 1.0, 11).unwrap();
        let first = Network::from_stages(vec![net.stages()[0].clone()]).unwrap();
        let r = audit_network_knots(
            &first,
            &InputSlice::axis(1, 0),
            -1.0,
            1.0,
            &ScanSettings::default(),
        )
        .unwrap();
        assert_eq!(r.interior_count, 4);
        for (i, (&p, &j)) in r.positions.iter().zip(&r.slope_jumps).enumerate() {
            let expected = -1.0 + 0.4 * (i + 1) as f64;
            assert!((p - expected).abs() <= 1e-6);
            // slopes alternate ±5, so jumps alternate ±10
            assert!((j.abs() - 10.0).abs() < 1e-6);
        }
        let range: Vec<f64> = (0..=100)
            .map(|i| first.predict(&[-1.0 + 0.02 * i as f64]).unwrap()[0])
            .collect();
        let lo = range.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = range.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (-1.0, 1.0));
        assert!(matches!(
            build_sawtooth_network(5, 2, -1.0, 1.0, 1),
            Err(KnotError::UnsupportedOrder(2))
        ));
    }

    #[test]
    fn sawtooth_composition_adds_knots() {
        let net = build_sawtooth_network(5, 1, -1.0, 1.0, 11).unwrap();
        let r = audit_network_knots(
            &net,
            &InputSlice::axis(1, 0),
            -1.0,
            1.0,
            &ScanSettings::default(),
        )
        .unwrap();
        assert!(r.interior_count > 4);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn relu_network_uses_lemma2() {
        let mut l = MlpLayer::zeros(1, 3, Activation::Relu);
        l.weight = vec![1.0, -2.0, 0.5];
        l.bias = vec![0.2, 0.3, -0.1];
        let mut out = MlpLayer::zeros(3, 1, Activation::Identity);
        out.weight = vec![1.0, 1.0, 1.0];
        let predicted = l.predicted_knots();
        let net = Network::from_stages(vec![
            Stage {
                norm: None,
                layer: Layer::Mlp(l),
            },
            Stage {
                norm: None,
                layer: Layer::Mlp(out),
            },
        ])
        .unwrap();
        let r = audit_network_knots(
            &net,
            &InputSlice::axis(1, 0),
            -1.0,
            1.0,
            &ScanSettings::default(),
        )
        .unwrap();
        assert_eq!(r.bounds.formula, BoundFormula::Lemma2Mlp);
        assert_eq!(r.bounds.upper, 3);
        assert_eq!(r.interior_count, 3);
        for (p, q) in r.positions.iter().zip(&predicted) {
            assert!((p - q).abs() <= 1e-6);
        }
    }

    #[test]
    fn higher_order_is_rejected() {
        let l = FrKanLayer::zeros(2, 1, 1, GridSpec::new(5, 3, -1.0, 1.0)).unwrap();
        let net = Network::from_stages(vec![Stage {
            norm: None,
            layer: Layer::FrKan(l),
        }])
        .unwrap();
        let r = audit_network_knots(
            &net,
            &InputSlice::axis(2, 0),
            -1.0,
            1.0,
            &ScanSettings::default(),
        );
        assert!(matches!(r, Err(KnotError::UnsupportedOrder(3))));
    }
}
