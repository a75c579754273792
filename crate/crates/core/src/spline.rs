//! B-spline knot vectors, Cox–de Boor evaluation and the free-knot transform.
//!
//! Grid convention: `G` intervals on `[a, b]` give `G + 1` base points, plus
//! `K` extension points on each side at the same spacing `Δg = (b - a) / G`.
//! That is `G + 1 + 2K` knots and `G + K` basis functions of order `K`.
//!
//! Free knots add a learnable shift to the interior base points; the shifted
//! sequence is sorted and consecutive gaps are clamped to at least
//! `MIN_GAP_FRACTION * Δg`. The points at `a` and `b` and the extension points
//! never move, so the basis keeps a partition of unity on all of `[a, b]`.

use arrayvec::ArrayVec;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Eval, Graph, DIVIDING_FLOOR};

/// Highest supported spline order.
pub const MAX_ORDER: usize = 7;

/// Minimum gap between consecutive effective knots, as a fraction of `Δg`.
pub const MIN_GAP_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("invalid grid range [{lower}, {upper}]: upper bound must exceed lower bound")]
    InvalidRange { lower: f64, upper: f64 },
    #[error("grid needs at least one interval and order in 1..={MAX_ORDER} (got G={intervals}, K={order})")]
    InvalidGrid { intervals: usize, order: usize },
    #[error("second-difference penalty needs at least 3 coefficients, got {0}")]
    TooFewCoefficients(usize),
    #[error("expected {expected} values for {what}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shift scale Z must be positive, got {0}")]
    InvalidShiftScale(f64),
}

/// Grid shape shared by every group of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub intervals: usize,
    pub order: usize,
    pub lower: f64,
    pub upper: f64,
}

impl GridSpec {
    pub fn new(intervals: usize, order: usize, lower: f64, upper: f64) -> Self {
        GridSpec {
            intervals,
            order,
            lower,
            upper,
        }
    }

    pub fn num_basis(&self) -> usize {
        self.intervals + self.order
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / self.intervals as f64
    }

    pub fn validate(&self) -> Result<(), SplineError> {
        if !(self.upper > self.lower) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(SplineError::InvalidRange {
                lower: self.lower,
                upper: self.upper,
            });
        }
        if self.intervals == 0 || self.order == 0 || self.order > MAX_ORDER {
            return Err(SplineError::InvalidGrid {
                intervals: self.intervals,
                order: self.order,
            });
        }
        Ok(())
    }
}

/// A group's base grid, learnable shift and sorted effective knots.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    spec: GridSpec,
    shift: Vec<f64>,
    effective: Vec<f64>,
}

/// Uniform knot vector with zero shift.
pub fn make_uniform_grid(a: f64, b: f64, g: usize, k: usize) -> Result<KnotVector, SplineError> {
    KnotVector::uniform(GridSpec::new(g, k, a, b))
}

impl KnotVector {
    pub fn uniform(spec: GridSpec) -> Result<Self, SplineError> {
        spec.validate()?;
        let mut kv = KnotVector {
            spec,
            shift: vec![0.0; spec.intervals + 1],
            effective: Vec::new(),
        };
        kv.refresh();
        Ok(kv)
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn intervals(&self) -> usize {
        self.spec.intervals
    }

    pub fn order(&self) -> usize {
        self.spec.order
    }

    pub fn lower(&self) -> f64 {
        self.spec.lower
    }

    pub fn upper(&self) -> f64 {
        self.spec.upper
    }

    pub fn spacing(&self) -> f64 {
        self.spec.spacing()
    }

    pub fn min_gap(&self) -> f64 {
        MIN_GAP_FRACTION * self.spacing()
    }

    pub fn num_basis(&self) -> usize {
        self.spec.num_basis()
    }

    pub fn num_knots(&self) -> usize {
        self.spec.intervals + 1 + 2 * self.spec.order
    }

    /// `[a - KΔg, b + KΔg]`, the span of the unshifted knots.
    pub fn support(&self) -> (f64, f64) {
        let ext = self.spec.order as f64 * self.spacing();
        (self.spec.lower - ext, self.spec.upper + ext)
    }

    pub fn base_point(&self, i: usize) -> f64 {
        let GridSpec {
            intervals,
            lower,
            upper,
            ..
        } = self.spec;
        if i == intervals {
            upper
        } else {
            lower + (upper - lower) * i as f64 / intervals as f64
        }
    }

    pub fn base_points(&self) -> Vec<f64> {
        (0..=self.spec.intervals)
            .map(|i| self.base_point(i))
            .collect()
    }

    /// Whether base point `i` receives its shift (endpoints stay put).
    pub fn is_shiftable(&self, i: usize) -> bool {
        i > 0 && i < self.spec.intervals
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn set_shift(&mut self, shift: &[f64]) -> Result<(), SplineError> {
        if shift.len() != self.shift.len() {
            return Err(SplineError::LengthMismatch {
                what: "knot shift",
                expected: self.shift.len(),
                got: shift.len(),
            });
        }
        self.shift.copy_from_slice(shift);
        self.refresh();
        Ok(())
    }

    pub fn effective_knots(&self) -> &[f64] {
        &self.effective
    }

    /// Recomputes the cached effective knots from the current shift.
    pub fn refresh(&mut self) {
        let shift = self.shift.clone();
        self.effective = self.free_knots(&mut Eval, &shift);
    }

    /// Sorted, gap-clamped knots with the given shift, recorded on `g`.
    pub fn free_knots<G: Graph>(&self, g: &mut G, shift: &[G::T]) -> Vec<G::T> {
        let k = self.spec.order;
        let dg = self.spacing();
        let mut points = Vec::with_capacity(self.num_knots());
        for e in (1..=k).rev() {
            points.push(g.constant(self.spec.lower - e as f64 * dg));
        }
        for i in 0..=self.spec.intervals {
            let base = g.constant(self.base_point(i));
            if self.is_shiftable(i) {
                points.push(g.add(base, shift[i]));
            } else {
                points.push(base);
            }
        }
        for e in 1..=k {
            points.push(g.constant(self.spec.upper + e as f64 * dg));
        }
        let sorted = g.sort(&points);
        let gap = g.constant(self.min_gap());
        let mut out: Vec<G::T> = Vec::with_capacity(sorted.len());
        for (i, &t) in sorted.iter().enumerate() {
            if i == 0 {
                out.push(t);
            } else {
                let floor = g.add(out[i - 1], gap);
                out.push(g.max(t, floor));
            }
        }
        out
    }

    /// Effective knots as plain values.
    pub fn apply_free_shift(&self) -> Vec<f64> {
        self.free_knots(&mut Eval, &self.shift)
    }

    /// Constant (unshifted) knots recorded on `g`.
    pub fn fixed_knots<G: Graph>(&self, g: &mut G) -> Vec<G::T> {
        self.effective.iter().map(|&t| g.constant(t)).collect()
    }

    /// Half-width `(b - a) / (Z·G)` of the shift initialisation range.
    pub fn shift_half_width(&self, z: f64) -> f64 {
        (self.spec.upper - self.spec.lower) / (z * self.spec.intervals as f64)
    }

    /// Draws a shift vector i.i.d. uniform on `±(b - a)/(Z·G)` for the
    /// shiftable points; endpoint entries stay zero. One draw is consumed per
    /// entry regardless of the range, so equal seeds give equal draws.
    pub fn sample_shift<R: Rng + ?Sized>(&self, z: f64, rng: &mut R) -> Vec<f64> {
        let hw = if z.is_infinite() {
            0.0
        } else {
            self.shift_half_width(z)
        };
        (0..=self.spec.intervals)
            .map(|i| {
                let u: f64 = rng.random_range(-1.0..=1.0);
                if self.is_shiftable(i) {
                    u * hw
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Seeded shift initialisation for one knot vector.
pub fn init_shift(kv: &KnotVector, z: f64, seed: u64) -> Result<Vec<f64>, SplineError> {
    if !(z > 0.0) {
        return Err(SplineError::InvalidShiftScale(z));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(kv.sample_shift(z, &mut rng))
}

/// Order-0 indicator on the half-open span `[t_j, t_{j+1})`.
pub fn basis_k0(x: f64, kv: &KnotVector, j: usize) -> f64 {
    let t = kv.effective_knots();
    if j + 1 < t.len() && t[j] <= x && x < t[j + 1] {
        1.0
    } else {
        0.0
    }
}

fn cox_de_boor(x: f64, t: &[f64], j: usize, k: usize) -> f64 {
    if k == 0 {
        return if t[j] <= x && x < t[j + 1] { 1.0 } else { 0.0 };
    }
    let frac = |num: f64, den: f64| {
        if den.abs() <= DIVIDING_FLOOR {
            0.0
        } else {
            num / den
        }
    };
    frac(x - t[j], t[j + k] - t[j]) * cox_de_boor(x, t, j, k - 1)
        + frac(t[j + k + 1] - x, t[j + k + 1] - t[j + 1]) * cox_de_boor(x, t, j + 1, k - 1)
}

/// Full Cox–de Boor recursion for `B_{j,k}` on the effective knots.
/// Returns 0 when `j` has no support at order `k`.
pub fn basis(x: f64, kv: &KnotVector, j: usize, k: usize) -> f64 {
    let t = kv.effective_knots();
    if j + k + 1 >= t.len() {
        return 0.0;
    }
    cox_de_boor(x, t, j, k)
}

/// The `order + 1` basis functions that can be nonzero at a point.
#[derive(Debug, Clone)]
pub struct BasisWindow<T> {
    /// Index of the first basis function in `values`.
    pub first: usize,
    pub values: ArrayVec<T, { MAX_ORDER + 1 }>,
}

/// Local Cox–de Boor evaluation on the span containing `x`.
///
/// Returns `None` when `x` lies outside `[t_0, t_last)`. Entries of the
/// window are clipped to existing basis functions `0..knots.len() - order - 1`.
pub fn basis_window<G: Graph>(
    g: &mut G,
    x: G::T,
    knots: &[G::T],
    order: usize,
) -> Option<BasisWindow<G::T>> {
    let n = knots.len();
    let xv = g.value(x);
    if n < 2 || xv < g.value(knots[0]) || xv >= g.value(knots[n - 1]) {
        return None;
    }
    // span s with t_s <= x < t_{s+1}
    let s = {
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if g.value(knots[mid]) <= xv {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    // level[r] holds B_{s-k+r, k}; None marks a function that does not exist.
    let mut level: ArrayVec<Option<G::T>, { MAX_ORDER + 1 }> = ArrayVec::new();
    level.push(Some(g.constant(1.0)));
    for k in 1..=order {
        let mut next: ArrayVec<Option<G::T>, { MAX_ORDER + 1 }> = ArrayVec::new();
        for r in 0..=k {
            let j = s as isize - k as isize + r as isize;
            if j < 0 || j as usize + k + 1 > n - 1 {
                next.push(None);
                continue;
            }
            let j = j as usize;
            let mut acc: Option<G::T> = None;
            // left term uses B_{j,k-1} = level[r-1]
            if r >= 1 {
                if let Some(prev) = level[r - 1] {
                    let num = g.sub(x, knots[j]);
                    let den = g.sub(knots[j + k], knots[j]);
                    let w = g.div_or_zero(num, den);
                    acc = Some(g.mul(w, prev));
                }
            }
            // right term uses B_{j+1,k-1} = level[r]
            if r < k {
                if let Some(prev) = level[r] {
                    let num = g.sub(knots[j + k + 1], x);
                    let den = g.sub(knots[j + k + 1], knots[j + 1]);
                    let w = g.div_or_zero(num, den);
                    let term = g.mul(w, prev);
                    acc = Some(match acc {
                        Some(a) => g.add(a, term),
                        None => term,
                    });
                }
            }
            next.push(Some(acc.unwrap_or_else(|| g.constant(0.0))));
        }
        level = next;
    }
    let num_basis = n - order - 1;
    let start = s as isize - order as isize;
    let mut values = ArrayVec::new();
    let mut first = None;
    for (r, v) in level.into_iter().enumerate() {
        let j = start + r as isize;
        if j < 0 || j as usize >= num_basis {
            continue;
        }
        if first.is_none() {
            first = Some(j as usize);
        }
        values.push(v.unwrap_or_else(|| g.constant(0.0)));
    }
    first.map(|first| BasisWindow { first, values })
}

/// `Σ_j c_j B_j(x)` on the given knots; zero outside the knot span.
pub fn spline_value<G: Graph>(
    g: &mut G,
    x: G::T,
    knots: &[G::T],
    coeffs: &[G::T],
    order: usize,
) -> G::T {
    match basis_window(g, x, knots, order) {
        None => g.constant(0.0),
        Some(w) => {
            let mut acc: Option<G::T> = None;
            for (r, &b) in w.values.iter().enumerate() {
                let term = g.mul(coeffs[w.first + r], b);
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            }
            acc.unwrap_or_else(|| g.constant(0.0))
        }
    }
}

/// `Σ_j ((c_{j-1} - 2c_j + c_{j+1}) / Δg²)²` over interior `j`.
/// Callers guarantee at least three coefficients.
pub fn second_difference_penalty<G: Graph>(g: &mut G, coeffs: &[G::T], spacing: f64) -> G::T {
    let inv = g.constant(1.0 / (spacing * spacing));
    let two = g.constant(2.0);
    let mut terms = Vec::with_capacity(coeffs.len().saturating_sub(2));
    for w in coeffs.windows(3) {
        let mid = g.mul(two, w[1]);
        let outer = g.add(w[0], w[2]);
        let d = g.sub(outer, mid);
        let d = g.mul(d, inv);
        terms.push(g.mul(d, d));
    }
    g.sum(&terms)
}

/// One activation: knots plus `G + K` combination coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGroup {
    pub knots: KnotVector,
    pub coefficients: Vec<f64>,
}

impl SplineGroup {
    pub fn new(knots: KnotVector, coefficients: Vec<f64>) -> Result<Self, SplineError> {
        if coefficients.len() != knots.num_basis() {
            return Err(SplineError::LengthMismatch {
                what: "spline coefficients",
                expected: knots.num_basis(),
                got: coefficients.len(),
            });
        }
        Ok(SplineGroup {
            knots,
            coefficients,
        })
    }

    pub fn zeros(knots: KnotVector) -> Self {
        let n = knots.num_basis();
        SplineGroup {
            knots,
            coefficients: vec![0.0; n],
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        spline_eval(x, self)
    }
}

pub fn spline_eval(x: f64, sg: &SplineGroup) -> f64 {
    spline_value(
        &mut Eval,
        x,
        sg.knots.effective_knots(),
        &sg.coefficients,
        sg.knots.order(),
    )
}

pub fn coeff_second_difference_penalty(sg: &SplineGroup) -> Result<f64, SplineError> {
    let n = sg.coefficients.len();
    if n < 3 {
        return Err(SplineError::TooFewCoefficients(n));
    }
    Ok(second_difference_penalty(
        &mut Eval,
        &sg.coefficients,
        sg.knots.spacing(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamHandle, Tape};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_grid_small() {
        let kv = make_uniform_grid(-1.0, 1.0, 4, 1).unwrap();
        let base = kv.base_points();
        for (got, want) in base.iter().zip([-1.0, -0.5, 0.0, 0.5, 1.0]) {
            assert!(close(*got, want, 1e-15));
        }
        let eff = kv.effective_knots();
        assert_eq!(eff.len(), 7);
        assert!(close(eff[0], -1.5, 1e-15) && close(eff[6], 1.5, 1e-15));
        assert_eq!(kv.num_basis(), 5);
    }

    #[test]
    fn uniform_grid_wide_range() {
        let kv = make_uniform_grid(-10.0, 10.0, 20, 3).unwrap();
        assert_eq!(kv.spacing(), 1.0);
        assert_eq!(kv.num_basis(), 23);
        for w in kv.effective_knots().windows(2) {
            assert!(close(w[1] - w[0], 1.0, 1e-12));
        }
    }

    #[test]
    fn degenerate_range_is_rejected() {
        assert!(matches!(
            make_uniform_grid(1.0, 1.0, 4, 1),
            Err(SplineError::InvalidRange { .. })
        ));
    }

    #[test]
    fn zero_shift_is_identity() {
        let kv = make_uniform_grid(-2.0, 3.0, 7, 2).unwrap();
        let mut shifted = kv.clone();
        shifted.set_shift(&vec![0.0; 8]).unwrap();
        assert_eq!(kv.effective_knots(), shifted.effective_knots());
        assert_eq!(kv.apply_free_shift(), kv.effective_knots());
    }

    #[test]
    fn free_shift_sorts_points() {
        // base {0, 1, 2}; the middle point moves past the right endpoint
        let mut kv = make_uniform_grid(0.0, 2.0, 2, 1).unwrap();
        kv.set_shift(&[0.0, 1.5, 0.0]).unwrap();
        let eff = kv.effective_knots();
        assert_eq!(eff, &[-1.0, 0.0, 2.0, 2.5, 3.0]);
        let mut kv = make_uniform_grid(0.0, 4.0, 4, 1).unwrap();
        kv.set_shift(&[0.0, 1.5, -1.5, 0.0, 0.0]).unwrap();
        // shifted base {0, 2.5, 0.5, 3, 4} sorts to {0, 0.5, 2.5, 3, 4}
        assert_eq!(kv.effective_knots(), &[-1.0, 0.0, 0.5, 2.5, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn colliding_shifts_are_clamped() {
        let mut kv = make_uniform_grid(0.0, 4.0, 4, 2).unwrap();
        kv.set_shift(&[0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let eff = kv.effective_knots();
        for w in eff.windows(2) {
            assert!(w[1] - w[0] >= kv.min_gap() * (1.0 - 1e-12));
        }
    }

    #[test]
    fn init_shift_half_width_and_determinism() {
        let kv = make_uniform_grid(-10.0, 10.0, 20, 3).unwrap();
        assert_eq!(kv.shift_half_width(8.0), 0.125);
        let a = init_shift(&kv, 8.0, 11).unwrap();
        let b = init_shift(&kv, 8.0, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.abs() <= 0.125));
        assert_eq!(a[0], 0.0);
        assert_eq!(a[20], 0.0);
        assert!(a[1..20].iter().any(|&s| s != 0.0));
        let flat = init_shift(&kv, f64::INFINITY, 11).unwrap();
        assert!(flat.iter().all(|&s| s == 0.0));
        assert!(init_shift(&kv, 0.0, 1).is_err());
    }

    #[test]
    fn init_shift_keeps_knots_ordered_and_close() {
        let mut kv = make_uniform_grid(-10.0, 10.0, 20, 3).unwrap();
        let uniform = kv.effective_knots().to_vec();
        let shift = init_shift(&kv, 8.0, 3).unwrap();
        kv.set_shift(&shift).unwrap();
        let eff = kv.effective_knots();
        for w in eff.windows(2) {
            assert!(w[1] > w[0]);
        }
        let hw = kv.shift_half_width(8.0);
        for (u, e) in uniform.iter().zip(eff) {
            assert!((u - e).abs() <= hw + 1e-12);
        }
    }

    #[test]
    fn order_zero_indicator() {
        let kv = make_uniform_grid(0.0, 1.0, 2, 1).unwrap();
        // knots {-0.5, 0, 0.5, 1, 1.5}; span j=1 is [0, 0.5)
        assert_eq!(basis_k0(0.3, &kv, 1), 1.0);
        assert_eq!(basis_k0(0.7, &kv, 1), 0.0);
        assert_eq!(basis_k0(0.5, &kv, 1), 0.0);
        assert_eq!(basis_k0(0.5, &kv, 2), 1.0);
    }

    #[test]
    fn hat_function_peak() {
        let kv = make_uniform_grid(-1.0, 1.0, 4, 1).unwrap();
        // B_{1,1} is supported on [t1, t3] = [-1, 0] and peaks at t2 = -0.5
        assert!(close(basis(-0.5, &kv, 1, 1), 1.0, 1e-15));
        assert!(close(basis(-0.75, &kv, 1, 1), 0.5, 1e-15));
    }

    #[test]
    fn window_matches_full_recursion() {
        let mut kv = make_uniform_grid(-1.0, 2.0, 6, 3).unwrap();
        let shift = init_shift(&kv, 2.0, 5).unwrap();
        kv.set_shift(&shift).unwrap();
        let (lo, hi) = kv.support();
        for i in 0..=400 {
            let x = lo - 0.1 + (hi - lo + 0.2) * i as f64 / 400.0;
            let mut full = vec![0.0; kv.num_basis()];
            for (j, f) in full.iter_mut().enumerate() {
                *f = basis(x, &kv, j, 3);
            }
            let mut local = vec![0.0; kv.num_basis()];
            if let Some(w) = basis_window(&mut Eval, x, kv.effective_knots(), 3) {
                for (r, v) in w.values.iter().enumerate() {
                    local[w.first + r] = *v;
                }
            }
            for (a, b) in full.iter().zip(&local) {
                assert!(close(*a, *b, 1e-14), "x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_coefficients_reproduce_constant() {
        for k in 1..=3 {
            let kv = make_uniform_grid(-1.0, 1.0, 5, k).unwrap();
            let sg = SplineGroup::new(kv, vec![1.0; 5 + k]).unwrap();
            for i in 0..100 {
                let x = -1.0 + 2.0 * i as f64 / 100.0;
                assert!(close(sg.eval(x), 1.0, 1e-12));
            }
        }
    }

    #[test]
    fn sawtooth_coefficients() {
        let kv = make_uniform_grid(-1.0, 1.0, 5, 1).unwrap();
        let c: Vec<f64> = (0..6)
            .map(|j| if j % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let sg = SplineGroup::new(kv, c).unwrap();
        for j in 0..=5 {
            let x = -1.0 + 0.4 * j as f64;
            let want = if j % 2 == 0 { 1.0 } else { -1.0 };
            assert!(close(sg.eval(x), want, 1e-12));
        }
        // slope magnitude 2 / Δg = 5 between peaks
        let slope = (sg.eval(-0.7) - sg.eval(-0.8)) / 0.1;
        assert!(close(slope.abs(), 5.0, 1e-9));
    }

    #[test]
    fn penalty_examples() {
        let kv = make_uniform_grid(0.0, 4.0, 4, 1).unwrap();
        assert_eq!(kv.spacing(), 1.0);
        let sg = SplineGroup::new(kv.clone(), vec![1.0, -1.0, 1.0, -1.0, 1.0]).unwrap();
        assert_eq!(coeff_second_difference_penalty(&sg).unwrap(), 48.0);
        let flat = SplineGroup::new(kv.clone(), vec![2.0; 5]).unwrap();
        assert_eq!(coeff_second_difference_penalty(&flat).unwrap(), 0.0);
        let ramp = SplineGroup::new(kv, (0..5).map(|j| j as f64).collect()).unwrap();
        assert_eq!(coeff_second_difference_penalty(&ramp).unwrap(), 0.0);
    }

    #[test]
    fn penalty_needs_three_coefficients() {
        let sg = SplineGroup {
            knots: make_uniform_grid(0.0, 1.0, 1, 1).unwrap(),
            coefficients: vec![1.0, 2.0],
        };
        assert_eq!(
            coeff_second_difference_penalty(&sg),
            Err(SplineError::TooFewCoefficients(2))
        );
    }

    #[test]
    fn coefficient_length_is_checked() {
        let kv = make_uniform_grid(0.0, 1.0, 3, 2).unwrap();
        assert!(SplineGroup::new(kv, vec![0.0; 4]).is_err());
    }

    #[test]
    fn shift_gradient_flows_through_sort() {
        let kv = make_uniform_grid(0.0, 4.0, 4, 1).unwrap();
        let mut tape = Tape::new();
        let shift: Vec<_> = [0.0, 0.2, -0.1, 0.3, 0.0]
            .iter()
            .map(|&s| tape.parameter(s))
            .collect();
        let knots = kv.free_knots(&mut tape, &shift);
        // sorted index 3 is base point 2 shifted by -0.1
        assert!(close(tape.value_of(knots[3]), 1.9, 1e-15));
        let g = tape.backward(knots[3]).unwrap();
        assert_eq!(g.get(ParamHandle(2)), 1.0);
        assert_eq!(g.get(ParamHandle(0)), 0.0);
    }
}
