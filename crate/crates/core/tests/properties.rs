use frkan::autodiff::{gradient, Graph, ScalarFunction, Tape};
use frkan::knots::{scan_breakpoints, ScanSettings};
use frkan::layers::{init_network, LayerKind, NetworkConfig, NormPlacement};
use frkan::spline::{basis, GridSpec, KnotVector};
use frkan::tasks::Normalization;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `Σ w_i sin(p_i) + p_0 p_1`.
struct Mix(Vec<f64>);

impl ScalarFunction for Mix {
    fn eval<G: Graph>(&self, g: &mut G, p: &[G::T]) -> G::T {
        let mut terms: Vec<G::T> = p
            .iter()
            .zip(&self.0)
            .map(|(&x, &w)| {
                let s = g.sin(x);
                let w = g.constant(w);
                g.mul(w, s)
            })
            .collect();
        terms.push(g.mul(p[0], p[1]));
        g.sum(&terms)
    }
}

struct Scaled<'a>(f64, &'a Mix, f64, &'a Mix);

impl ScalarFunction for Scaled<'_> {
    fn eval<G: Graph>(&self, g: &mut G, p: &[G::T]) -> G::T {
        let (a, b) = (g.constant(self.0), g.constant(self.2));
        let f = self.1.eval(g, p);
        let h = self.3.eval(g, p);
        let af = g.mul(a, f);
        let bh = g.mul(b, h);
        g.add(af, bh)
    }
}

proptest! {
    #[test]
    fn gradient_is_linear(
        p in prop::collection::vec(-3.0..3.0f64, 2..6),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
        seed in 0u64..1000,
    ) {
        let n = p.len();
        let w1: Vec<f64> = (0..n).map(|i| ((seed + i as u64) as f64).sin()).collect();
        let w2: Vec<f64> = (0..n).map(|i| ((seed * 3 + i as u64) as f64).cos()).collect();
        let (f, h) = (Mix(w1), Mix(w2));
        let (_, gf) = gradient(&f, &p).unwrap();
        let (_, gh) = gradient(&h, &p).unwrap();
        let (_, gc) = gradient(&Scaled(a, &f, b, &h), &p).unwrap();
        for i in 0..n {
            prop_assert!((gc[i] - (a * gf[i] + b * gh[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_records_parents_before_children(p in prop::collection::vec(-3.0..3.0f64, 2..6)) {
        let mut tape = Tape::new();
        let vars: Vec<_> = p.iter().map(|&x| tape.parameter(x)).collect();
        let w = vec![0.5; p.len()];
        let root = Mix(w).eval(&mut tape, &vars);
        prop_assert_eq!(root.id() as usize + 1, tape.len());
        for (id, node) in tape.nodes().iter().enumerate() {
            for (parent, _) in node.parents() {
                prop_assert!((parent as usize) < id);
            }
        }
    }

    #[test]
    fn basis_sums_to_one(g in 1usize..25, k in 1usize..4, seed in 0u64..500, t in 0.0..1.0f64, lo in -5.0..0.0f64, span in 0.5..10.0f64) {
        let mut kv = KnotVector::uniform(GridSpec::new(g, k, lo, lo + span)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = kv.sample_shift(8.0, &mut rng);
        kv.set_shift(&s).unwrap();
        let x = lo + span * t;
        let sum: f64 = (0..kv.num_basis()).map(|j| basis(x, &kv, j, k)).sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn breakpoints_move_with_affine_reparametrization(
        kinks in prop::collection::vec(-0.9..0.9f64, 1..6),
        alpha in 0.5..3.0f64,
        beta in -2.0..2.0f64,
    ) {
        let mut kinks = kinks;
        kinks.sort_by(f64::total_cmp);
        kinks.dedup_by(|a, b| (*a - *b).abs() < 0.05);
        let f = |x: f64| kinks.iter().enumerate().map(|(i, k)| (1.0 + i as f64) * (x - k).abs()).sum::<f64>();
        let s = ScanSettings::default();
        let direct = scan_breakpoints(f, -1.0, 1.0, &s).unwrap();
        // g(u) = f((u - beta) / alpha) has kinks at alpha * k + beta
        let g = |u: f64| f((u - beta) / alpha);
        let moved = scan_breakpoints(g, beta - alpha, beta + alpha, &s).unwrap();
        prop_assert_eq!(direct.interior_count, kinks.len());
        prop_assert_eq!(moved.interior_count, kinks.len());
        for (a, b) in direct.positions.iter().zip(&moved.positions) {
            prop_assert!((alpha * a + beta - b).abs() < 1e-6 * alpha.max(1.0));
        }
    }

    #[test]
    fn parameter_counts_follow_closed_forms(
        d_in in 1usize..20,
        d_out in 1usize..20,
        g in 2usize..25,
        k in 1usize..4,
        h in 1usize..8,
    ) {
        let grid = GridSpec::new(g, k, -1.0, 1.0);
        let build = |kind: LayerKind| {
            let mut c = NetworkConfig::new(format!("in:{d_in} -> {kind}:{d_out}"), kind, grid);
            c.groups = Some(h);
            c.norm = NormPlacement::All;
            init_network(&c, 0).unwrap().param_count().total
        };
        let hh = h.min(d_in);
        prop_assert_eq!(build(LayerKind::Kan), d_in * d_out * (g + k + 2) + 2 * d_in);
        prop_assert_eq!(build(LayerKind::Frkan), d_in * d_out + hh * (2 * g + k + 1) + 2 * d_in);
        prop_assert_eq!(build(LayerKind::Mlp), d_in * d_out + d_out);
    }

    #[test]
    fn normalization_round_trips(rows in prop::collection::vec(prop::collection::vec(-100.0..100.0f64, 3), 2..30)) {
        let n = Normalization::fit(&rows);
        for r in &rows {
            let back = n.denormalize(&n.normalize(r));
            for (a, b) in back.iter().zip(r) {
                prop_assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
