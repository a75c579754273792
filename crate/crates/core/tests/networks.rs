use frkan::layers::{
    init_network, load_checkpoint, save_checkpoint, Layer, LayerError, LayerKind, Network,
    NetworkConfig, NormPlacement, ParamClass, Stage,
};
use frkan::spline::{basis, GridSpec};
use frkan::tasks::{Dataset, Targets};
use frkan::training::{loss_value, regularized_loss};

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn config(desc: &str, k: usize) -> NetworkConfig {
    let mut c = NetworkConfig::new(desc, LayerKind::Frkan, GridSpec::new(6, k, -2.0, 2.0));
    c.norm = NormPlacement::None;
    c
}

/// `Σ_j c_j B_j(x)` with the full recursion.
fn naive_spline(x: f64, kv: &frkan::spline::KnotVector, c: &[f64]) -> f64 {
    (0..kv.num_basis())
        .map(|j| c[j] * basis(x, kv, j, kv.order()))
        .sum()
}

fn naive_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for st in net.stages() {
        assert!(st.norm.is_none());
        h = match &st.layer {
            Layer::Kan(l) => (0..l.d_out)
                .map(|o| {
                    (0..l.d_in)
                        .map(|i| {
                            let e = i * l.d_out + o;
                            let s = l.spline_weight[e]
                                * naive_spline(h[i], &l.knots, l.edge_coefficients(i, o));
                            s + if l.silu {
                                l.silu_weight[e] * silu(h[i])
                            } else {
                                0.0
                            }
                        })
                        .sum()
                })
                .collect(),
            Layer::FrKan(l) => (0..l.d_out)
                .map(|o| {
                    (0..l.d_in)
                        .map(|i| {
                            let g = &l.groups[l.group_of(i)];
                            let act = naive_spline(h[i], &g.knots, &g.coefficients)
                                + if l.silu { silu(h[i]) } else { 0.0 };
                            l.weight[i * l.d_out + o] * act
                        })
                        .sum()
                })
                .collect(),
            Layer::Mlp(l) => (0..l.d_out)
                .map(|o| {
                    let z: f64 = l.bias[o]
                        + (0..l.d_in)
                            .map(|i| l.weight[i * l.d_out + o] * h[i])
                            .sum::<f64>();
                    match l.activation {
                        frkan::layers::Activation::Relu => z.max(0.0),
                        frkan::layers::Activation::Identity => z,
                    }
                })
                .collect(),
        };
    }
    h
}

#[test]
fn forward_matches_naive_oracle() {
    for (desc, k) in [
        ("in:3 -> kan:4 -> frkan:2", 3),
        ("in:2 -> frkan:5 -> mlp:3 -> kan:1", 1),
        ("in:4 -> mlp:6 -> frkan:2", 2),
    ] {
        let mut cfg = config(desc, k);
        cfg.groups = Some(2);
        let net = init_network(&cfg, 3).unwrap();
        for t in 0..25 {
            let x: Vec<f64> = (0..net.input_dim())
                .map(|i| ((t * 7 + i * 3) as f64 * 0.37).sin() * 2.9)
                .collect();
            let fast = net.predict(&x).unwrap();
            let slow = naive_forward(&net, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!(
                    (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                    "{desc}: {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn frkan_with_one_group_per_input_and_no_shift_is_a_kan() {
    let mut cfg = config("in:3 -> frkan:2", 3);
    cfg.groups = Some(3);
    let mut fr_net = init_network(&cfg, 5).unwrap();
    let Layer::FrKan(fr) = &mut fr_net.stages_mut()[0].layer else {
        unreachable!()
    };
    for g in fr.groups.iter_mut() {
        let zero = vec![0.0; g.knots.shift().len()];
        g.knots.set_shift(&zero).unwrap();
    }
    let fr = fr.clone();
    let mut kan = frkan::layers::KanLayer::zeros(3, 2, fr.grid()).unwrap();
    for i in 0..3 {
        for o in 0..2 {
            let e = i * 2 + o;
            let nb = kan.knots.num_basis();
            kan.coefficients[e * nb..(e + 1) * nb].copy_from_slice(&fr.groups[i].coefficients);
            kan.spline_weight[e] = fr.weight[e];
            kan.silu_weight[e] = fr.weight[e];
        }
    }
    let kan_net = Network::from_stages(vec![Stage {
        norm: None,
        layer: Layer::Kan(kan),
    }])
    .unwrap();
    let fr_net = Network::from_stages(vec![Stage {
        norm: None,
        layer: Layer::FrKan(fr),
    }])
    .unwrap();
    for t in 0..40 {
        let x = [
            t as f64 * 0.11 - 2.3,
            (t as f64).cos(),
            1.7 - t as f64 * 0.05,
        ];
        let a = fr_net.predict(&x).unwrap();
        let b = kan_net.predict(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12, "{p} vs {q}");
        }
    }
}

fn regression_data(net: &Network, n: usize) -> Dataset {
    Dataset {
        features: (0..n)
            .map(|s| {
                (0..net.input_dim())
                    .map(|i| ((s * 13 + i * 5) as f64 * 0.71).sin() * 2.4)
                    .collect()
            })
            .collect(),
        targets: Targets::Values(
            (0..n)
                .map(|s| {
                    (0..net.output_dim())
                        .map(|o| ((s + o) as f64 * 0.3).cos())
                        .collect()
                })
                .collect(),
        ),
    }
}

fn max_relative_error(net: &mut Network, data: &Dataset, lambda: f64) -> Vec<(ParamClass, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let analytic = regularized_loss(net, data, &idx, lambda).unwrap().gradient;
    let params = net.parameters();
    let classes = net.param_classes();
    let step = 1e-6;
    let mut out = Vec::new();
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += step;
        net.set_parameters(&p).unwrap();
        let up = loss_value(net, data, &idx, lambda).unwrap();
        p[i] = params[i] - step;
        net.set_parameters(&p).unwrap();
        let down = loss_value(net, data, &idx, lambda).unwrap();
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        out.push((classes[i], rel));
    }
    net.set_parameters(&params).unwrap();
    out
}

#[test]
fn gradients_match_central_differences_for_every_class() {
    let mut cfg = NetworkConfig::new(
        "in:3 -> kan:3 -> frkan:3 -> mlp:2",
        LayerKind::Frkan,
        GridSpec::new(5, 2, -2.0, 2.0),
    );
    cfg.norm = NormPlacement::All;
    cfg.groups = Some(2);
    let mut net = init_network(&cfg, 17).unwrap();
    let data = regression_data(&net, 10);
    let errs = max_relative_error(&mut net, &data, 1e-2);
    for class in [
        ParamClass::Coefficient,
        ParamClass::SplineWeight,
        ParamClass::SiluWeight,
        ParamClass::SharedWeight,
        ParamClass::Shift,
        ParamClass::Weight,
        ParamClass::Bias,
        ParamClass::NormScale,
        ParamClass::NormShift,
    ] {
        let worst = errs
            .iter()
            .filter(|(c, _)| *c == class)
            .map(|(_, e)| *e)
            .fold(-1.0, f64::max);
        assert!(worst >= 0.0, "{class:?} missing");
        assert!(worst < 1e-4, "{class:?}: {worst}");
    }
}

#[test]
fn shift_gradients_hold_for_order_one() {
    let mut cfg = config("in:2 -> frkan:2 -> frkan:1", 1);
    cfg.groups = Some(2);
    let mut net = init_network(&cfg, 23).unwrap();
    let data = regression_data(&net, 9);
    let errs = max_relative_error(&mut net, &data, 0.0);
    let worst = errs
        .iter()
        .filter(|(c, _)| *c == ParamClass::Shift)
        .map(|(_, e)| *e)
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut cfg = NetworkConfig::new(
        "in:3 -> kan:4 -> frkan:2 -> mlp:1",
        LayerKind::Frkan,
        GridSpec::new(7, 3, -3.0, 1.5),
    );
    cfg.norm = NormPlacement::All;
    let net = init_network(&cfg, 99).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.parameters(), net.parameters());
    assert_eq!(back.descriptor(), net.descriptor());
    let x = [0.3, -1.2, 2.0];
    assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let net = init_network(&config("in:2 -> frkan:2", 3), 1).unwrap();
    let text = net.to_checkpoint_json();
    let cut = &text[..text.len() / 2];
    assert!(matches!(
        Network::from_checkpoint_json(cut),
        Err(LayerError::CorruptCheckpoint(_))
    ));
}

#[test]
fn layer_kind_is_tagged_in_checkpoints() {
    let net = init_network(&config("in:2 -> kan:2 -> frkan:2 -> mlp:1", 1), 1).unwrap();
    let v: serde_json::Value = serde_json::from_str(&net.to_checkpoint_json()).unwrap();
    let kinds: Vec<&str> = v["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["kan", "frkan", "mlp"]);
    let swapped = net
        .to_checkpoint_json()
        .replacen("\"kind\": \"kan\"", "\"kind\": \"mlp\"", 1);
    assert!(Network::from_checkpoint_json(&swapped).is_err());
}

#[test]
fn same_seed_gives_same_network() {
    let cfg = config("in:4 -> frkan:8 -> kan:2", 3);
    assert_eq!(
        init_network(&cfg, 8).unwrap().parameters(),
        init_network(&cfg, 8).unwrap().parameters()
    );
    assert_ne!(
        init_network(&cfg, 8).unwrap().parameters(),
        init_network(&cfg, 9).unwrap().parameters()
    );
}
