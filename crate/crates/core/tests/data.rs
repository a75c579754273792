use std::collections::HashMap;
use std::f64::consts::PI;

use frkan::tasks::{
    feynman_spec, generate_classification, generate_feynman, load_csv, load_idx, read_idx_images,
    LabelColumn, Targets, TaskError, FEYNMAN,
};

/// Independent restatement of each formula over named variables.
fn reference(id: &str, v: &HashMap<&str, f64>) -> f64 {
    let g = |k: &str| v[k];
    match id {
        "I.6.2" => {
            (-(g("theta") / g("sigma")).powi(2) / 2.0).exp() / ((2.0 * PI).sqrt() * g("sigma"))
        }
        "I.6.2b" => {
            let z = (g("theta") - g("theta1")) / g("sigma");
            (-0.5 * z * z).exp() / (2.0 * PI).sqrt() / g("sigma")
        }
        "I.9.18" => {
            let r2 = (g("x2") - g("x1")).powi(2)
                + (g("y2") - g("y1")).powi(2)
                + (g("z2") - g("z1")).powi(2);
            g("G") * g("m1") * g("m2") / r2
        }
        "I.16.6" => (g("u") + g("v")) / (1.0 + g("u") * g("v") / (g("c") * g("c"))),
        "I.18.4" => (g("m1") * g("r1") + g("m2") * g("r2")) / (g("m1") + g("m2")),
        "I.26.2" => (g("n") * g("theta2").sin()).asin(),
        "I.29.16" => {
            let (a, b) = (g("x1"), g("x2"));
            (a * a + b * b - 2.0 * a * b * (g("theta1") - g("theta2")).cos()).sqrt()
        }
        "II.11.27" => {
            let na = g("n") * g("alpha");
            na / (1.0 - na / 3.0) * g("epsilon") * g("Ef")
        }
        "III.10.19" => g("mom") * (g("Bx").powi(2) + g("By").powi(2) + g("Bz").powi(2)).sqrt(),
        "III.17.37" => g("beta") * (1.0 + g("alpha") * g("theta").cos()),
        other => panic!("no reference for {other}"),
    }
}

#[test]
fn formulas_agree_with_a_second_evaluator() {
    for spec in FEYNMAN {
        for t in 0..200 {
            let x: Vec<f64> = spec
                .ranges
                .iter()
                .enumerate()
                .map(|(i, &(lo, hi))| lo + (hi - lo) * (((t * 31 + i * 17) % 97) as f64 / 96.0))
                .collect();
            let named: HashMap<&str, f64> = spec
                .variables
                .iter()
                .copied()
                .zip(x.iter().copied())
                .collect();
            let (a, b) = ((spec.eval)(&x), reference(spec.id, &named));
            if !(a.is_finite() && b.is_finite()) {
                assert_eq!(a.is_nan(), b.is_nan(), "{} at {x:?}", spec.id);
                continue;
            }
            assert!(
                (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                "{}: {a} vs {b}",
                spec.id
            );
        }
    }
}

#[test]
fn unknown_equation_is_reported() {
    assert!(matches!(
        feynman_spec("I.99.9"),
        Err(TaskError::UnsupportedEquation(_))
    ));
}

#[test]
fn feynman_labels_match_raw_inputs() {
    let data = generate_feynman("I.18.4", 200, 3).unwrap();
    let spec = feynman_spec("I.18.4").unwrap();
    let split = &data.split;
    let Targets::Values(y) = &split.train.targets else {
        panic!()
    };
    for (x, y) in split.train.features.iter().zip(y) {
        let raw = split.normalization.denormalize(x);
        assert!(((spec.eval)(&raw) - y[0]).abs() < 1e-9 * y[0].abs().max(1.0));
    }
    assert_eq!(data.manifest.split_sizes, [160, 40]);
}

#[test]
fn generators_depend_only_on_the_seed() {
    let a = generate_classification(300, 4, 5, 11).unwrap();
    let b = generate_classification(300, 4, 5, 11).unwrap();
    assert_eq!(a, b);
    let c = generate_classification(300, 4, 5, 12).unwrap();
    assert_ne!(a.train.features, c.train.features);
}

fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut v = Vec::new();
    for n in [0x0803, count, rows, cols] {
        v.extend_from_slice(&n.to_be_bytes());
    }
    v.extend_from_slice(pixels);
    v
}

#[test]
fn idx_files_load_as_classification() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..10 * 4).map(|i| (i * 6) as u8).collect();
    std::fs::write(dir.path().join("img"), idx_images(10, 2, 2, &pixels)).unwrap();
    let mut labels = Vec::new();
    labels.extend_from_slice(&0x0801u32.to_be_bytes());
    labels.extend_from_slice(&10u32.to_be_bytes());
    labels.extend((0..10u8).map(|i| i % 3));
    std::fs::write(dir.path().join("lab"), labels).unwrap();
    let images = read_idx_images(dir.path().join("img")).unwrap();
    assert_eq!(images.len(), 10);
    assert_eq!(
        images[1],
        vec![24.0 / 255.0, 30.0 / 255.0, 36.0 / 255.0, 42.0 / 255.0]
    );
    let split = load_idx(dir.path().join("img"), dir.path().join("lab"), 1).unwrap();
    assert_eq!(split.train.len() + split.test.len(), 10);
    assert_eq!(split.output_dim(), 3);
}

#[test]
fn idx_with_wrong_magic_or_length_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = idx_images(2, 2, 2, &[0; 8]);
    bad[3] = 0x01;
    std::fs::write(dir.path().join("a"), &bad).unwrap();
    assert!(matches!(
        read_idx_images(dir.path().join("a")),
        Err(TaskError::MalformedHeader { .. })
    ));
    std::fs::write(dir.path().join("b"), idx_images(2, 2, 2, &[0; 7])).unwrap();
    assert!(matches!(
        read_idx_images(dir.path().join("b")),
        Err(TaskError::MalformedHeader { .. })
    ));
}

#[test]
fn csv_loads_with_named_label_and_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    let mut text = String::from("a,y,b\n");
    for i in 0..20 {
        text.push_str(&format!("{i},{},{}\n", 2 * i, i % 3));
    }
    std::fs::write(&good, text).unwrap();
    let split = load_csv(&good, &LabelColumn::Name("y".into()), 5).unwrap();
    assert_eq!(split.input_dim(), 2);
    let Targets::Values(y) = &split.train.targets else {
        panic!()
    };
    for (x, y) in split.train.features.iter().zip(y) {
        let raw = split.normalization.denormalize(x);
        assert!((2.0 * raw[0] - y[0]).abs() < 1e-9);
    }
    let short = dir.path().join("short.csv");
    std::fs::write(&short, "a,y\n1,2\n3\n4,5\n").unwrap();
    match load_csv(&short, &LabelColumn::Index(1), 5) {
        Err(TaskError::RowLengthMismatch { row, expected, got }) => {
            assert_eq!((row, expected, got), (3, 2, 1))
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        load_csv(&good, &LabelColumn::Name("zz".into()), 5),
        Err(TaskError::MalformedHeader { .. })
    ));
}
