//! Datasets: a subset of the Feynman equations, the Runge function, Gaussian
//! blobs for classification, and CSV / IDX ingestion.
//!
//! Every generator is a pure function of `(n, seed)`. Samples come from
//! stream 0 of a ChaCha8 generator and the train/test permutation from
//! stream 2, so changing `n` never reshuffles the draw sequence itself.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unsupported equation `{0}`")]
    UnsupportedEquation(String),
    #[error("equation {id}: {rejected} of {draws} draws were rejected")]
    RejectionOverflow {
        id: String,
        draws: usize,
        rejected: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("row {row}: expected {expected} cells, found {got}")]
    RowLengthMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {row}, column `{column}`: `{value}` is not a number")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    /// One row of regression targets per sample.
    Values(Vec<Vec<f64>>),
    Classes {
        labels: Vec<usize>,
        classes: usize,
    },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.len(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of network outputs the targets call for.
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Values(v) => v.first().map_or(1, Vec::len),
            Targets::Classes { classes, .. } => *classes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Targets::Classes { .. })
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i].clone()).collect()),
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            targets: self.targets.select(idx),
        }
    }
}

/// Per-feature standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics; a constant feature gets `std = 1`.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    /// Features are stored already normalized.
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub normalization: Normalization,
}

impl DatasetSplit {
    /// Seeded 80/20 split; features standardized on the training part when
    /// `standardize` is set.
    pub fn new(name: impl Into<String>, all: Dataset, seed: u64, standardize: bool) -> Self {
        let n = all.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream(seed, 2);
        order.shuffle(&mut rng);
        let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
        let mut train_indices = order[..n_train].to_vec();
        let mut test_indices = order[n_train..].to_vec();
        train_indices.sort_unstable();
        test_indices.sort_unstable();
        let mut train = all.select(&train_indices);
        let mut test = all.select(&test_indices);
        let normalization = if standardize {
            Normalization::fit(&train.features)
        } else {
            Normalization::identity(all.input_dim())
        };
        if standardize {
            for r in train.features.iter_mut().chain(test.features.iter_mut()) {
                *r = normalization.normalize(r);
            }
        }
        DatasetSplit {
            name: name.into(),
            train,
            test,
            train_indices,
            test_indices,
            normalization,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.train.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.train.targets.output_dim()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One equation of the supported subset.
#[derive(Debug, Clone, Copy)]
pub struct FeynmanSpec {
    pub id: &'static str,
    pub variables: &'static [&'static str],
    pub ranges: &'static [(f64, f64)],
    pub formula: &'static str,
    pub eval: fn(&[f64]) -> f64,
}

impl FeynmanSpec {
    pub fn arity(&self) -> usize {
        self.variables.len()
    }
}

const POS: (f64, f64) = (1.0, 5.0);
const ANGLE: (f64, f64) = (-1.0, 1.0);

fn gaussian(v: &[f64]) -> f64 {
    let (sigma, theta) = (v[0], v[1]);
    (-(theta / sigma).powi(2) / 2.0).exp() / ((2.0 * PI).sqrt() * sigma)
}

fn gaussian_shifted(v: &[f64]) -> f64 {
    let (sigma, theta, theta1) = (v[0], v[1], v[2]);
    (-((theta - theta1) / sigma).powi(2) / 2.0).exp() / ((2.0 * PI).sqrt() * sigma)
}

fn gravitation(v: &[f64]) -> f64 {
    let [m1, m2, g, x1, x2, y1, y2, z1, z2] =
        [v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]];
    g * m1 * m2 / ((x2 - x1).powi(2) + (y2 - y1).powi(2) + (z2 - z1).powi(2))
}

fn relativistic_velocity(v: &[f64]) -> f64 {
    let (c, vel, u) = (v[0], v[1], v[2]);
    (u + vel) / (1.0 + u * vel / (c * c))
}

fn center_of_mass(v: &[f64]) -> f64 {
    let (m1, m2, r1, r2) = (v[0], v[1], v[2], v[3]);
    (m1 * r1 + m2 * r2) / (m1 + m2)
}

fn snell(v: &[f64]) -> f64 {
    (v[0] * v[1].sin()).asin()
}

fn wave_sum(v: &[f64]) -> f64 {
    let (x1, x2, t1, t2) = (v[0], v[1], v[2], v[3]);
    (x1 * x1 + x2 * x2 - 2.0 * x1 * x2 * (t1 - t2).cos()).sqrt()
}

fn polarization(v: &[f64]) -> f64 {
    let (n, alpha, eps, ef) = (v[0], v[1], v[2], v[3]);
    n * alpha / (1.0 - n * alpha / 3.0) * eps * ef
}

fn magnetic_energy(v: &[f64]) -> f64 {
    let (mom, bx, by, bz) = (v[0], v[1], v[2], v[3]);
    mom * (bx * bx + by * by + bz * bz).sqrt()
}

fn angular_term(v: &[f64]) -> f64 {
    let (beta, alpha, theta) = (v[0], v[1], v[2]);
    beta * (1.0 + alpha * theta.cos())
}

pub const FEYNMAN: &[FeynmanSpec] = &[
    FeynmanSpec {
        id: "I.6.2",
        variables: &["sigma", "theta"],
        ranges: &[POS, ANGLE],
        formula: "exp(-(theta/sigma)^2/2)/(sqrt(2*pi)*sigma)",
        eval: gaussian,
    },
    FeynmanSpec {
        id: "I.6.2b",
        variables: &["sigma", "theta", "theta1"],
        ranges: &[POS, ANGLE, ANGLE],
        formula: "exp(-((theta-theta1)/sigma)^2/2)/(sqrt(2*pi)*sigma)",
        eval: gaussian_shifted,
    },
    FeynmanSpec {
        id: "I.9.18",
        variables: &["m1", "m2", "G", "x1", "x2", "y1", "y2", "z1", "z2"],
        ranges: &[
            POS,
            POS,
            POS,
            (3.0, 4.0),
            (1.0, 2.0),
            (3.0, 4.0),
            (1.0, 2.0),
            (3.0, 4.0),
            (1.0, 2.0),
        ],
        formula: "G*m1*m2/((x2-x1)^2+(y2-y1)^2+(z2-z1)^2)",
        eval: gravitation,
    },
    FeynmanSpec {
        id: "I.16.6",
        variables: &["c", "v", "u"],
        ranges: &[POS, POS, POS],
        formula: "(u+v)/(1+u*v/c^2)",
        eval: relativistic_velocity,
    },
    FeynmanSpec {
        id: "I.18.4",
        variables: &["m1", "m2", "r1", "r2"],
        ranges: &[POS, POS, POS, POS],
        formula: "(m1*r1+m2*r2)/(m1+m2)",
        eval: center_of_mass,
    },
    FeynmanSpec {
        id: "I.26.2",
        variables: &["n", "theta2"],
        ranges: &[POS, ANGLE],
        formula: "arcsin(n*sin(theta2))",
        eval: snell,
    },
    FeynmanSpec {
        id: "I.29.16",
        variables: &["x1", "x2", "theta1", "theta2"],
        ranges: &[POS, POS, ANGLE, ANGLE],
        formula: "sqrt(x1^2+x2^2-2*x1*x2*cos(theta1-theta2))",
        eval: wave_sum,
    },
    FeynmanSpec {
        id: "II.11.27",
        variables: &["n", "alpha", "epsilon", "Ef"],
        ranges: &[(0.0, 1.0), (0.0, 1.0), POS, POS],
        formula: "n*alpha/(1-n*alpha/3)*epsilon*Ef",
        eval: polarization,
    },
    FeynmanSpec {
        id: "III.10.19",
        variables: &["mom", "Bx", "By", "Bz"],
        ranges: &[POS, POS, POS, POS],
        formula: "mom*sqrt(Bx^2+By^2+Bz^2)",
        eval: magnetic_energy,
    },
    FeynmanSpec {
        id: "III.17.37",
        variables: &["beta", "alpha", "theta"],
        ranges: &[POS, POS, ANGLE],
        formula: "beta*(1+alpha*cos(theta))",
        eval: angular_term,
    },
];

pub fn feynman_spec(id: &str) -> Result<&'static FeynmanSpec, TaskError> {
    FEYNMAN
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| TaskError::UnsupportedEquation(id.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    pub arity: usize,
    pub ranges: Vec<VariableRange>,
    pub formula: String,
    pub seed: u64,
    pub n: usize,
    pub split_sizes: [usize; 2],
    pub draws: usize,
    pub rejected: usize,
    pub notes: Vec<String>,
}

/// Generated Feynman data together with its manifest.
#[derive(Debug, Clone)]
pub struct FeynmanData {
    pub split: DatasetSplit,
    pub manifest: Manifest,
}

/// Uniform inputs on the equation's ranges, rejecting non-finite labels.
pub fn generate_feynman(id: &str, n: usize, seed: u64) -> Result<FeynmanData, TaskError> {
    let spec = feynman_spec(id)?;
    if n < 10 {
        return Err(TaskError::InvalidArgument(format!(
            "n must be at least 10, got {n}"
        )));
    }
    let mut rng = stream(seed, 0);
    let cap = 10 * n;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut draws = 0;
    while features.len() < n {
        if draws == cap {
            return Err(TaskError::RejectionOverflow {
                id: id.to_string(),
                draws,
                rejected: draws - features.len(),
            });
        }
        draws += 1;
        let x: Vec<f64> = spec
            .ranges
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..hi))
            .collect();
        let y = (spec.eval)(&x);
        if y.is_finite() {
            features.push(x);
            labels.push(vec![y]);
        }
    }
    let split = DatasetSplit::new(
        id,
        Dataset {
            features,
            targets: Targets::Values(labels),
        },
        seed,
        true,
    );
    let mut notes = Vec::new();
    if id.starts_with("I.6.2") {
        notes.push("exponent implemented with a negative sign (Gaussian form)".to_string());
    }
    let manifest = Manifest {
        id: id.to_string(),
        arity: spec.arity(),
        ranges: spec
            .variables
            .iter()
            .zip(spec.ranges)
            .map(|(name, &(lo, hi))| VariableRange {
                name: name.to_string(),
                lo,
                hi,
            })
            .collect(),
        formula: spec.formula.to_string(),
        seed,
        n,
        split_sizes: [split.train.len(), split.test.len()],
        draws,
        rejected: draws - n,
        notes,
    };
    Ok(FeynmanData { split, manifest })
}

pub fn runge(x: f64) -> f64 {
    1.0 / (1.0 + 25.0 * x * x)
}

/// `x ~ U[-1, 1]`, label `1 / (1 + 25 x²)`.
pub fn generate_runge(n: usize, seed: u64) -> Result<DatasetSplit, TaskError> {
    if n < 10 {
        return Err(TaskError::InvalidArgument(format!(
            "n must be at least 10, got {n}"
        )));
    }
    let mut rng = stream(seed, 0);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Ok(DatasetSplit::new(
        "runge",
        Dataset {
            features: xs.iter().map(|&x| vec![x]).collect(),
            targets: Targets::Values(xs.iter().map(|&x| vec![runge(x)]).collect()),
        },
        seed,
        true,
    ))
}

/// Distance of every blob mean from the origin.
pub const BLOB_RADIUS: f64 = 3.0;

/// Vertices of a regular simplex with `classes` vertices in `d` dimensions,
/// centered at the origin with circumradius `radius`.
pub fn simplex_means(classes: usize, d: usize, radius: f64) -> Result<Vec<Vec<f64>>, TaskError> {
    if classes < 2 || d + 1 < classes {
        return Err(TaskError::InvalidArgument(format!(
            "{classes} simplex vertices need classes >= 2 and d >= classes - 1 (d = {d})"
        )));
    }
    // centered standard basis of R^classes, expressed in an orthonormal basis
    // of its (classes-1)-dimensional span
    let c = classes as f64;
    let centered: Vec<Vec<f64>> = (0..classes)
        .map(|i| {
            (0..classes)
                .map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / c)
                .collect()
        })
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in &centered {
        let mut w = v.clone();
        for b in &basis {
            let dot: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(w.into_iter().map(|x| x / norm).collect());
        }
        if basis.len() == classes - 1 {
            break;
        }
    }
    let scale = radius / ((c - 1.0) / c).sqrt();
    Ok(centered
        .iter()
        .map(|v| {
            let mut m = vec![0.0; d];
            for (slot, b) in m.iter_mut().zip(&basis) {
                *slot = scale * v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
            m
        })
        .collect())
}

/// Unit-variance Gaussian blobs around regular simplex vertices.
pub fn generate_classification(
    n: usize,
    classes: usize,
    d: usize,
    seed: u64,
) -> Result<DatasetSplit, TaskError> {
    if n < classes {
        return Err(TaskError::InvalidArgument(format!(
            "n = {n} is below the class count {classes}"
        )));
    }
    let means = simplex_means(classes, d, BLOB_RADIUS)?;
    let mut rng = stream(seed, 0);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let features = labels
        .iter()
        .map(|&c| {
            means[c]
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    Ok(DatasetSplit::new(
        "classification",
        Dataset {
            features,
            targets: Targets::Classes { labels, classes },
        },
        seed,
        false,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Headered numeric CSV; one column is the regression label, the rest are
/// features standardized with training statistics.
pub fn load_csv(
    path: impl AsRef<Path>,
    label: &LabelColumn,
    seed: u64,
) -> Result<DatasetSplit, TaskError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => TaskError::Io(io),
            other => TaskError::MalformedHeader {
                path: path.display().to_string(),
                reason: format!("{other:?}"),
            },
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || headers.iter().any(String::is_empty) {
        return Err(TaskError::MalformedHeader {
            path: path.display().to_string(),
            reason: "empty column name".into(),
        });
    }
    let label_idx =
        match label {
            LabelColumn::Index(i) if *i < headers.len() => *i,
            LabelColumn::Name(name) => headers.iter().position(|h| h == name).ok_or_else(|| {
                TaskError::MalformedHeader {
                    path: path.display().to_string(),
                    reason: format!("no column named `{name}`"),
                }
            })?,
            LabelColumn::Index(i) => {
                return Err(TaskError::MalformedHeader {
                    path: path.display().to_string(),
                    reason: format!(
                        "label column {i} out of range for {} columns",
                        headers.len()
                    ),
                })
            }
        };
    let width = headers.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (pos, record) in reader.records().enumerate() {
        let record = record?;
        let row = pos + 2;
        let missing = record.iter().filter(|c| c.is_empty()).count();
        if record.len() != width || missing > 0 {
            return Err(TaskError::RowLengthMismatch {
                row,
                expected: width,
                got: record.len() - missing,
            });
        }
        let mut x = Vec::with_capacity(width - 1);
        let mut y = 0.0;
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| TaskError::BadCell {
                row,
                column: headers[j].clone(),
                value: cell.to_string(),
            })?;
            if j == label_idx {
                y = v;
            } else {
                x.push(v);
            }
        }
        features.push(x);
        labels.push(vec![y]);
    }
    if features.len() < 2 {
        return Err(TaskError::InvalidArgument(format!(
            "{} has fewer than two data rows",
            path.display()
        )));
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(DatasetSplit::new(
        name,
        Dataset {
            features,
            targets: Targets::Values(labels),
        },
        seed,
        true,
    ))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_file(path: &Path) -> Result<Vec<u8>, TaskError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Parsed IDX image file: `count` rows of `rows·cols` values in `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>, TaskError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let bad = |reason: String| TaskError::MalformedHeader {
        path: path.display().to_string(),
        reason,
    };
    let magic = read_u32(&bytes, 0).ok_or_else(|| bad("file shorter than its header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(bad(format!(
            "magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| read_u32(&bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("file shorter than its header".into()))?;
    let (count, size) = (dims[0], dims[1] * dims[2]);
    let body = &bytes[16..];
    if body.len() != count * size {
        return Err(bad(format!(
            "{} data bytes for {count} images of {size} pixels",
            body.len()
        )));
    }
    Ok(body
        .chunks(size.max(1))
        .take(count)
        .map(|c| c.iter().map(|&p| p as f64 / 255.0).collect())
        .collect())
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>, TaskError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let bad = |reason: String| TaskError::MalformedHeader {
        path: path.display().to_string(),
        reason,
    };
    let magic = read_u32(&bytes, 0).ok_or_else(|| bad("file shorter than its header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(bad(format!(
            "magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count =
        read_u32(&bytes, 4).ok_or_else(|| bad("file shorter than its header".into()))? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(bad(format!(
            "{} label bytes for {count} labels",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// IDX images and labels as a classification split; pixels scaled to `[0, 1]`.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    seed: u64,
) -> Result<DatasetSplit, TaskError> {
    let features = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if features.len() != labels.len() {
        return Err(TaskError::InvalidArgument(format!(
            "{} images but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(DatasetSplit::new(
        "idx",
        Dataset {
            features,
            targets: Targets::Classes { labels, classes },
        },
        seed,
        false,
    ))
}

/// Writes `split,x0..,y0..` rows (features as stored, i.e. normalized).
pub fn write_dataset_csv(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<(), TaskError> {
    let mut w = csv::Writer::from_path(path)?;
    let d = split.input_dim();
    let out = if split.train.targets.is_classification() {
        1
    } else {
        split.output_dim()
    };
    let mut header = vec!["split".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.extend((0..out).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    for (tag, data) in [("train", &split.train), ("test", &split.test)] {
        for (i, x) in data.features.iter().enumerate() {
            let mut row = vec![tag.to_string()];
            row.extend(x.iter().map(|v| format!("{v:.17e}")));
            match &data.targets {
                Targets::Values(v) => row.extend(v[i].iter().map(|y| format!("{y:.17e}"))),
                Targets::Classes { labels, .. } => row.push(labels[i].to_string()),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
