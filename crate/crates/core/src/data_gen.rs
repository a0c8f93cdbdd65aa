//! Synthetic datasets: random-features teacher/student problems, duplicate
//! injection, label corruption and a two-blob 2-D toy.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelSpace, Provenance};
use crate::error::{Error, Result};
use crate::model::{Activation, LayerSpec, ModelSnapshot};
use crate::numerics::{dot, normal_sample, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfConfig {
    pub input_dim: usize,
    pub teacher_hidden: usize,
    pub student_hidden: usize,
    pub n_train: usize,
    pub seed: u64,
    /// Fixed teacher bias; drawn from N(0, 1) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_bias: Option<f64>,
}

impl RfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.teacher_hidden == 0 || self.student_hidden == 0 || self.n_train == 0 {
            return Err(Error::Config(format!("random-features dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Student width over training-set size.
    pub fn overparam(&self) -> f64 {
        self.student_hidden as f64 / self.n_train as f64
    }
}

/// A teacher/student random-features problem.
#[derive(Clone, Debug)]
pub struct RfProblem {
    pub train: Dataset,
    /// Same size as the training set; never used for variance measurements.
    pub test: Dataset,
    /// `I x h_t`, unit-norm columns.
    pub teacher_features: Matrix,
    pub teacher_readout: Vec<f64>,
    pub teacher_bias: f64,
    /// `I x h_s`, unit-norm columns; frozen first layer of the student.
    pub student_features: Matrix,
}

impl RfProblem {
    /// Student network: frozen ReLU random features followed by a trainable
    /// linear readout without bias, initialised at zero.
    pub fn student_model(&self) -> Result<ModelSnapshot> {
        let (i, h) = self.student_features.shape();
        let layers = vec![
            LayerSpec::fully_connected(i, h, Activation::Relu, false).frozen(),
            LayerSpec::fully_connected(h, 1, Activation::Identity, false),
        ];
        ModelSnapshot::zeros(layers, self.student_features.data().to_vec())
    }
}

fn unit_columns(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::from_vec(rows, cols, normal_sample(rng, rows * cols)).expect("finite");
    for c in 0..cols {
        let norm = m.column(c).iter().map(|x| x * x).sum::<f64>().sqrt();
        for r in 0..rows {
            m.set(r, c, m.get(r, c) / norm);
        }
    }
    m
}

fn teacher_labels(x: &Matrix, features: &Matrix, readout: &[f64], bias: f64) -> Vec<i32> {
    (0..x.rows())
        .map(|n| {
            let hidden: Vec<f64> = features.tr_mul_vec(x.row(n)).into_iter().map(|v| v.max(0.0)).collect();
            if dot(&hidden, readout) + bias >= 0.0 {
                1
            } else {
                -1
            }
        })
        .collect()
}

/// Draws a teacher, train/test inputs from N(0, I) and their labels
/// `sign(relu(x^T F) r + b)` (with `sign(0) = +1`), plus student features.
pub fn gen_rf(config: &RfConfig) -> Result<RfProblem> {
    config.validate()?;
    let root = RngStream::new(config.seed, 0).derive("rf");
    let (i, ht, hs, n) = (config.input_dim, config.teacher_hidden, config.student_hidden, config.n_train);

    let mut teacher_rng = root.derive("teacher");
    let teacher_features = unit_columns(&mut teacher_rng, i, ht);
    let teacher_readout = normal_sample(&mut teacher_rng, ht);
    let drawn_bias = teacher_rng.standard_normal();
    let teacher_bias = config.teacher_bias.unwrap_or(drawn_bias);

    let student_features = unit_columns(&mut root.derive("student"), i, hs);

    let make = |label: &str| -> Result<Dataset> {
        let mut rng = root.derive(label);
        let x = Matrix::from_vec(n, i, normal_sample(&mut rng, n * i))?;
        let y = teacher_labels(&x, &teacher_features, &teacher_readout, teacher_bias);
        Dataset::from_examples(x, y, LabelSpace::Binary, config.seed)
    };
    Ok(RfProblem {
        train: make("train")?,
        test: make("test")?,
        teacher_features,
        teacher_readout,
        teacher_bias,
        student_features,
    })
}

/// `k` distinct indices from `0..n`, in random order.
fn choose_distinct(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for j in 0..k {
        let pick = j + rng.index(n - j);
        pool.swap(j, pick);
    }
    pool.truncate(k);
    pool
}

/// Overwrites `ceil(fraction * N)` randomly chosen slots with copies of
/// `n_distinct` of them, each source repeated equally (within one).
pub fn inject_duplicates(dataset: &Dataset, n_distinct: usize, fraction: f64, rng: &mut RngStream) -> Result<Dataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("duplicate fraction {fraction} outside [0, 1)")));
    }
    let n = dataset.len();
    let slots = (fraction * n as f64).ceil() as usize;
    if slots == 0 {
        return Ok(dataset.clone());
    }
    if n_distinct == 0 || slots < 2 * n_distinct {
        return Err(Error::Config(format!(
            "{slots} duplicate slots cannot hold {n_distinct} points repeated at least twice"
        )));
    }
    let chosen = choose_distinct(n, slots, rng);
    let heads = &chosen[..n_distinct];

    let mut features = dataset.features().clone();
    let mut labels = dataset.labels().to_vec();
    let mut provenance = dataset.provenance().to_vec();
    for (j, &slot) in chosen.iter().enumerate() {
        let head = heads[j % n_distinct];
        if slot != head {
            let row = dataset.example(head).to_vec();
            features.row_mut(slot).copy_from_slice(&row);
            labels[slot] = dataset.label(head);
        }
        provenance[slot] = Provenance::DuplicateOf(head);
    }
    Dataset::new(features, labels, dataset.label_space(), provenance, dataset.seed())
}

/// Gives exactly `floor(fraction * N)` random examples a uniformly random
/// different label.
pub fn corrupt_labels(dataset: &Dataset, fraction: f64, rng: &mut RngStream) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    let n = dataset.len();
    let count = (fraction * n as f64).floor() as usize;
    let mut labels = dataset.labels().to_vec();
    let mut provenance = dataset.provenance().to_vec();
    for i in choose_distinct(n, count, rng) {
        labels[i] = match dataset.label_space() {
            LabelSpace::Binary => -labels[i],
            LabelSpace::Classes(c) => {
                if c < 2 {
                    return Err(Error::Config("cannot corrupt labels with a single class".into()));
                }
                let shift = 1 + rng.index(c - 1) as i32;
                (labels[i] + shift) % c as i32
            }
        };
        provenance[i] = Provenance::Corrupted;
    }
    Dataset::new(dataset.features().clone(), labels, dataset.label_space(), provenance, dataset.seed())
}

/// Two unit-variance Gaussian blobs centred at `(+-separation/2, 0)`, each
/// point resampled until it lies on its own side of `x_0 = 0` at distance
/// at least `separation / 8`. Margin points alternate between
/// `p = (separation / 16, separation)` with label +1 and `-p` with label -1:
/// far apart in input space, but with identical gradients under any
/// bias-free linear logistic model.
pub fn gen_two_blobs(n_per_class: usize, separation: f64, overlap_count: usize, rng: &mut RngStream) -> Result<Dataset> {
    if n_per_class == 0 || !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Config("two blobs need n_per_class >= 1 and separation > 0".into()));
    }
    let gap = separation / 8.0;
    let mut rows = Vec::with_capacity(2 * n_per_class + overlap_count);
    let mut labels = Vec::with_capacity(rows.capacity());
    let mut provenance = Vec::with_capacity(rows.capacity());
    for label in [1, -1] {
        let side = f64::from(label);
        for _ in 0..n_per_class {
            let x0 = loop {
                let v = side * separation / 2.0 + rng.standard_normal();
                if side * v >= gap {
                    break v;
                }
            };
            rows.push(vec![x0, rng.standard_normal()]);
            labels.push(label);
            provenance.push(Provenance::Original);
        }
    }
    let p = [separation / 16.0, separation];
    for j in 0..overlap_count {
        let s = if j % 2 == 0 { 1.0 } else { -1.0 };
        rows.push(vec![s * p[0], s * p[1]]);
        labels.push(s as i32);
        provenance.push(Provenance::Margin);
    }
    Dataset::new(Matrix::from_rows(&rows)?, labels, LabelSpace::Binary, provenance, rng.seed())
}
