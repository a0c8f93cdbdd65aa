//! Builders and independent oracles shared by the integration tests.
#![allow(dead_code)]

use gradvar::estimators::Estimator;
use gradvar::estimators::Snapshot;
use gradvar::model::{forward, Activation, ConvGeometry};
use gradvar::numerics::normal_sample;
use gradvar::{Dataset, LabelSpace, LayerSpec, LossSpec, Matrix, ModelSnapshot, RngStream};

pub fn random_dataset(rng: &mut RngStream, n: usize, dim: usize, space: LabelSpace) -> Dataset {
    let feats = Matrix::from_vec(n, dim, normal_sample(rng, n * dim)).unwrap();
    let labels = (0..n)
        .map(|_| match space {
            LabelSpace::Binary => {
                if rng.uniform() < 0.5 {
                    1
                } else {
                    -1
                }
            }
            LabelSpace::Classes(c) => rng.index(c) as i32,
        })
        .collect();
    Dataset::from_examples(feats, labels, space, 0).unwrap()
}

/// Fully-connected ReLU network with biases and a linear output layer.
pub fn mlp(rng: &mut RngStream, dims: &[usize]) -> ModelSnapshot {
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 < dims.len() { Activation::Relu } else { Activation::Identity };
            LayerSpec::fully_connected(w[0], w[1], act, true)
        })
        .collect();
    ModelSnapshot::init_normal(layers, rng).unwrap()
}

/// One ReLU convolution followed by a linear read-out.
pub fn conv_net(rng: &mut RngStream, geometry: ConvGeometry, channels: usize, classes: usize) -> ModelSnapshot {
    let conv = LayerSpec::convolution(geometry, channels, Activation::Relu, true);
    let fc = LayerSpec::fully_connected(conv.output_len(), classes, Activation::Identity, true);
    ModelSnapshot::init_normal(vec![conv, fc], rng).unwrap()
}

pub fn example_loss(model: &ModelSnapshot, loss: &LossSpec, data: &Dataset, i: usize) -> f64 {
    forward(model, loss, data, &[i]).unwrap().losses[0]
}

/// Central finite-difference gradient of example `i`'s loss.
pub fn fd_gradient(model: &ModelSnapshot, loss: &LossSpec, data: &Dataset, i: usize, h: f64) -> Vec<f64> {
    let theta = model.theta().to_vec();
    (0..theta.len())
        .map(|p| {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[p] += h;
            minus[p] -= h;
            let lp = example_loss(&model.with_theta(plus, 0).unwrap(), loss, data, i);
            let lm = example_loss(&model.with_theta(minus, 0).unwrap(), loss, data, i);
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// Two-pass Monte-Carlo statistics of an estimator, computed in chunks so
/// that large draw counts fit in memory. Returns the per-coordinate mean,
/// the per-coordinate standard error of that mean, the average unbiased
/// variance and the standard error of that average.
pub struct StreamStats {
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub avg_var: f64,
    pub avg_var_se: f64,
}

pub fn stream_stats(est: &Estimator<'_>, snap: &Snapshot, draws: usize, chunk: usize, rng: &RngStream) -> StreamStats {
    let d = snap.dim();
    let chunks = draws.div_ceil(chunk);
    let sizes = |c: usize| chunk.min(draws - c * chunk);
    let mut mean = vec![0.0; d];
    for c in 0..chunks {
        for e in est.draw_many(snap, sizes(c), &rng.derive_index(c as u64)).unwrap() {
            for (m, x) in mean.iter_mut().zip(&e.vector) {
                *m += x;
            }
        }
    }
    let r = draws as f64;
    mean.iter_mut().for_each(|m| *m /= r);
    let mut coord_ss = vec![0.0; d];
    let (mut s_sum, mut s_sq) = (0.0, 0.0);
    for c in 0..chunks {
        for e in est.draw_many(snap, sizes(c), &rng.derive_index(c as u64)).unwrap() {
            let mut s = 0.0;
            for ((ss, x), m) in coord_ss.iter_mut().zip(&e.vector).zip(&mean) {
                let dev = (x - m) * (x - m);
                *ss += dev;
                s += dev;
            }
            s /= d as f64;
            s_sum += s;
            s_sq += s * s;
        }
    }
    let var: Vec<f64> = coord_ss.iter().map(|ss| ss / (r - 1.0)).collect();
    let mean_se = var.iter().map(|v| (v / r).sqrt()).collect();
    let avg_var = var.iter().sum::<f64>() / d as f64;
    let s_mean = s_sum / r;
    let s_var = (s_sq / r - s_mean * s_mean).max(0.0) * r / (r - 1.0);
    let avg_var_se = s_var.sqrt() / r.sqrt() * r / (r - 1.0);
    StreamStats {
        mean,
        mean_se,
        avg_var,
        avg_var_se,
    }
}
