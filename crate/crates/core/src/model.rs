//! Feed-forward models with manual backprop that keeps per-example gradient
//! factors.
//!
//! Each trainable layer contributes a weight block and, when it has a bias,
//! a bias block. For one example, the gradient of a weight block is
//! `sum_t A_t D_t^T` where `A_t` is the layer input (or input patch at
//! spatial position `t`) and `D_t` the gradient w.r.t. the layer's
//! pre-activation output. A fully-connected layer is the `T = 1` case. The
//! bias block uses the same `D` with `A` fixed to the scalar `1`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelSpace};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::numerics::{axpy, dot, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Valid (unpadded), stride-1 convolution over a `height x width x channels`
/// input laid out as `((y * width) + x) * channels + c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvGeometry {
    pub in_height: usize,
    pub in_width: usize,
    pub in_channels: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.in_height + 1 - self.kernel_height
    }

    pub fn out_width(&self) -> usize {
        self.in_width + 1 - self.kernel_width
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn patch_dim(&self) -> usize {
        self.kernel_height * self.kernel_width * self.in_channels
    }

    pub fn input_len(&self) -> usize {
        self.in_height * self.in_width * self.in_channels
    }

    /// Patch matrix (`positions x patch_dim`, row-major) of one input.
    /// Patch coordinates are ordered `(dy, dx, channel)`.
    pub fn extract_patches(&self, input: &[f64]) -> Vec<f64> {
        let (kh, kw, ch) = (self.kernel_height, self.kernel_width, self.in_channels);
        let mut out = Vec::with_capacity(self.positions() * self.patch_dim());
        for y in 0..self.out_height() {
            for x in 0..self.out_width() {
                for dy in 0..kh {
                    let start = ((y + dy) * self.in_width + x) * ch;
                    out.extend_from_slice(&input[start..start + kw * ch]);
                }
            }
        }
        out
    }

    /// Adjoint of [`extract_patches`](Self::extract_patches): scatters patch
    /// gradients back onto the input.
    fn accumulate_patches(&self, patch_grads: &[f64], input_grad: &mut [f64]) {
        let (kh, kw, ch) = (self.kernel_height, self.kernel_width, self.in_channels);
        let pd = self.patch_dim();
        let mut t = 0;
        for y in 0..self.out_height() {
            for x in 0..self.out_width() {
                let patch = &patch_grads[t * pd..(t + 1) * pd];
                for dy in 0..kh {
                    let start = ((y + dy) * self.in_width + x) * ch;
                    let src = &patch[dy * kw * ch..(dy + 1) * kw * ch];
                    for (dst, s) in input_grad[start..start + kw * ch].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
                t += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LayerKind {
    FullyConnected,
    Convolution(ConvGeometry),
}

/// One layer. Weights are an `I x O` matrix (row-major), `I` being the
/// input dimension (patch dimension for convolutions).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub has_bias: bool,
    /// Frozen layers keep their weights outside the trainable vector.
    pub trainable: bool,
}

impl LayerSpec {
    pub fn fully_connected(input_dim: usize, output_dim: usize, activation: Activation, has_bias: bool) -> Self {
        LayerSpec {
            kind: LayerKind::FullyConnected,
            input_dim,
            output_dim,
            activation,
            has_bias,
            trainable: true,
        }
    }

    pub fn convolution(geometry: ConvGeometry, out_channels: usize, activation: Activation, has_bias: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Convolution(geometry),
            input_dim: geometry.patch_dim(),
            output_dim: out_channels,
            activation,
            has_bias,
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    /// Spatial positions `T` (1 for fully-connected layers).
    pub fn positions(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => 1,
            LayerKind::Convolution(g) => g.positions(),
        }
    }

    /// Length of the flat input vector this layer consumes.
    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => self.input_dim,
            LayerKind::Convolution(g) => g.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        self.positions() * self.output_dim
    }

    pub fn weight_count(&self) -> usize {
        self.input_dim * self.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.output_dim } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("layer dimensions must be >= 1".into()));
        }
        if let LayerKind::Convolution(g) = self.kind {
            if g.kernel_height == 0
                || g.kernel_width == 0
                || g.in_channels == 0
                || g.kernel_height > g.in_height
                || g.kernel_width > g.in_width
            {
                return Err(Error::Config(format!("invalid convolution geometry {g:?}")));
            }
            if g.patch_dim() != self.input_dim {
                return Err(Error::Config(format!(
                    "convolution input_dim {} != kernel patch size {}",
                    self.input_dim,
                    g.patch_dim()
                )));
            }
        }
        Ok(())
    }

    /// Pre-activation output of one example.
    fn forward(&self, weights: &[f64], bias: Option<&[f64]>, input: &[f64]) -> Vec<f64> {
        let o = self.output_dim;
        match self.kind {
            LayerKind::FullyConnected => linear(weights, bias, input, o),
            LayerKind::Convolution(g) => {
                let patches = g.extract_patches(input);
                let mut out = Vec::with_capacity(g.positions() * o);
                for patch in patches.chunks_exact(self.input_dim) {
                    out.extend(linear(weights, bias, patch, o));
                }
                out
            }
        }
    }

    /// Input rows `A_t` for the factor store.
    fn factor_inputs(&self, input: &[f64]) -> Vec<f64> {
        match self.kind {
            LayerKind::FullyConnected => input.to_vec(),
            LayerKind::Convolution(g) => g.extract_patches(input),
        }
    }

    /// Gradient w.r.t. this layer's input given the pre-activation gradient.
    fn backward_input(&self, weights: &[f64], dz: &[f64]) -> Vec<f64> {
        let o = self.output_dim;
        let per_position = |dz_t: &[f64]| -> Vec<f64> {
            weights.chunks_exact(o).map(|w_row| dot(w_row, dz_t)).collect()
        };
        match self.kind {
            LayerKind::FullyConnected => per_position(dz),
            LayerKind::Convolution(g) => {
                let mut patch_grads = Vec::with_capacity(g.positions() * self.input_dim);
                for dz_t in dz.chunks_exact(o) {
                    patch_grads.extend(per_position(dz_t));
                }
                let mut grad = vec![0.0; g.input_len()];
                g.accumulate_patches(&patch_grads, &mut grad);
                grad
            }
        }
    }
}

fn linear(weights: &[f64], bias: Option<&[f64]>, input: &[f64], o: usize) -> Vec<f64> {
    let mut z = match bias {
        Some(b) => b.to_vec(),
        None => vec![0.0; o],
    };
    for (a, w_row) in input.iter().zip(weights.chunks_exact(o)) {
        axpy(*a, w_row, &mut z);
    }
    z
}

/// Immutable parameter snapshot of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSnapshot {
    layers: Vec<LayerSpec>,
    /// Trainable parameters, layer by layer: weights then bias.
    theta: Vec<f64>,
    /// Parameters of frozen layers, same layout.
    frozen: Vec<f64>,
    step: u64,
}

const CHECKPOINT_FORMAT: &str = "gradvar-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ModelSnapshot,
}

impl ModelSnapshot {
    pub fn new(layers: Vec<LayerSpec>, theta: Vec<f64>, frozen: Vec<f64>, step: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_len() != pair[1].input_len() {
                return Err(Error::Config(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].output_len(),
                    i + 1,
                    pair[1].input_len()
                )));
            }
        }
        let trainable: usize = layers.iter().filter(|l| l.trainable).map(LayerSpec::param_count).sum();
        let fixed: usize = layers.iter().filter(|l| !l.trainable).map(LayerSpec::param_count).sum();
        if theta.len() != trainable || frozen.len() != fixed {
            return Err(Error::Config(format!(
                "parameter vectors have lengths ({}, {}), layers need ({trainable}, {fixed})",
                theta.len(),
                frozen.len()
            )));
        }
        if !theta.iter().chain(&frozen).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(ModelSnapshot {
            layers,
            theta,
            frozen,
            step,
        })
    }

    /// He-style normal initialisation for trainable and frozen layers alike;
    /// biases start at zero.
    pub fn init_normal(layers: Vec<LayerSpec>, rng: &mut RngStream) -> Result<Self> {
        let mut theta = Vec::new();
        let mut frozen = Vec::new();
        for l in &layers {
            let gain = if l.activation == Activation::Relu { 2.0 } else { 1.0 };
            let std = (gain / l.input_dim as f64).sqrt();
            let target = if l.trainable { &mut theta } else { &mut frozen };
            target.extend((0..l.weight_count()).map(|_| std * rng.standard_normal()));
            if l.has_bias {
                target.extend(std::iter::repeat_n(0.0, l.output_dim));
            }
        }
        ModelSnapshot::new(layers, theta, frozen, 0)
    }

    /// All trainable parameters zero; frozen parameters given explicitly.
    pub fn zeros(layers: Vec<LayerSpec>, frozen: Vec<f64>) -> Result<Self> {
        let n = layers.iter().filter(|l| l.trainable).map(LayerSpec::param_count).sum();
        ModelSnapshot::new(layers, vec![0.0; n], frozen, 0)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn frozen_params(&self) -> &[f64] {
        &self.frozen
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::output_len)
    }

    /// New snapshot sharing the architecture with different trainable
    /// parameters.
    pub fn with_theta(&self, theta: Vec<f64>, step: u64) -> Result<Self> {
        ModelSnapshot::new(self.layers.clone(), theta, self.frozen.clone(), step)
    }

    /// Offset of each layer's parameters in its owning vector.
    fn offsets(&self) -> Vec<usize> {
        let (mut t, mut f) = (0, 0);
        self.layers
            .iter()
            .map(|l| {
                let cursor = if l.trainable { &mut t } else { &mut f };
                let at = *cursor;
                *cursor += l.param_count();
                at
            })
            .collect()
    }

    fn layer_params(&self, l: usize, offset: usize) -> (&[f64], Option<&[f64]>) {
        let spec = &self.layers[l];
        let src = if spec.trainable { &self.theta } else { &self.frozen };
        let w = &src[offset..offset + spec.weight_count()];
        let b = spec
            .has_bias
            .then(|| &src[offset + spec.weight_count()..offset + spec.param_count()]);
        (w, b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        write_atomic(path, &serde_json::to_vec_pretty(&ckpt)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let m = ckpt.model;
        ModelSnapshot::new(m.layers, m.theta, m.frozen, m.step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropySoftmax,
    /// `log(1 + exp(-y z))` for a single logit and labels in {-1, +1}.
    LogisticBinary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Optional per-example weights, indexed by dataset example.
    pub weights: Option<Vec<f64>>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec { kind, weights: None }
    }

    pub fn logistic() -> Self {
        LossSpec::new(LossKind::LogisticBinary)
    }

    pub fn cross_entropy() -> Self {
        LossSpec::new(LossKind::CrossEntropySoftmax)
    }

    fn check(&self, model: &ModelSnapshot, dataset: &Dataset) -> Result<()> {
        match (self.kind, dataset.label_space()) {
            (LossKind::LogisticBinary, LabelSpace::Binary) if model.output_len() == 1 => {}
            (LossKind::CrossEntropySoftmax, LabelSpace::Classes(c)) if model.output_len() == c => {}
            (kind, space) => {
                return Err(Error::contract(format!(
                    "{kind:?} loss incompatible with {space:?} labels and {} outputs",
                    model.output_len()
                )))
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != dataset.len() {
                return Err(Error::contract("loss weights length != dataset size"));
            }
        }
        Ok(())
    }

    /// Loss of one example and its gradient w.r.t. the model output.
    fn evaluate(&self, output: &[f64], label: i32, weight: f64) -> (f64, Vec<f64>) {
        match self.kind {
            LossKind::LogisticBinary => {
                let y = f64::from(label);
                let margin = y * output[0];
                // log(1 + e^{-m}) without overflow.
                let loss = if margin > 0.0 {
                    (-margin).exp().ln_1p()
                } else {
                    -margin + margin.exp().ln_1p()
                };
                let sigma_neg = sigmoid(-margin);
                (weight * loss, vec![-weight * y * sigma_neg])
            }
            LossKind::CrossEntropySoftmax => {
                let max = output.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = output.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let k = label as usize;
                let loss = total.ln() + max - output[k];
                let mut grad: Vec<f64> = exps.iter().map(|e| weight * e / total).collect();
                grad[k] -= weight;
                (weight * loss, grad)
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ExampleTrace {
    /// Input to every layer; index `L` is the model output.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    output_grad: Vec<f64>,
}

/// Result of a forward pass over a batch; feeds [`backward_factored`].
pub struct ForwardPass {
    pub indices: Vec<usize>,
    pub losses: Vec<f64>,
    traces: Vec<ExampleTrace>,
    step: u64,
    param_count: usize,
}

impl ForwardPass {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }

    /// Model output (after the final activation) for the `pos`-th batch entry.
    pub fn output(&self, pos: usize) -> &[f64] {
        self.traces[pos].activations.last().expect("output")
    }
}

fn forward_example(model: &ModelSnapshot, offsets: &[usize], input: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut activations = Vec::with_capacity(model.layers.len() + 1);
    let mut pre = Vec::with_capacity(model.layers.len());
    activations.push(input.to_vec());
    for (l, spec) in model.layers.iter().enumerate() {
        let (w, b) = model.layer_params(l, offsets[l]);
        let z = spec.forward(w, b, activations.last().expect("input"));
        activations.push(z.iter().map(|&v| spec.activation.apply(v)).collect());
        pre.push(z);
    }
    (activations, pre)
}

/// Runs the model on `indices` of `dataset`, returning per-example losses
/// and the activations backprop needs.
pub fn forward(model: &ModelSnapshot, loss: &LossSpec, dataset: &Dataset, indices: &[usize]) -> Result<ForwardPass> {
    if dataset.input_dim() != model.input_len() {
        return Err(Error::DimensionMismatch {
            op: "forward",
            left: (dataset.input_dim(), 1),
            right: (model.input_len(), 1),
        });
    }
    loss.check(model, dataset)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::contract(format!("example index {bad} out of range")));
    }
    let offsets = model.offsets();
    let traces: Vec<ExampleTrace> = indices
        .par_iter()
        .map(|&i| {
            let (activations, pre_activations) = forward_example(model, &offsets, dataset.example(i));
            let weight = loss.weights.as_ref().map_or(1.0, |w| w[i]);
            let (_, output_grad) = loss.evaluate(activations.last().expect("output"), dataset.label(i), weight);
            ExampleTrace {
                activations,
                pre_activations,
                output_grad,
            }
        })
        .collect();
    let losses: Vec<f64> = indices
        .iter()
        .zip(&traces)
        .map(|(&i, t)| {
            let weight = loss.weights.as_ref().map_or(1.0, |w| w[i]);
            loss.evaluate(t.activations.last().expect("output"), dataset.label(i), weight).0
        })
        .collect();
    if let Some(pos) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss of example {}", indices[pos])));
    }
    Ok(ForwardPass {
        indices: indices.to_vec(),
        losses,
        traces,
        step: model.step,
        param_count: model.param_count(),
    })
}

/// Which parameters a factor block covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Weight,
    Bias,
}

/// Per-example factors of one parameter block.
///
/// Row `i * T + t` of `a` holds `A_{i,t}` (length `I`), the same row of `d`
/// holds `D_{i,t}` (length `O`). Example `i`'s gradient for the block is
/// `sum_t A_{i,t} D_{i,t}^T`, flattened row-major into `I * O` entries.
#[derive(Clone, Debug)]
pub struct FactorBlock {
    pub layer: usize,
    pub kind: BlockKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub positions: usize,
    /// Start of this block in the flat trainable parameter vector.
    pub offset: usize,
    pub a: Matrix,
    pub d: Matrix,
}

impl FactorBlock {
    pub fn param_count(&self) -> usize {
        self.input_dim * self.output_dim
    }

    /// `A_{i,t}` rows of example `i`, `positions x input_dim`.
    #[inline]
    pub fn a_of(&self, i: usize) -> &[f64] {
        self.a.row_block(i * self.positions, (i + 1) * self.positions)
    }

    /// `D_{i,t}` rows of example `i`, `positions x output_dim`.
    #[inline]
    pub fn d_of(&self, i: usize) -> &[f64] {
        self.d.row_block(i * self.positions, (i + 1) * self.positions)
    }

    /// Accumulates example `i`'s block gradient into `out` (length `I * O`).
    pub fn add_gradient(&self, i: usize, out: &mut [f64]) {
        let (ii, oo) = (self.input_dim, self.output_dim);
        let a = self.a_of(i);
        let d = self.d_of(i);
        for t in 0..self.positions {
            let a_t = &a[t * ii..(t + 1) * ii];
            let d_t = &d[t * oo..(t + 1) * oo];
            for (u, &au) in a_t.iter().enumerate() {
                axpy(au, d_t, &mut out[u * oo..(u + 1) * oo]);
            }
        }
    }
}

/// Factored per-example gradients of a batch.
#[derive(Clone, Debug)]
pub struct PerExampleFactors {
    pub blocks: Vec<FactorBlock>,
    /// Dataset index of every batch position.
    pub examples: Vec<usize>,
    pub param_count: usize,
    pub step: u64,
}

impl PerExampleFactors {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Full flat gradient of batch position `i`.
    pub fn per_example_gradient(&self, i: usize) -> Result<Vec<f64>> {
        if i >= self.len() {
            return Err(Error::contract(format!(
                "example {i} out of range for batch of {}",
                self.len()
            )));
        }
        let mut g = vec![0.0; self.param_count];
        for b in &self.blocks {
            b.add_gradient(i, &mut g[b.offset..b.offset + b.param_count()]);
        }
        Ok(g)
    }

    /// Materialises every per-example gradient.
    pub fn gradient_table(&self) -> GradientTable {
        let rows: Vec<Vec<f64>> = (0..self.len())
            .into_par_iter()
            .map(|i| self.per_example_gradient(i).expect("index in range"))
            .collect();
        let data = rows.concat();
        GradientTable {
            gradients: Matrix::from_vec(self.len(), self.param_count, data)
                .expect("finite gradients"),
            step: self.step,
        }
    }
}

/// Factored backprop: per-example `(A, D)` for every trainable block.
pub fn backward_factored(model: &ModelSnapshot, pass: &ForwardPass) -> Result<PerExampleFactors> {
    if pass.step != model.step || pass.param_count != model.param_count() {
        return Err(Error::contract("forward pass belongs to a different snapshot"));
    }
    let offsets = model.offsets();
    let lowest_trainable = model.layers.iter().position(|l| l.trainable);

    // Per example: for each trainable layer (top-down), (A rows, D rows).
    let per_example: Vec<Vec<(Vec<f64>, Vec<f64>)>> = pass
        .traces
        .par_iter()
        .map(|trace| {
            let mut out = Vec::new();
            let Some(lowest) = lowest_trainable else {
                return out;
            };
            let mut upstream = trace.output_grad.clone();
            for l in (lowest..model.layers.len()).rev() {
                let spec = &model.layers[l];
                let dz: Vec<f64> = upstream
                    .iter()
                    .zip(&trace.pre_activations[l])
                    .map(|(g, &z)| g * spec.activation.derivative(z))
                    .collect();
                if l > lowest {
                    let (w, _) = model.layer_params(l, offsets[l]);
                    upstream = spec.backward_input(w, &dz);
                }
                if spec.trainable {
                    out.push((spec.factor_inputs(&trace.activations[l]), dz));
                }
            }
            out.reverse();
            out
        })
        .collect();

    let n = pass.traces.len();
    let mut blocks = Vec::new();
    let mut slot = 0;
    let mut offset = 0;
    for (l, spec) in model.layers.iter().enumerate() {
        if !spec.trainable {
            continue;
        }
        let t = spec.positions();
        let mut a = Vec::with_capacity(n * t * spec.input_dim);
        let mut d = Vec::with_capacity(n * t * spec.output_dim);
        for ex in &per_example {
            a.extend_from_slice(&ex[slot].0);
            d.extend_from_slice(&ex[slot].1);
        }
        let d = Matrix::from_vec(n * t, spec.output_dim, d)?;
        blocks.push(FactorBlock {
            layer: l,
            kind: BlockKind::Weight,
            input_dim: spec.input_dim,
            output_dim: spec.output_dim,
            positions: t,
            offset,
            a: Matrix::from_vec(n * t, spec.input_dim, a)?,
            d: d.clone(),
        });
        offset += spec.weight_count();
        if spec.has_bias {
            blocks.push(FactorBlock {
                layer: l,
                kind: BlockKind::Bias,
                input_dim: 1,
                output_dim: spec.output_dim,
                positions: t,
                offset,
                a: Matrix::from_vec(n * t, 1, vec![1.0; n * t])?,
                d,
            });
            offset += spec.output_dim;
        }
        slot += 1;
    }
    Ok(PerExampleFactors {
        blocks,
        examples: pass.indices.clone(),
        param_count: model.param_count(),
        step: model.step,
    })
}

/// Materialised per-example gradients at one snapshot (row `i` = `g_i`).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTable {
    gradients: Matrix,
    step: u64,
}

impl GradientTable {
    pub fn from_matrix(gradients: Matrix) -> Self {
        GradientTable { gradients, step: 0 }
    }

    /// Table from explicit rows, mostly for toy problems.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(GradientTable::from_matrix(Matrix::from_rows(rows)?))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.gradients.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.gradients.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.gradients.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.gradients
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Full-batch mean gradient.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for i in 0..self.len() {
            axpy(1.0, self.row(i), &mut m);
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }

    /// Same gradients scaled by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let data = self.gradients.data().iter().map(|x| x * s).collect();
        GradientTable {
            gradients: Matrix::from_vec(self.len(), self.dim(), data).expect("finite"),
            step: self.step,
        }
    }
}

/// Forward + factored backward over the whole dataset, materialised.
pub fn per_example_gradients(model: &ModelSnapshot, loss: &LossSpec, dataset: &Dataset) -> Result<GradientTable> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let pass = forward(model, loss, dataset, &all)?;
    Ok(backward_factored(model, &pass)?.gradient_table())
}

/// Factors for the whole dataset.
pub fn dataset_factors(model: &ModelSnapshot, loss: &LossSpec, dataset: &Dataset) -> Result<PerExampleFactors> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let pass = forward(model, loss, dataset, &all)?;
    backward_factored(model, &pass)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v <- mu v + (g + wd theta)`, `theta <- theta - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: vec![0.0; param_count],
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update with a precomputed batch-mean gradient.
    pub fn apply(&mut self, model: &ModelSnapshot, grad: &[f64]) -> Result<ModelSnapshot> {
        if grad.len() != model.param_count() || self.velocity.len() != grad.len() {
            return Err(Error::contract("gradient length does not match parameters"));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        let mut theta = model.theta().to_vec();
        for ((v, th), g) in self.velocity.iter_mut().zip(theta.iter_mut()).zip(grad) {
            *v = momentum * *v + (g + weight_decay * *th);
            *th -= lr * *v;
        }
        if let Some(pos) = theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sgd update produced a non-finite parameter at index {pos} (step {})",
                model.step() + 1
            )));
        }
        model.with_theta(theta, model.step() + 1)
    }
}

/// One SGD step on a batch. Returns the new snapshot and the batch loss.
pub fn sgd_step(
    model: &ModelSnapshot,
    loss: &LossSpec,
    dataset: &Dataset,
    batch: &[usize],
    optimizer: &mut Sgd,
) -> Result<(ModelSnapshot, f64)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let pass = forward(model, loss, dataset, batch)?;
    let factors = backward_factored(model, &pass)?;
    let mut grad = vec![0.0; model.param_count()];
    for b in &factors.blocks {
        for i in 0..factors.len() {
            b.add_gradient(i, &mut grad[b.offset..b.offset + b.param_count()]);
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    let next = optimizer.apply(model, &grad)?;
    Ok((next, pass.mean_loss()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normal_sample;

    fn random_dataset(rng: &mut RngStream, n: usize, dim: usize, space: LabelSpace) -> Dataset {
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

    fn mlp(rng: &mut RngStream, dims: &[usize]) -> ModelSnapshot {
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

    /// Straight-line recomputation of a dense MLP's outputs.
    fn naive_mlp_outputs(model: &ModelSnapshot, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        for spec in model.layers() {
            let th = model.theta();
            let mut z = vec![0.0; spec.output_dim];
            for (v, zv) in z.iter_mut().enumerate() {
                for (u, au) in a.iter().enumerate() {
                    *zv += th[off + u * spec.output_dim + v] * au;
                }
                if spec.has_bias {
                    *zv += th[off + spec.weight_count() + v];
                }
            }
            off += spec.param_count();
            a = z
                .into_iter()
                .map(|z| if spec.activation == Activation::Relu { z.max(0.0) } else { z })
                .collect();
        }
        a
    }

    #[test]
    fn zero_weights_logistic_loss_is_ln2() {
        let mut rng = RngStream::new(1, 0);
        let data = random_dataset(&mut rng, 5, 3, LabelSpace::Binary);
        let layers = vec![LayerSpec::fully_connected(3, 1, Activation::Identity, true)];
        let model = ModelSnapshot::zeros(layers, vec![]).unwrap();
        let pass = forward(&model, &LossSpec::logistic(), &data, &[0, 1, 2, 3, 4]).unwrap();
        for l in pass.losses {
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_layer_outputs_theta_transpose_x() {
        let mut rng = RngStream::new(2, 0);
        let data = random_dataset(&mut rng, 4, 3, LabelSpace::Classes(2));
        let layers = vec![LayerSpec::fully_connected(3, 2, Activation::Identity, false)];
        let model = ModelSnapshot::init_normal(layers, &mut rng).unwrap();
        let pass = forward(&model, &LossSpec::cross_entropy(), &data, &[0, 1, 2, 3]).unwrap();
        let th = model.theta();
        for (pos, &i) in pass.indices.iter().enumerate() {
            let x = data.example(i);
            for v in 0..2 {
                let expect: f64 = (0..3).map(|u| th[u * 2 + v] * x[u]).sum();
                assert!((pass.output(pos)[v] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mlp_loss_matches_independent_recomputation() {
        let mut rng = RngStream::new(3, 0);
        let data = random_dataset(&mut rng, 8, 5, LabelSpace::Classes(3));
        let model = mlp(&mut rng, &[5, 7, 3]);
        let idx: Vec<usize> = (0..8).collect();
        let pass = forward(&model, &LossSpec::cross_entropy(), &data, &idx).unwrap();
        for &i in &idx {
            let out = naive_mlp_outputs(&model, data.example(i));
            let lse = out.iter().map(|z| z.exp()).sum::<f64>().ln();
            let expect = lse - out[data.label(i) as usize];
            assert!((pass.losses[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let mut rng = RngStream::new(3, 0);
        let data = random_dataset(&mut rng, 2, 4, LabelSpace::Binary);
        let model = mlp(&mut rng, &[5, 1]);
        assert!(forward(&model, &LossSpec::logistic(), &data, &[0]).is_err());
    }

    #[test]
    fn logistic_gradient_at_zero_is_minus_half_y_x() {
        let mut rng = RngStream::new(4, 0);
        let data = random_dataset(&mut rng, 6, 4, LabelSpace::Binary);
        let layers = vec![LayerSpec::fully_connected(4, 1, Activation::Identity, false)];
        let model = ModelSnapshot::zeros(layers, vec![]).unwrap();
        let table = per_example_gradients(&model, &LossSpec::logistic(), &data).unwrap();
        for i in 0..6 {
            let y = f64::from(data.label(i));
            for (g, x) in table.row(i).iter().zip(data.example(i)) {
                assert!((g + y * x / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_gradient() {
        let mut rng = RngStream::new(5, 0);
        let feats = Matrix::zeros(1, 4);
        let data = Dataset::from_examples(feats, vec![1], LabelSpace::Binary, 0).unwrap();
        let model = mlp(&mut rng, &[4, 6, 1]);
        let table = per_example_gradients(&model, &LossSpec::logistic(), &data).unwrap();
        assert!(table.row(0)[..24].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicate_examples_get_identical_factors() {
        let mut rng = RngStream::new(6, 0);
        let data = random_dataset(&mut rng, 3, 4, LabelSpace::Binary);
        let model = mlp(&mut rng, &[4, 5, 1]);
        let pass = forward(&model, &LossSpec::logistic(), &data, &[1, 2, 1]).unwrap();
        let f = backward_factored(&model, &pass).unwrap();
        for b in &f.blocks {
            assert_eq!(b.a_of(0), b.a_of(2));
            assert_eq!(b.d_of(0), b.d_of(2));
        }
    }

    #[test]
    fn mean_of_per_example_gradients_is_batch_gradient() {
        let mut rng = RngStream::new(7, 0);
        let data = random_dataset(&mut rng, 10, 4, LabelSpace::Classes(3));
        let model = mlp(&mut rng, &[4, 8, 3]);
        let loss = LossSpec::cross_entropy();
        let table = per_example_gradients(&model, &loss, &data).unwrap();
        let mean = table.mean();
        // Batch gradient through the optimizer path: lr = 1 turns the update into -g.
        let idx: Vec<usize> = (0..10).collect();
        let mut opt = Sgd::new(SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0 }, model.param_count()).unwrap();
        let (next, _) = sgd_step(&model, &loss, &data, &idx, &mut opt).unwrap();
        for ((m, a), b) in mean.iter().zip(model.theta()).zip(next.theta()) {
            let g = a - b;
            assert!((m - g).abs() <= 1e-12 * (1.0 + g.abs()));
        }
    }

    #[test]
    fn per_example_gradient_rejects_bad_index() {
        let mut rng = RngStream::new(8, 0);
        let data = random_dataset(&mut rng, 2, 3, LabelSpace::Binary);
        let model = mlp(&mut rng, &[3, 1]);
        let f = dataset_factors(&model, &LossSpec::logistic(), &data).unwrap();
        assert!(f.per_example_gradient(2).is_err());
    }

    #[test]
    fn one_by_one_conv_matches_fc_factors() {
        let mut rng = RngStream::new(9, 0);
        let data = random_dataset(&mut rng, 4, 3, LabelSpace::Binary);
        let geom = ConvGeometry { in_height: 1, in_width: 1, in_channels: 3, kernel_height: 1, kernel_width: 1 };
        let conv = ModelSnapshot::init_normal(
            vec![LayerSpec::convolution(geom, 1, Activation::Identity, true)],
            &mut rng,
        )
        .unwrap();
        let fc = ModelSnapshot::new(
            vec![LayerSpec::fully_connected(3, 1, Activation::Identity, true)],
            conv.theta().to_vec(),
            vec![],
            0,
        )
        .unwrap();
        let loss = LossSpec::logistic();
        let fa = dataset_factors(&conv, &loss, &data).unwrap();
        let fb = dataset_factors(&fc, &loss, &data).unwrap();
        for (a, b) in fa.blocks.iter().zip(&fb.blocks) {
            assert_eq!(a.a, b.a);
            assert_eq!(a.d, b.d);
        }
    }

    #[test]
    fn patch_extraction_matches_direct_convolution() {
        let mut rng = RngStream::new(10, 0);
        let geom = ConvGeometry { in_height: 4, in_width: 5, in_channels: 2, kernel_height: 2, kernel_width: 3 };
        let input = normal_sample(&mut rng, geom.input_len());
        let o = 3;
        let w = normal_sample(&mut rng, geom.patch_dim() * o);
        let spec = LayerSpec::convolution(geom, o, Activation::Identity, false);
        let out = spec.forward(&w, None, &input);
        let mut t = 0;
        for y in 0..geom.out_height() {
            for x in 0..geom.out_width() {
                for v in 0..o {
                    let mut direct = 0.0;
                    for dy in 0..2 {
                        for dx in 0..3 {
                            for c in 0..2 {
                                let xin = input[((y + dy) * 5 + x + dx) * 2 + c];
                                direct += w[((dy * 3 + dx) * 2 + c) * o + v] * xin;
                            }
                        }
                    }
                    assert!((out[t * o + v] - direct).abs() < 1e-12);
                }
                t += 1;
            }
        }
    }

    #[test]
    fn sgd_plain_and_lr_zero() {
        let mut rng = RngStream::new(11, 0);
        let data = random_dataset(&mut rng, 6, 3, LabelSpace::Binary);
        let model = mlp(&mut rng, &[3, 4, 1]);
        let loss = LossSpec::logistic();
        let batch = [0, 2, 4];
        let mut opt = Sgd::new(SgdConfig { lr: 0.0, momentum: 0.0, weight_decay: 0.0 }, model.param_count()).unwrap();
        let (same, _) = sgd_step(&model, &loss, &data, &batch, &mut opt).unwrap();
        assert_eq!(same.theta(), model.theta());

        let table = {
            let pass = forward(&model, &loss, &data, &batch).unwrap();
            backward_factored(&model, &pass).unwrap().gradient_table()
        };
        let g = table.mean();
        let mut opt = Sgd::new(SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }, model.param_count()).unwrap();
        let (next, _) = sgd_step(&model, &loss, &data, &batch, &mut opt).unwrap();
        for ((a, b), gi) in next.theta().iter().zip(model.theta()).zip(&g) {
            assert!((a - (b - 0.1 * gi)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_matches_unrolled_recurrence() {
        let model = ModelSnapshot::new(
            vec![LayerSpec::fully_connected(2, 1, Activation::Identity, false)],
            vec![1.0, -2.0],
            vec![],
            0,
        )
        .unwrap();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.01 };
        let mut opt = Sgd::new(cfg, 2).unwrap();
        let g1 = [0.3, -0.4];
        let g2 = [-0.2, 0.5];
        let m1 = opt.apply(&model, &g1).unwrap();
        let m2 = opt.apply(&m1, &g2).unwrap();
        // v1 = g1 + wd th0; th1 = th0 - lr v1; v2 = mu v1 + g2 + wd th1; th2 = th1 - lr v2.
        for j in 0..2 {
            let th0 = model.theta()[j];
            let v1 = g1[j] + 0.01 * th0;
            let th1 = th0 - 0.1 * v1;
            let v2 = 0.5 * v1 + g2[j] + 0.01 * th1;
            let th2 = th1 - 0.1 * v2;
            assert!((m2.theta()[j] - th2).abs() < 1e-12);
        }
        assert_eq!(m2.step(), 2);
    }

    #[test]
    fn sgd_rejects_bad_config_and_nonfinite() {
        assert!(Sgd::new(SgdConfig { lr: 0.1, momentum: 1.0, weight_decay: 0.0 }, 1).is_err());
        assert!(Sgd::new(SgdConfig { lr: -1.0, momentum: 0.0, weight_decay: 0.0 }, 1).is_err());
        let model = ModelSnapshot::new(
            vec![LayerSpec::fully_connected(1, 1, Activation::Identity, false)],
            vec![1.0],
            vec![],
            0,
        )
        .unwrap();
        let mut opt = Sgd::new(SgdConfig { lr: 1e308, momentum: 0.0, weight_decay: 0.0 }, 1).unwrap();
        assert!(matches!(opt.apply(&model, &[1e308]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradient_evaluation_leaves_snapshot_untouched() {
        let mut rng = RngStream::new(12, 0);
        let data = random_dataset(&mut rng, 5, 3, LabelSpace::Binary);
        let model = mlp(&mut rng, &[3, 4, 1]);
        let before: Vec<u64> = model.theta().iter().map(|x| x.to_bits()).collect();
        let _ = per_example_gradients(&model, &LossSpec::logistic(), &data).unwrap();
        let after: Vec<u64> = model.theta().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut rng = RngStream::new(13, 0);
        let geom = ConvGeometry { in_height: 3, in_width: 3, in_channels: 1, kernel_height: 2, kernel_width: 2 };
        let layers = vec![
            LayerSpec::convolution(geom, 2, Activation::Relu, true).frozen(),
            LayerSpec::fully_connected(8, 1, Activation::Identity, true),
        ];
        let model = ModelSnapshot::init_normal(layers, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        model.save(&p).unwrap();
        assert_eq!(ModelSnapshot::load(&p).unwrap(), model);
    }

    #[test]
    fn layer_chain_is_validated() {
        let layers = vec![
            LayerSpec::fully_connected(3, 4, Activation::Relu, true),
            LayerSpec::fully_connected(5, 1, Activation::Identity, true),
        ];
        assert!(ModelSnapshot::zeros(layers, vec![]).is_err());
    }
}
