//! Minimal MLP: ReLU hidden layers, linear output, softmax cross-entropy,
//! plain minibatch SGD with a cosine-annealed learning rate.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::linalg::DenseMatrix;
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("model without layers".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::Dimension(format!(
                    "layer {k}: bias length {} for {} outputs",
                    layer.bias.len(),
                    layer.output_dim()
                )));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::ContractViolation(format!("layer {k}: non-finite bias")));
            }
            if k > 0 && layer.input_dim() != layers[k - 1].output_dim() {
                return Err(Error::Dimension(format!(
                    "layer {k} expects {} inputs but layer {} emits {}",
                    layer.input_dim(),
                    k - 1,
                    layers[k - 1].output_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` init for widths
    /// `[input, hidden.., classes]`.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Dimension(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Ok(Layer {
                    weight: DenseMatrix::new(fan_out, fan_in, data)?,
                    bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Dimension(format!("invalid layer widths {widths:?}")));
        }
        Self::new(
            widths
                .windows(2)
                .map(|w| Layer {
                    weight: DenseMatrix::zeros(w[1], w[0]),
                    bias: vec![0.0; w[1]],
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn final_layer(&self) -> &Layer {
        self.layers.last().expect("model has layers")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.final_layer().output_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.widths() == other.widths()
    }

    /// `self - before`, layer by layer.
    pub fn delta_from(&self, before: &Self) -> Result<LayerUpdate> {
        if !self.same_shape(before) {
            return Err(Error::Dimension(format!(
                "models with widths {:?} and {:?}",
                self.widths(),
                before.widths()
            )));
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for (a, b) in self.layers.iter().zip(&before.layers) {
            weights.push(a.weight.sub(&b.weight)?);
            biases.push(a.bias.iter().zip(&b.bias).map(|(x, y)| x - y).collect());
        }
        Ok(LayerUpdate { weights, biases })
    }
}

/// Per-layer parameter deltas (`after - before`) or gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUpdate {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl LayerUpdate {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| DenseMatrix::zeros(l.output_dim(), l.input_dim()))
                .collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.output_dim()]).collect(),
        }
    }

    /// Final-layer weight delta, `classes x hidden`.
    pub fn final_layer(&self) -> &DenseMatrix {
        self.weights.last().expect("update has layers")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// All weights and biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w.scaled(factor)).collect(),
            biases: self
                .biases
                .iter()
                .map(|b| b.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub total_rounds: usize,
    pub seed: u64,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::invalid("train.local_epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be positive"));
        }
        if self.total_rounds == 0 {
            return Err(Error::invalid("rounds", "must be positive"));
        }
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::invalid("train.lr_initial", "must be finite and non-negative"));
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_initial) {
            return Err(Error::invalid(
                "train.lr_final",
                format!("must lie in [0, lr_initial = {}]", self.lr_initial),
            ));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate for round `t` in `1..=T`.
pub fn lr_schedule(spec: &TrainSpec, round: usize) -> Result<f64> {
    let total = spec.total_rounds;
    if round == 0 || round > total {
        return Err(Error::ContractViolation(format!(
            "round {round} outside 1..={total}"
        )));
    }
    if total == 1 {
        return Ok(spec.lr_initial);
    }
    let phase = std::f64::consts::PI * (round - 1) as f64 / (total - 1) as f64;
    Ok(spec.lr_final + 0.5 * (spec.lr_initial - spec.lr_final) * (1.0 + phase.cos()))
}

/// Reusable activation buffers for one forward/backward pass.
struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Workspace {
    fn new(params: &ModelParams) -> Self {
        Self {
            acts: params.widths().iter().map(|&w| vec![0.0; w]).collect(),
            delta: Vec::new(),
            next_delta: Vec::new(),
        }
    }

    fn forward(&mut self, params: &ModelParams, x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        let last = params.layers.len() - 1;
        for (k, layer) in params.layers.iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(k + 1);
            let input = &before[k];
            let out = &mut after[0];
            for (o, (row, b)) in out
                .iter_mut()
                .zip((0..layer.output_dim()).map(|r| layer.weight.row(r)).zip(&layer.bias))
            {
                let z = crate::linalg::dot(row, input) + b;
                *o = if k < last { z.max(0.0) } else { z };
            }
        }
    }

    /// Accumulates the gradient of the cross-entropy of the current forward
    /// pass into `grad`; returns the sample loss.
    fn backward(&mut self, params: &ModelParams, label: usize, grad: &mut LayerUpdate) -> f64 {
        let logits = self.acts.last().expect("output layer");
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sum_exp: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let loss = log_z - logits[label];

        self.delta.clear();
        self.delta.extend(logits.iter().map(|v| (v - log_z).exp()));
        self.delta[label] -= 1.0;

        for k in (0..params.layers.len()).rev() {
            let input = &self.acts[k];
            let gw = &mut grad.weights[k];
            for (r, d) in self.delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (g, a) in gw.row_mut(r).iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            for (g, d) in grad.biases[k].iter_mut().zip(&self.delta) {
                *g += d;
            }
            if k > 0 {
                let w = &params.layers[k].weight;
                self.next_delta.clear();
                self.next_delta.resize(w.cols(), 0.0);
                for (r, d) in self.delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for (nd, wv) in self.next_delta.iter_mut().zip(w.row(r)) {
                        *nd += d * wv;
                    }
                }
                for (nd, a) in self.next_delta.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *nd = 0.0;
                    }
                }
                std::mem::swap(&mut self.delta, &mut self.next_delta);
            }
        }
        loss
    }
}

fn check_input(params: &ModelParams, dim: usize) -> Result<()> {
    if dim != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input of length {dim} for a model expecting {}",
            params.input_dim()
        )));
    }
    Ok(())
}

/// Class scores (logits) for one sample.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_input(params, x.len())?;
    let mut ws = Workspace::new(params);
    ws.forward(params, x);
    Ok(ws.acts.pop().expect("output layer"))
}

/// Mean cross-entropy over `batch` and its gradient.
pub fn loss_and_gradient(
    params: &ModelParams,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, LayerUpdate)> {
    check_input(params, data.dim())?;
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    if data.classes() > params.num_classes() {
        return Err(Error::Dimension(format!(
            "{} classes for a model with {} outputs",
            data.classes(),
            params.num_classes()
        )));
    }
    let mut ws = Workspace::new(params);
    let mut grad = LayerUpdate::zeros_like(params);
    let loss = accumulate(params, data, batch, &mut ws, &mut grad);
    let inv = 1.0 / batch.len() as f64;
    Ok((loss * inv, grad.scaled(inv)))
}

fn accumulate(
    params: &ModelParams,
    data: &Dataset,
    batch: &[usize],
    ws: &mut Workspace,
    grad: &mut LayerUpdate,
) -> f64 {
    let mut loss = 0.0;
    for &i in batch {
        ws.forward(params, data.sample(i));
        loss += ws.backward(params, data.label(i), grad);
    }
    loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// `params - broadcast`
    pub update: LayerUpdate,
    /// Mean per-sample loss during the last epoch.
    pub mean_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// `local_epochs` of minibatch SGD at a fixed learning rate. Batch order is
/// reshuffled every epoch from `rng`.
pub fn train_with_lr(
    params: &ModelParams,
    shard: &Dataset,
    spec: &TrainSpec,
    lr: f64,
    rng: &mut StreamRng,
) -> Result<LocalOutcome> {
    spec.validate()?;
    check_input(params, shard.dim())?;
    if shard.is_empty() {
        return Err(Error::InsufficientData("empty shard".into()));
    }
    if shard.classes() > params.num_classes() {
        return Err(Error::Dimension(format!(
            "{} classes for a model with {} outputs",
            shard.classes(),
            params.num_classes()
        )));
    }
    let mut model = params.clone();
    let mut ws = Workspace::new(params);
    let mut grad = LayerUpdate::zeros_like(params);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut epoch_losses = Vec::with_capacity(spec.local_epochs);
    for _ in 0..spec.local_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(spec.batch_size) {
            for (w, b) in grad.weights.iter_mut().zip(grad.biases.iter_mut()) {
                w.as_mut_slice().fill(0.0);
                b.fill(0.0);
            }
            total += accumulate(&model, shard, batch, &mut ws, &mut grad);
            let step = lr / batch.len() as f64;
            for (layer, (gw, gb)) in model
                .layers
                .iter_mut()
                .zip(grad.weights.iter().zip(&grad.biases))
            {
                for (w, g) in layer.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                    *w -= step * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(gb) {
                    *b -= step * g;
                }
            }
        }
        epoch_losses.push(total / shard.len() as f64);
    }
    if model
        .layers
        .iter()
        .any(|l| l.weight.as_slice().iter().chain(&l.bias).any(|v| !v.is_finite()))
    {
        return Err(Error::ContractViolation("training diverged to non-finite weights".into()));
    }
    let update = model.delta_from(params)?;
    Ok(LocalOutcome {
        params: model,
        update,
        mean_loss: *epoch_losses.last().expect("at least one epoch"),
        epoch_losses,
    })
}

/// One round of local training at the scheduled learning rate.
pub fn train_local(
    params: &ModelParams,
    shard: &Dataset,
    spec: &TrainSpec,
    round: usize,
    rng: &mut StreamRng,
) -> Result<LocalOutcome> {
    let lr = lr_schedule(spec, round)?;
    train_with_lr(params, shard, spec, lr, rng)
}

/// Index of the largest score, ties to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in scores.iter().enumerate() {
        if *v > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<f64> {
    check_input(params, test.dim())?;
    if test.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    let mut ws = Workspace::new(params);
    let correct = (0..test.len())
        .filter(|&i| {
            ws.forward(params, test.sample(i));
            argmax(ws.acts.last().expect("output layer")) == test.label(i)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
