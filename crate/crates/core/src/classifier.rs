//! ReLU/softmax classifier with exact reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::mlp::{Activation, DenseStack};
use crate::ndcore::{FlatVector, LayoutMap, Matrix, Rng};
use crate::{Error, Result};

/// Labeled samples. Inputs are `n × d`, labels lie in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.input_dim() != other.input_dim() || self.num_classes != other.num_classes {
            return Err(Error::shape(format!(
                "cannot concatenate batches of width {}/{} classes and {}/{} classes",
                self.input_dim(),
                self.num_classes,
                other.input_dim(),
                other.num_classes
            )));
        }
        let mut data = self.inputs.as_slice().to_vec();
        data.extend_from_slice(other.inputs.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Batch::new(
            Matrix::from_vec(self.len() + other.len(), self.input_dim(), data)?,
            labels,
            self.num_classes,
        )
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// How previous-task gradient statistics are reduced over minibatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradStatKind {
    /// Mean of elementwise squared minibatch gradients.
    #[default]
    Squared,
    /// Mean of raw minibatch gradients.
    Raw,
}

/// Previous-task gradient statistic fed to the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub avg_sq_grad: FlatVector,
}

/// Parameters `θ` of a fully connected ReLU network with a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    stack: DenseStack,
    theta: FlatVector,
}

impl ClassifierParams {
    /// Weights `normal(0, 1/fan_in)`, biases zero.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let stack = DenseStack::new(dims, Activation::Relu)?;
        let theta = stack.init(rng, |_, fan_in| 1.0 / (fan_in as f64).sqrt())?;
        Ok(Self { stack, theta })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let stack = DenseStack::new(dims, Activation::Relu)?;
        let theta = FlatVector::zeros(stack.num_params());
        Ok(Self { stack, theta })
    }

    pub fn from_flat(dims: &[usize], theta: FlatVector) -> Result<Self> {
        let stack = DenseStack::new(dims, Activation::Relu)?;
        stack.check_params(&theta)?;
        Ok(Self { stack, theta })
    }

    /// Builds parameters from explicit `(weight (in × out), bias)` layers.
    pub fn from_layers(layers: &[(Matrix, FlatVector)]) -> Result<Self> {
        let mut dims = Vec::with_capacity(layers.len() + 1);
        for (k, (w, b)) in layers.iter().enumerate() {
            if k == 0 {
                dims.push(w.rows());
            } else if w.rows() != dims[k] {
                return Err(Error::shape(format!(
                    "layer {k} in-dim {} does not chain with previous out-dim {}",
                    w.rows(),
                    dims[k]
                )));
            }
            if b.len() != w.cols() {
                return Err(Error::shape(format!(
                    "layer {k} bias length {} does not match out-dim {}",
                    b.len(),
                    w.cols()
                )));
            }
            dims.push(w.cols());
        }
        let stack = DenseStack::new(&dims, Activation::Relu)?;
        let mut parts = Vec::with_capacity(2 * layers.len());
        let biases: Vec<Matrix> = layers
            .iter()
            .map(|(_, b)| Matrix::from_vec(1, b.len(), b.as_slice().to_vec()))
            .collect::<Result<_>>()?;
        for ((w, _), b) in layers.iter().zip(&biases) {
            parts.push(w);
            parts.push(b);
        }
        let theta = stack.layout.flatten(&parts)?;
        Ok(Self { stack, theta })
    }

    pub fn layers(&self) -> Vec<(Matrix, FlatVector)> {
        (0..self.stack.num_layers())
            .map(|k| {
                (
                    self.stack.weight(&self.theta, k),
                    FlatVector::new(self.stack.bias(&self.theta, k).to_vec()),
                )
            })
            .collect()
    }

    pub fn dims(&self) -> &[usize] {
        &self.stack.dims
    }

    pub fn layout(&self) -> &LayoutMap {
        &self.stack.layout
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn num_classes(&self) -> usize {
        *self.stack.dims.last().expect("dims")
    }

    pub fn theta(&self) -> &FlatVector {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: FlatVector) -> Result<()> {
        self.stack.check_params(&theta)?;
        self.theta = theta;
        Ok(())
    }

    pub fn with_theta(&self, theta: FlatVector) -> Result<Self> {
        let mut out = self.clone();
        out.set_theta(theta)?;
        Ok(out)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        if batch.num_classes() != self.num_classes() {
            return Err(Error::shape(format!(
                "batch has {} classes, classifier head has {}",
                batch.num_classes(),
                self.num_classes()
            )));
        }
        Ok(())
    }
}

fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().fold(0.0, |acc, &z| acc + (z - max).exp()).ln()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Class probabilities, one row per input.
pub fn forward(params: &ClassifierParams, inputs: &Matrix) -> Result<Matrix> {
    let cache = params.stack.forward(&params.theta, inputs)?;
    let logits = cache.output;
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        softmax_row(logits.row(i), probs.row_mut(i));
    }
    Ok(probs)
}

/// Mean softmax cross-entropy and its exact gradient in layout order.
pub fn loss_and_grad(params: &ClassifierParams, batch: &Batch) -> Result<(f64, FlatVector)> {
    params.check_batch(batch)?;
    let cache = params.stack.forward(&params.theta, batch.inputs())?;
    let logits = &cache.output;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &label) in batch.labels().iter().enumerate() {
        let row = logits.row(i);
        loss += log_sum_exp(row) - row[label];
        let d = d_logits.row_mut(i);
        softmax_row(row, d);
        d[label] -= 1.0;
        for v in d.iter_mut() {
            *v /= n;
        }
    }
    let grad = params.stack.backward(&params.theta, &cache, &d_logits)?;
    Ok((loss / n, grad))
}

/// Mean cross-entropy only.
pub fn loss(params: &ClassifierParams, batch: &Batch) -> Result<f64> {
    params.check_batch(batch)?;
    let cache = params.stack.forward(&params.theta, batch.inputs())?;
    let mut total = 0.0;
    for (i, &label) in batch.labels().iter().enumerate() {
        let row = cache.output.row(i);
        total += log_sum_exp(row) - row[label];
    }
    Ok(total / batch.len() as f64)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(params: &ClassifierParams, batch: &Batch) -> Result<f64> {
    params.check_batch(batch)?;
    let cache = params.stack.forward(&params.theta, batch.inputs())?;
    let correct = batch
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(cache.output.row(i)) == label)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Splits `0..n` into shuffled minibatches, each sorted ascending.
pub(crate) fn minibatch_indices(n: usize, minibatch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(minibatch.max(1))
        .map(|chunk| {
            let mut c = chunk.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// Mean over minibatches of the elementwise squared minibatch gradient.
pub fn avg_squared_gradient(
    params: &ClassifierParams,
    task_data: &Batch,
    minibatch: usize,
    rng: &mut Rng,
) -> Result<GradStats> {
    gradient_statistic(params, task_data, minibatch, rng, GradStatKind::Squared)
}

pub fn gradient_statistic(
    params: &ClassifierParams,
    task_data: &Batch,
    minibatch: usize,
    rng: &mut Rng,
    kind: GradStatKind,
) -> Result<GradStats> {
    if minibatch == 0 {
        return Err(Error::arg("minibatch must be at least 1"));
    }
    if task_data.is_empty() {
        return Err(Error::arg("empty task data"));
    }
    let batches = minibatch_indices(task_data.len(), minibatch, rng);
    let mut acc = vec![0.0; params.num_params()];
    for idx in &batches {
        let (_, g) = loss_and_grad(params, &task_data.select(idx))?;
        for (a, &gi) in acc.iter_mut().zip(g.iter()) {
            *a += match kind {
                GradStatKind::Squared => gi * gi,
                GradStatKind::Raw => gi,
            };
        }
    }
    let count = batches.len() as f64;
    Ok(GradStats {
        avg_sq_grad: acc.into_iter().map(|a| a / count).collect(),
    })
}
