//! Small classifiers with exact gradients over a flat parameter vector.
//!
//! Two architectures are supported:
//!
//! * `mlp2`: `in -> hidden (ReLU) -> classes`
//! * `cnn2`: `conv3x3(c1) -> ReLU -> maxpool2 -> conv3x3(c2) -> ReLU -> maxpool2 -> fc`
//!
//! Parameters live in one [`ParamVector`] whose [`LayerLayout`] names each
//! weight and bias block, so masks and attacks can reason per layer.

mod cnn;
mod layout;
mod mlp;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::ParamVector;

pub use layout::{LayerLayout, Segment, SegmentKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Mlp2 { hidden: usize },
    Cnn2 { conv1: usize, conv2: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl InputShape {
    pub fn flat(features: usize) -> Self {
        Self {
            channels: 1,
            rows: 1,
            cols: features,
        }
    }

    pub fn image(rows: usize, cols: usize) -> Self {
        Self {
            channels: 1,
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input: InputShape,
    pub classes: usize,
}

impl ModelSpec {
    pub fn mlp2(inputs: usize, hidden: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp2 { hidden },
            input: InputShape::flat(inputs),
            classes,
        }
    }

    pub fn cnn2(rows: usize, cols: usize, conv1: usize, conv2: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::Cnn2 { conv1, conv2 },
            input: InputShape::image(rows, cols),
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("class count must be at least 2"));
        }
        if self.input.is_empty() {
            return Err(Error::invalid("input shape is empty"));
        }
        match self.arch {
            Architecture::Mlp2 { hidden: 0 } => {
                Err(Error::invalid("hidden width must be at least 1"))
            }
            Architecture::Cnn2 { conv1, conv2 } if conv1 == 0 || conv2 == 0 => {
                Err(Error::invalid("channel counts must be at least 1"))
            }
            Architecture::Cnn2 { .. } if self.input.rows < 4 || self.input.cols < 4 => Err(
                Error::invalid("cnn2 needs inputs of at least 4x4 (two 2x2 poolings)"),
            ),
            _ => Ok(()),
        }
    }

    pub fn layout(&self) -> LayerLayout {
        let c = self.classes;
        match self.arch {
            Architecture::Mlp2 { hidden } => {
                let n_in = self.input.len();
                LayerLayout::from_shapes(&[
                    (
                        "fc1.weight",
                        SegmentKind::FullyConnected,
                        vec![hidden, n_in],
                    ),
                    ("fc1.bias", SegmentKind::Bias, vec![hidden]),
                    ("fc2.weight", SegmentKind::FullyConnected, vec![c, hidden]),
                    ("fc2.bias", SegmentKind::Bias, vec![c]),
                ])
            }
            Architecture::Cnn2 { conv1, conv2 } => {
                let cin = self.input.channels;
                let flat = conv2 * (self.input.rows / 4) * (self.input.cols / 4);
                LayerLayout::from_shapes(&[
                    ("conv1.weight", SegmentKind::Conv, vec![conv1, cin, 3, 3]),
                    ("conv1.bias", SegmentKind::Bias, vec![conv1]),
                    ("conv2.weight", SegmentKind::Conv, vec![conv2, conv1, 3, 3]),
                    ("conv2.bias", SegmentKind::Bias, vec![conv2]),
                    ("fc.weight", SegmentKind::FullyConnected, vec![c, flat]),
                    ("fc.bias", SegmentKind::Bias, vec![c]),
                ])
            }
        }
    }
}

/// A mini-batch in row-major order: `labels.len()` samples of
/// `input_len` features each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    pub input_len: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_len..(i + 1) * self.input_len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamVector,
}

impl Model {
    /// He-style uniform initialization: every weight is drawn from
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, biases start at zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Arc::new(spec.layout());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; layout.dim()];
        for seg in layout.weight_segments() {
            let bound = (6.0 / seg.fan_in() as f64).sqrt();
            for w in &mut data[seg.range()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        let params = ParamVector::with_layout(data, layout)?;
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let params = ParamVector::with_layout(params, Arc::new(spec.layout()))?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        self.params
            .layout()
            .expect("model parameters always carry a layout")
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// Mean softmax cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, ParamVector)> {
        loss_and_grad_at(&self.spec, &self.params, batch)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        check_batch(&self.spec, batch)?;
        Ok(forward_backward(&self.spec, &self.params, batch, None))
    }

    /// Gradient of the loss evaluated at `mask ⊙ θ`. The returned vector is
    /// the gradient with respect to the masked parameters and is not itself
    /// masked.
    pub fn grad_at_masked(&self, mask: &[bool], batch: &Batch) -> Result<ParamVector> {
        check_dim(self.dim(), mask.len())?;
        let masked: Vec<f64> = self
            .params
            .iter()
            .zip(mask)
            .map(|(&w, &keep)| if keep { w } else { 0.0 })
            .collect();
        Ok(loss_and_grad_at(&self.spec, &masked, batch)?.1)
    }

    /// `θ ← θ − lr · direction`.
    pub fn apply_update(&mut self, direction: &[f64], lr: f64) -> Result<()> {
        check_dim(self.dim(), direction.len())?;
        if lr < 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        for (w, d) in self.params.iter_mut().zip(direction) {
            *w -= lr * d;
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f64>> {
        check_dim(self.spec.input.len(), x.len())?;
        let mut out = vec![0.0; self.spec.classes];
        logits_into(&self.spec, &self.params, x, &mut out);
        Ok(out)
    }

    /// Predicted class, ties broken toward the lowest index.
    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

pub fn loss_and_grad_at(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    check_batch(spec, batch)?;
    check_dim(spec.layout().dim(), params.len())?;
    let mut grad = vec![0.0; params.len()];
    let loss = forward_backward(spec, params, batch, Some(&mut grad));
    Ok((loss, ParamVector::new(grad)))
}

fn check_batch(spec: &ModelSpec, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_dim(spec.input.len(), batch.input_len)?;
    check_dim(batch.len() * batch.input_len, batch.inputs.len())?;
    if let Some(&label) = batch.labels.iter().find(|&&y| y >= spec.classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: spec.classes,
        });
    }
    Ok(())
}

fn forward_backward(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Batch,
    grad: Option<&mut [f64]>,
) -> f64 {
    match spec.arch {
        Architecture::Mlp2 { hidden } => mlp::forward_backward(spec, hidden, params, batch, grad),
        Architecture::Cnn2 { conv1, conv2 } => {
            cnn::forward_backward(spec, (conv1, conv2), params, batch, grad)
        }
    }
}

fn logits_into(spec: &ModelSpec, params: &[f64], x: &[f32], out: &mut [f64]) {
    match spec.arch {
        Architecture::Mlp2 { hidden } => mlp::logits(spec, hidden, params, x, out),
        Architecture::Cnn2 { conv1, conv2 } => cnn::logits(spec, (conv1, conv2), params, x, out),
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy for one sample. Overwrites `logits` with
/// `softmax - onehot(label)` scaled by `scale` and returns the loss.
pub(crate) fn softmax_xent_backward(logits: &mut [f64], label: usize, scale: f64) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    let p_label = logits[label] / sum;
    for z in logits.iter_mut() {
        *z = *z / sum * scale;
    }
    logits[label] -= scale;
    -(p_label.max(f64::MIN_POSITIVE)).ln()
}
