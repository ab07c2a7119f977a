//! Fully connected rectifier network with a softmax cross-entropy head.
//!
//! All weights and biases live in one flat [`ParamVector`]. Layer `l` stores
//! its weight matrix `[n_out x n_in]` row-major followed by its `n_out` biases,
//! and layers are laid out in order. Aggregation, noise and masking therefore
//! only ever see a plain `&[f64]`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, NumericContext, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config("model.layers", "need at least an input and an output layer"));
        }
        if let Some(i) = layer_sizes.iter().position(|&n| n == 0) {
            return Err(Error::config(format!("model.layers[{i}]"), "layer size must be >= 1"));
        }
        Ok(ModelSpec { layer_sizes })
    }

    /// The 784-64-10 network used throughout the experiments.
    pub fn mnist_default() -> Self {
        ModelSpec { layer_sizes: vec![784, 64, 10] }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn dimension(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let layer = Layer { n_in: w[0], n_out: w[1], offset };
                offset += (w[0] + 1) * w[1];
                layer
            })
            .collect()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.dimension()];
        for layer in self.layers() {
            let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut values[layer.weights()] {
                *w = dist.sample(rng);
            }
        }
        ParamVector(values)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    n_in: usize,
    n_out: usize,
    offset: usize,
}

impl Layer {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_in * self.n_out
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.n_in * self.n_out;
        start..start + self.n_out
    }
}

/// Flat model parameters. Always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                NumericContext::default(),
                format!("parameter {i} is not finite ({})", values[i]),
            ));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Mutable access for perturbations; callers must keep values finite.
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Gradient(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Row-major `[b x input_dim]` inputs with one label per row.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    inputs: &'a [f64],
    labels: &'a [u8],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [f64], labels: &'a [u8], input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("batch", "batch must contain at least one example"));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::config(
                "batch",
                format!(
                    "{} input values do not form {} rows of width {input_dim}",
                    inputs.len(),
                    labels.len()
                ),
            ));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &'a [f64] {
        self.inputs
    }

    pub fn labels(&self) -> &'a [u8] {
        self.labels
    }
}

/// `c = a * b + beta * c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches; c is
    // row-major and dense with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_dims(params: &ParamVector, spec: &ModelSpec, batch: &Batch<'_>) -> Result<()> {
    if params.len() != spec.dimension() {
        return Err(Error::config(
            "params",
            format!("length {} does not match model dimension {}", params.len(), spec.dimension()),
        ));
    }
    if batch.inputs.len() != batch.len() * spec.input_dim() {
        return Err(Error::config("batch", "input width does not match model input dimension"));
    }
    let classes = spec.num_classes();
    if let Some(&l) = batch.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::config("batch", format!("label {l} outside [0, {classes})")));
    }
    Ok(())
}

/// Hidden activations after each layer, with softmax probabilities last.
struct ForwardPass {
    activations: Vec<Vec<f64>>,
    /// Rows whose loss sits on the clamp; their gradient is exactly zero.
    clamped: Vec<bool>,
    loss: f64,
}

fn forward_pass(params: &ParamVector, spec: &ModelSpec, batch: &Batch<'_>) -> Result<ForwardPass> {
    check_dims(params, spec, batch)?;
    let b = batch.len();
    let p = params.as_slice();
    let layers = spec.layers();
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers.len());

    for (li, layer) in layers.iter().enumerate() {
        let input: &[f64] = if li == 0 { batch.inputs } else { &activations[li - 1] };
        let mut z = vec![0.0; b * layer.n_out];
        for row in z.chunks_exact_mut(layer.n_out) {
            row.copy_from_slice(&p[layer.biases()]);
        }
        gemm(
            b,
            layer.n_in,
            layer.n_out,
            input,
            (layer.n_in, 1),
            &p[layer.weights()],
            (1, layer.n_in),
            1.0,
            &mut z,
        );
        if li + 1 < layers.len() {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        activations.push(z);
    }

    let classes = spec.num_classes();
    let max_loss = -PROB_FLOOR.ln();
    let logits = activations.last_mut().unwrap();
    let mut total = 0.0;
    let mut clamped = Vec::with_capacity(b);
    for (row, &label) in logits.chunks_exact_mut(classes).zip(batch.labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let correct = row[label as usize];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        // log-sum-exp form of -log p(label), clamped at -log(PROB_FLOOR)
        let raw = max + sum.ln() - correct;
        clamped.push(raw >= max_loss);
        total += raw.min(max_loss);
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::numeric(NumericContext::default(), format!("non-finite loss {loss}")));
    }
    Ok(ForwardPass { activations, clamped, loss })
}

/// Mean cross-entropy loss and the `[b x classes]` probability matrix.
pub fn forward_loss(params: &ParamVector, spec: &ModelSpec, batch: &Batch<'_>) -> Result<(f64, Vec<f64>)> {
    let mut pass = forward_pass(params, spec, batch)?;
    let probs = pass.activations.pop().unwrap();
    Ok((pass.loss, probs))
}

/// Exact gradient of the mean loss, plus the loss itself.
pub fn loss_and_gradient(params: &ParamVector, spec: &ModelSpec, batch: &Batch<'_>) -> Result<(f64, Gradient)> {
    let pass = forward_pass(params, spec, batch)?;
    let b = batch.len();
    let p = params.as_slice();
    let layers = spec.layers();
    let mut grad = vec![0.0; p.len()];

    // dL/dz for the output layer: (softmax - onehot) / b
    let classes = spec.num_classes();
    let mut delta = pass.activations.last().unwrap().clone();
    let inv_b = 1.0 / b as f64;
    for ((row, &label), &flat) in delta.chunks_exact_mut(classes).zip(batch.labels).zip(&pass.clamped) {
        if flat {
            row.fill(0.0);
            continue;
        }
        row[label as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_b;
        }
    }

    for li in (0..layers.len()).rev() {
        let layer = layers[li];
        let input: &[f64] = if li == 0 { batch.inputs } else { &pass.activations[li - 1] };

        gemm(
            layer.n_out,
            b,
            layer.n_in,
            &delta,
            (1, layer.n_out),
            input,
            (layer.n_in, 1),
            0.0,
            &mut grad[layer.weights()],
        );
        let gb = &mut grad[layer.biases()];
        for row in delta.chunks_exact(layer.n_out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }

        if li > 0 {
            let mut upstream = vec![0.0; b * layer.n_in];
            gemm(
                b,
                layer.n_out,
                layer.n_in,
                &delta,
                (layer.n_out, 1),
                &p[layer.weights()],
                (layer.n_in, 1),
                0.0,
                &mut upstream,
            );
            for (u, &a) in upstream.iter_mut().zip(input) {
                if a <= 0.0 {
                    *u = 0.0;
                }
            }
            delta = upstream;
        }
    }

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric(NumericContext::default(), "non-finite gradient"));
    }
    Ok((pass.loss, Gradient(grad)))
}

pub fn backward(params: &ParamVector, spec: &ModelSpec, batch: &Batch<'_>) -> Result<Gradient> {
    loss_and_gradient(params, spec, batch).map(|(_, g)| g)
}

pub fn sgd_step(params: &ParamVector, grad: &Gradient, lr: f64) -> Result<ParamVector> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grad, lr)?;
    Ok(out)
}

pub(crate) fn sgd_step_in_place(params: &mut ParamVector, grad: &Gradient, lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::config(
            "gradient",
            format!("length {} does not match parameters {}", grad.len(), params.len()),
        ));
    }
    for (w, g) in params.0.iter_mut().zip(&grad.0) {
        *w -= lr * g;
    }
    if params.0.iter().any(|w| !w.is_finite()) {
        return Err(Error::numeric(NumericContext::default(), "parameters diverged after SGD step"));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rows evaluated per forward call.
const EVAL_CHUNK: usize = 1000;

/// Accuracy and mean loss over `batch`, evaluated in chunks.
pub fn evaluate_batch(params: &ParamVector, spec: &ModelSpec, batch: &Batch<'_>) -> Result<(f64, f64)> {
    let dim = spec.input_dim();
    let classes = spec.num_classes();
    let n = batch.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = Batch::new(&batch.inputs[start * dim..end * dim], &batch.labels[start..end], dim)?;
        let (loss, probs) = forward_loss(params, spec, &chunk)?;
        loss_sum += loss * (end - start) as f64;
        correct += probs
            .chunks_exact(classes)
            .zip(chunk.labels)
            .filter(|(row, &label)| argmax(row) == label as usize)
            .count();
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}
