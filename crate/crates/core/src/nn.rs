//! Feed-forward network engine.
//!
//! A model is a stack of dense layers with ReLU between them and a
//! log-softmax (or identity) head. All parameters, biases included, live in
//! one flat `f64` vector whose layout is fixed by [`ModelSpec::layout`]:
//! for each layer, the `[fan_out x fan_in]` weight matrix in row-major
//! order followed by the `fan_out` biases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    LogSoftmax,
    /// Raw pre-activations. With no hidden layers the model is affine in its
    /// weights, which makes path integrals available in closed form.
    Linear,
}

/// Architecture of a dense network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[D, hidden..., K]`.
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerLayout {
    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

impl ModelSpec {
    pub fn mlp(layers: &[usize]) -> Self {
        ModelSpec {
            layers: layers.to_vec(),
            activation: Activation::Relu,
            head: Head::LogSoftmax,
        }
    }

    /// Checks widths. Zero hidden layers (a single dense map) is accepted.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::Config(format!(
                "model needs at least input and output widths, got {:?}",
                self.layers
            )));
        }
        if self.layers.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {:?}",
                self.layers
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layers.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_weights(&self) -> usize {
        self.layers.windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layers
            .windows(2)
            .map(|p| {
                let l = LayerLayout {
                    weight_offset: offset,
                    bias_offset: offset + p[0] * p[1],
                    fan_in: p[0],
                    fan_out: p[1],
                };
                offset = l.end();
                l
            })
            .collect()
    }
}

/// Flat parameter vector of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlatWeights {
    pub values: Vec<f64>,
}

impl FlatWeights {
    pub fn zeros(spec: &ModelSpec) -> Self {
        FlatWeights {
            values: vec![0.0; spec.num_weights()],
        }
    }

    pub fn from_vec(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.num_weights() {
            return Err(Error::Config(format!(
                "weight vector has {} entries, model needs {}",
                values.len(),
                spec.num_weights()
            )));
        }
        Ok(FlatWeights { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Log-softmax (or raw, for a linear head) outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Vec<f64>,
}

impl Logits {
    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// `[K x W]` row-major derivatives of every output with respect to every weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub classes: usize,
    pub weights: usize,
    pub values: Vec<f64>,
}

impl Jacobian {
    pub fn zeros(classes: usize, weights: usize) -> Self {
        Jacobian {
            classes,
            weights,
            values: vec![0.0; classes * weights],
        }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.weights..(k + 1) * self.weights]
    }

    fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.weights..(k + 1) * self.weights]
    }

    /// `Jᵀ g`: the weight-space vector obtained by weighting each output row.
    /// Rows are accumulated in class order.
    pub fn contract(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.classes);
        let mut out = vec![0.0; self.weights];
        for (k, &gk) in g.iter().enumerate() {
            for (o, &j) in out.iter_mut().zip(self.row(k)) {
                *o += j * gk;
            }
        }
        out
    }
}

/// Training objective evaluated on the model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Negative log likelihood of the log-softmax outputs (categorical
    /// cross-entropy).
    #[default]
    Nll,
    /// `Σ_k (f_k - y_k)²` on the outputs; its output gradient moves with the
    /// model, which breaks the single kernel machine reduction.
    SquaredError,
}

fn check_one_hot(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (k, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::Input(format!("label {y:?} has several hot entries")));
            }
            hot = Some(k);
        } else if v != 0.0 {
            return Err(Error::Input(format!("label {y:?} is not one-hot")));
        }
    }
    hot.ok_or_else(|| Error::Input(format!("label {y:?} has no hot entry")))
}

impl Loss {
    pub fn value(&self, logits: &Logits, y: &[f64]) -> Result<f64> {
        check_dims(logits.values.len(), y.len(), "label")?;
        match self {
            Loss::Nll => loss_nll(logits, y),
            Loss::SquaredError => Ok(logits
                .values
                .iter()
                .zip(y)
                .map(|(f, t)| (f - t) * (f - t))
                .sum()),
        }
    }

    /// `∂L/∂f` at the given outputs.
    pub fn grad(&self, logits: &Logits, y: &[f64]) -> Result<Vec<f64>> {
        check_dims(logits.values.len(), y.len(), "label")?;
        match self {
            Loss::Nll => loss_grad_wrt_output(logits, y),
            Loss::SquaredError => Ok(logits
                .values
                .iter()
                .zip(y)
                .map(|(f, t)| 2.0 * (f - t))
                .collect()),
        }
    }
}

/// `-logits[argmax y]`.
pub fn loss_nll(logits: &Logits, y: &[f64]) -> Result<f64> {
    check_dims(logits.values.len(), y.len(), "label")?;
    let c = check_one_hot(y)?;
    Ok(-logits.values[c] + 0.0)
}

/// Gradient of the NLL loss with respect to the log-softmax outputs. It is
/// `-y` whatever the outputs are.
pub fn loss_grad_wrt_output(_logits: &Logits, y: &[f64]) -> Result<Vec<f64>> {
    check_one_hot(y)?;
    Ok(y.iter().map(|&v| if v == 1.0 { -1.0 } else { 0.0 }).collect())
}

fn check_dims(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!(
            "{what} has dimension {want}, expected {got}"
        )));
    }
    Ok(())
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// ReLU derivative; the kink at exactly zero gets derivative 0.
#[inline]
fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Activations recorded by a forward pass, reused by the backward passes.
struct Tape {
    /// `acts[l]` is the input to layer `l`; `acts[0]` is `x`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Head outputs.
    out: Vec<f64>,
    /// Softmax probabilities (log-softmax head only).
    probs: Vec<f64>,
}

fn dense(w: &[f64], l: &LayerLayout, input: &[f64]) -> Vec<f64> {
    let weights = &w[l.weight_offset..l.bias_offset];
    let bias = &w[l.bias_offset..l.end()];
    (0..l.fan_out)
        .map(|o| {
            let row = &weights[o * l.fan_in..(o + 1) * l.fan_in];
            let mut acc = bias[o];
            for (a, b) in row.iter().zip(input) {
                acc += a * b;
            }
            acc
        })
        .collect()
}

fn log_softmax(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in z {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    let out: Vec<f64> = z.iter().map(|v| v - lse).collect();
    let probs = out.iter().map(|v| v.exp()).collect();
    (out, probs)
}

fn run_forward(spec: &ModelSpec, w: &FlatWeights, x: &[f64]) -> Result<Tape> {
    spec.validate()?;
    check_dims(spec.num_weights(), w.len(), "weight vector")?;
    check_dims(spec.input_dim(), x.len(), "input")?;
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut acts = Vec::with_capacity(layout.len());
    let mut pre = Vec::with_capacity(last);
    acts.push(x.to_vec());
    let mut z = Vec::new();
    for (i, l) in layout.iter().enumerate() {
        z = dense(&w.values, l, &acts[i]);
        if i < last {
            acts.push(z.iter().map(|&v| relu(v)).collect());
            pre.push(z.clone());
        }
    }
    let (out, probs) = match spec.head {
        Head::LogSoftmax => log_softmax(&z),
        Head::Linear => (z, Vec::new()),
    };
    Ok(Tape {
        acts,
        pre,
        out,
        probs,
    })
}

/// Model outputs at `x`.
pub fn forward(spec: &ModelSpec, w: &FlatWeights, x: &[f64]) -> Result<Logits> {
    Ok(Logits {
        values: run_forward(spec, w, x)?.out,
    })
}

/// Outputs and exact Jacobian of every output with respect to every weight,
/// from one forward tape and one reverse pass per output.
pub fn forward_with_jacobian(
    spec: &ModelSpec,
    w: &FlatWeights,
    x: &[f64],
) -> Result<(Logits, Jacobian)> {
    let tape = run_forward(spec, w, x)?;
    let layout = spec.layout();
    let k_out = spec.num_classes();
    let mut jac = Jacobian::zeros(k_out, spec.num_weights());
    for k in 0..k_out {
        let mut delta: Vec<f64> = match spec.head {
            Head::LogSoftmax => tape.probs.iter().map(|p| -p).collect(),
            Head::Linear => vec![0.0; k_out],
        };
        delta[k] += 1.0;
        let row = jac.row_mut(k);
        for (i, l) in layout.iter().enumerate().rev() {
            let input = &tape.acts[i];
            for o in 0..l.fan_out {
                let d = delta[o];
                row[l.bias_offset + o] = d;
                let dst = &mut row[l.weight_offset + o * l.fan_in..l.weight_offset + (o + 1) * l.fan_in];
                for (g, a) in dst.iter_mut().zip(input) {
                    *g = d * a;
                }
            }
            if i > 0 {
                let weights = &w.values[l.weight_offset..l.bias_offset];
                let z = &tape.pre[i - 1];
                let mut prev = vec![0.0; l.fan_in];
                for o in 0..l.fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wv) in prev.iter_mut().zip(&weights[o * l.fan_in..(o + 1) * l.fan_in]) {
                        *p += wv * d;
                    }
                }
                for (p, &zv) in prev.iter_mut().zip(z) {
                    *p *= relu_grad(zv);
                }
                delta = prev;
            }
        }
    }
    Ok((Logits { values: tape.out }, jac))
}

pub fn per_sample_jacobian(spec: &ModelSpec, w: &FlatWeights, x: &[f64]) -> Result<Jacobian> {
    forward_with_jacobian(spec, w, x).map(|(_, j)| j)
}

/// Smallest |pre-activation| over the hidden units at `x`, or infinity for a
/// model without hidden layers. Used to keep finite-difference probes away
/// from ReLU kinks.
pub fn min_abs_preactivation(spec: &ModelSpec, w: &FlatWeights, x: &[f64]) -> Result<f64> {
    let tape = run_forward(spec, w, x)?;
    Ok(tape
        .pre
        .iter()
        .flatten()
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min))
}

/// Per-sample weight-space loss gradient `Jᵀ ∂L/∂f` and the loss gradient
/// rows, for one sample.
pub fn sample_loss_gradient(
    spec: &ModelSpec,
    w: &FlatWeights,
    x: &[f64],
    y: &[f64],
    loss: Loss,
) -> Result<Vec<f64>> {
    let (logits, jac) = forward_with_jacobian(spec, w, x)?;
    let g = loss.grad(&logits, y)?;
    Ok(jac.contract(&g))
}

/// Mean over samples of `Jᵢᵀ ∂L/∂f(xᵢ)`.
///
/// Per-sample contributions are computed independently (optionally in
/// parallel) and summed in index order, then divided by `M`.
pub fn batch_loss_gradient(
    spec: &ModelSpec,
    w: &FlatWeights,
    xs: &[f64],
    ys: &[f64],
    loss: Loss,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let d = spec.input_dim();
    let k = spec.num_classes();
    if xs.len() % d != 0 || ys.len() % k != 0 || xs.len() / d != ys.len() / k {
        return Err(Error::Config(format!(
            "inputs ({} values) and labels ({} values) do not describe the same number of \
             {d}-dimensional samples with {k} classes",
            xs.len(),
            ys.len()
        )));
    }
    let m = xs.len() / d;
    if m == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let parts: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            sample_loss_gradient(spec, w, &xs[i * d..(i + 1) * d], &ys[i * k..(i + 1) * k], loss)
        })
        .collect::<Result<_>>()?;
    Ok(mean_in_order(&parts, spec.num_weights()))
}

/// `(Σ_i parts[i]) / M`, summed in index order.
pub(crate) fn mean_in_order(parts: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut sum = vec![0.0; len];
    for p in parts {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
    }
    let m = parts.len() as f64;
    sum.iter_mut().for_each(|s| *s /= m);
    sum
}
