//! Feed-forward classifier whose last hidden layer is the embedding.
//!
//! Layer widths run `input → hidden_dims… → embedding_dim → num_classes`.
//! Every layer but the last applies the activation, so the embedding is the
//! activated output of the last hidden layer and the logits are a linear map
//! of it.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assoc::{EmbeddingBatch, LabelVector};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dims: vec![64, 64],
            embedding_dim: 64,
            num_classes: 2,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.embedding_dim == 0
            || self.num_classes == 0
            || self.hidden_dims.contains(&0)
        {
            return Err(Error::invalid(format!(
                "all layer widths must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Widths of every layer boundary, input first, logits last.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 3);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.embedding_dim);
        w.push(self.num_classes);
        w
    }
}

/// Affine map `x W + b` with `W` stored as `(fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Network parameters. Gradients use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

pub fn init_params(spec: &MlpSpec) -> Result<MlpParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let widths = spec.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            let weights = Matrix::from_fn(fan_in, fan_out, |_, _| normal.sample(&mut rng));
            Layer {
                weights,
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpParams {
        spec: spec.clone(),
        layers,
    })
}

impl MlpParams {
    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// Weights then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`MlpParams::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n_w = l.weights.data().len();
            l.weights
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n_w]);
            offset += n_w;
            let n_b = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + n_b]);
            offset += n_b;
        }
        Ok(())
    }

    fn for_each_pair(&mut self, other: &MlpParams, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                f(x, y);
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                f(x, y);
            }
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &MlpParams, s: f64) {
        self.for_each_pair(other, |x, y| *x += s * y);
    }

    pub fn max_abs_diff(&self, other: &MlpParams) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Matrix,
    /// Pre-activation of every layer, logits last.
    pub pre_activations: Vec<Matrix>,
    /// Activated output of every hidden layer, embedding last.
    pub activations: Vec<Matrix>,
    pub embeddings: EmbeddingBatch,
    pub logits: Matrix,
}

fn affine(x: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut z = linalg::matmul(x, &layer.weights)?;
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

pub fn forward(params: &MlpParams, inputs: &Matrix) -> Result<ForwardTrace> {
    if inputs.cols() != params.spec.input_dim {
        return Err(Error::Shape {
            op: "forward",
            left: inputs.shape(),
            right: params.layers[0].weights.shape(),
        });
    }
    let act = params.spec.activation;
    let (hidden, last) = params.layers.split_at(params.layers.len() - 1);
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut activations = Vec::with_capacity(hidden.len());
    let mut x = inputs.clone();
    for layer in hidden {
        let z = affine(&x, layer)?;
        let mut a = z.clone();
        a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        pre_activations.push(z);
        activations.push(a.clone());
        x = a;
    }
    let logits = affine(&x, &last[0])?;
    pre_activations.push(logits.clone());
    Ok(ForwardTrace {
        inputs: inputs.clone(),
        pre_activations,
        activations,
        embeddings: EmbeddingBatch::new(x)?,
        logits,
    })
}

/// Mean softmax cross-entropy of `logits` against `labels`, and its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &LabelVector) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.rows()
        )));
    }
    if labels.num_classes() > logits.cols() {
        return Err(Error::invalid(format!(
            "labels span {} classes, network predicts {}",
            labels.num_classes(),
            logits.cols()
        )));
    }
    let n = logits.rows() as f64;
    let mut grad = linalg::row_softmax(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.labels().iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[(i, y)] -= 1.0;
    }
    grad.data_mut().iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Backpropagates gradients arriving at the logits and/or the embeddings.
fn backward(
    trace: &ForwardTrace,
    params: &MlpParams,
    grad_logits: Option<&Matrix>,
    grad_embeddings: Option<&Matrix>,
) -> Result<MlpParams> {
    let act = params.spec.activation;
    let n_layers = params.layers.len();
    let mut grads = params.zeros_like();

    let emb = trace.embeddings.matrix();
    let mut grad_act = match grad_embeddings {
        Some(g) => {
            if g.shape() != emb.shape() {
                return Err(Error::Shape {
                    op: "backprop_external",
                    left: g.shape(),
                    right: emb.shape(),
                });
            }
            g.clone()
        }
        None => Matrix::zeros(emb.rows(), emb.cols()),
    };

    if let Some(gl) = grad_logits {
        let last = &params.layers[n_layers - 1];
        let g = &mut grads.layers[n_layers - 1];
        g.weights = linalg::matmul_transpose_a(emb, gl)?;
        for i in 0..gl.rows() {
            for (b, v) in g.bias.iter_mut().zip(gl.row(i)) {
                *b += v;
            }
        }
        grad_act.add_scaled(&linalg::matmul_transpose_b(gl, &last.weights)?, 1.0)?;
    }

    for l in (0..n_layers - 1).rev() {
        let z = &trace.pre_activations[l];
        let a = &trace.activations[l];
        let mut dz = grad_act;
        for ((d, &zv), &av) in dz.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
            *d *= act.derivative(zv, av);
        }
        let prev = if l == 0 {
            &trace.inputs
        } else {
            &trace.activations[l - 1]
        };
        let g = &mut grads.layers[l];
        g.weights = linalg::matmul_transpose_a(prev, &dz)?;
        for i in 0..dz.rows() {
            for (b, v) in g.bias.iter_mut().zip(dz.row(i)) {
                *b += v;
            }
        }
        if l == 0 {
            break;
        }
        grad_act = linalg::matmul_transpose_b(&dz, &params.layers[l].weights)?;
    }
    Ok(grads)
}

/// Mean softmax cross-entropy over the batch and its parameter gradients.
pub fn classification_loss_and_grads(
    trace: &ForwardTrace,
    params: &MlpParams,
    labels: &LabelVector,
) -> Result<(f64, MlpParams)> {
    let (loss, grad_logits) = softmax_cross_entropy(&trace.logits, labels)?;
    let grads = backward(trace, params, Some(&grad_logits), None)?;
    Ok((loss, grads))
}

/// Parameter gradients induced by an external loss gradient on the
/// embeddings.
pub fn backprop_external(
    trace: &ForwardTrace,
    params: &MlpParams,
    grad_embeddings: &Matrix,
) -> Result<MlpParams> {
    backward(trace, params, None, Some(grad_embeddings))
}

pub fn predict(params: &MlpParams, inputs: &Matrix) -> Result<Vec<usize>> {
    let trace = forward(params, inputs)?;
    Ok((0..trace.logits.rows())
        .map(|i| {
            let row = trace.logits.row(i);
            // First maximum wins ties.
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

/// Percentage of misclassified samples.
pub fn error_pct(params: &MlpParams, inputs: &Matrix, labels: &LabelVector) -> Result<f64> {
    if labels.len() != inputs.rows() {
        return Err(Error::invalid("label count differs from sample count"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let pred = predict(params, inputs)?;
    let wrong = pred
        .iter()
        .zip(labels.labels())
        .filter(|(p, y)| p != y)
        .count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Adaptive-moment optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of a flat parameter vector.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Applies one optimizer update to `params` in place.
pub fn optimizer_step(
    params: &mut MlpParams,
    grads: &MlpParams,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut flat = params.to_flat();
    state.step_slice(&mut flat, &grads.to_flat(), lr)?;
    params.set_flat(&flat)
}

const CHECKPOINT_MAGIC: &str = "assocda-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Text checkpoint: a magic/version line, the spec as `key = value` lines,
/// `params = N`, then the N flat parameters one per line in shortest
/// round-trip decimal form.
pub fn checkpoint_to_string(params: &MlpParams) -> String {
    let s = &params.spec;
    let hidden: Vec<String> = s.hidden_dims.iter().map(|d| d.to_string()).collect();
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(out, "input_dim = {}", s.input_dim);
    let _ = writeln!(out, "hidden_dims = {}", hidden.join(","));
    let _ = writeln!(out, "embedding_dim = {}", s.embedding_dim);
    let _ = writeln!(out, "num_classes = {}", s.num_classes);
    let _ = writeln!(out, "activation = {}", s.activation.as_str());
    let _ = writeln!(out, "seed = {}", s.seed);
    let flat = params.to_flat();
    let _ = writeln!(out, "params = {}", flat.len());
    for v in flat {
        let _ = writeln!(out, "{v:?}");
    }
    out
}

pub fn checkpoint_from_str(text: &str) -> Result<MlpParams> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let expected = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    if header.trim() != expected {
        return Err(bad(format!("unrecognized header {header:?}")));
    }
    let mut field = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing field {name}")))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        if k.trim() != name {
            return Err(bad(format!("expected {name}, found {:?}", k.trim())));
        }
        Ok(v.trim().to_string())
    };
    let num = |name: &str, v: String| -> Result<usize> {
        v.parse()
            .map_err(|_| bad(format!("{name}: not a count: {v:?}")))
    };
    let input_dim = num("input_dim", field("input_dim")?)?;
    let hidden_raw = field("hidden_dims")?;
    let embedding_dim = num("embedding_dim", field("embedding_dim")?)?;
    let num_classes = num("num_classes", field("num_classes")?)?;
    let activation = field("activation")?.parse()?;
    let seed_raw = field("seed")?;
    let count = num("params", field("params")?)?;
    let hidden_dims = if hidden_raw.is_empty() {
        Vec::new()
    } else {
        hidden_raw
            .split(',')
            .map(|d| num("hidden_dims", d.trim().to_string()))
            .collect::<Result<_>>()?
    };
    let seed = seed_raw
        .parse()
        .map_err(|_| bad(format!("seed: {seed_raw:?}")))?;
    let spec = MlpSpec {
        input_dim,
        hidden_dims,
        embedding_dim,
        num_classes,
        activation,
        seed,
    };
    let mut params = init_params(&spec)?;
    if params.num_params() != count {
        return Err(bad(format!(
            "spec implies {} parameters, file declares {count}",
            params.num_params()
        )));
    }
    let flat: Vec<f64> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("bad parameter value {l:?}")))
        })
        .collect::<Result<_>>()?;
    if flat.len() != count {
        return Err(bad(format!(
            "expected {count} parameters, found {}",
            flat.len()
        )));
    }
    params.set_flat(&flat)?;
    Ok(params)
}

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(hidden: Vec<usize>, act: Activation) -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            hidden_dims: hidden,
            embedding_dim: 4,
            num_classes: 3,
            activation: act,
            seed: 11,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(vec![5], Activation::Relu);
        let a = init_params(&s).unwrap();
        let b = init_params(&s).unwrap();
        assert_eq!(a, b);
        let c = init_params(&MlpSpec { seed: 12, ..s }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_hidden_layers_means_embedding_is_the_only_hidden_layer() {
        let p = init_params(&spec(vec![], Activation::Relu)).unwrap();
        assert_eq!(p.layers.len(), 2);
        assert_eq!(p.layers[0].weights.shape(), (3, 4));
        assert_eq!(p.layers[1].weights.shape(), (4, 3));
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = init_params(&spec(vec![5], Activation::Tanh)).unwrap();
        let z = p.zeros_like();
        let x = Matrix::from_fn(4, 3, |i, j| (i as f64) - 2.0 * j as f64);
        let t = forward(&z, &x).unwrap();
        assert!(t.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.logits.shape(), (4, 3));
    }

    #[test]
    fn identity_layers_pass_inputs_through() {
        let s = MlpSpec {
            input_dim: 2,
            hidden_dims: vec![],
            embedding_dim: 2,
            num_classes: 2,
            activation: Activation::Relu,
            seed: 0,
        };
        let mut p = init_params(&s).unwrap();
        for l in &mut p.layers {
            l.weights = Matrix::identity(2);
        }
        let x = Matrix::from_rows(&[[0.5, 2.0], [3.0, 0.0]]).unwrap();
        let t = forward(&p, &x).unwrap();
        assert_eq!(t.logits, x);
        assert_eq!(t.embeddings.matrix(), &x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_params(&spec(vec![], Activation::Relu)).unwrap();
        assert!(forward(&p, &Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn classification_loss_limits() {
        let uniform = Matrix::zeros(4, 3);
        let labels = LabelVector::new(vec![0, 1, 2, 1], 3).unwrap();
        let (loss, _) = softmax_cross_entropy(&uniform, &labels).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);

        let saturated = Matrix::from_fn(
            4,
            3,
            |i, j| {
                if j == labels.labels()[i] {
                    40.0
                } else {
                    -40.0
                }
            },
        );
        let (loss, _) = softmax_cross_entropy(&saturated, &labels).unwrap();
        assert!(loss < 1e-6);

        let wide = LabelVector::new(vec![0, 4, 0, 0], 5).unwrap();
        assert!(softmax_cross_entropy(&uniform, &wide).is_err());
    }

    #[test]
    fn zero_embedding_gradient_gives_zero_parameter_gradient() {
        let p = init_params(&spec(vec![5], Activation::Tanh)).unwrap();
        let x = Matrix::from_fn(3, 3, |i, j| 0.1 * (i + j) as f64);
        let t = forward(&p, &x).unwrap();
        let g = backprop_external(&t, &p, &Matrix::zeros(3, 4)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(backprop_external(&t, &p, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn adam_leaves_params_alone_on_zero_gradient() {
        let mut p = init_params(&spec(vec![5], Activation::Relu)).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(p.num_params());
        let zero = p.zeros_like();
        optimizer_step(&mut p, &zero, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert!(optimizer_step(&mut p, &zero, &mut st, 0.0).is_err());
    }

    #[test]
    fn adam_descends_on_a_parabola() {
        let mut w = [1.0];
        let mut st = AdamState::new(1);
        let g = [2.0 * w[0]];
        st.step_slice(&mut w, &g, 0.1).unwrap();
        assert!(w[0].abs() < 1.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut p = init_params(&spec(vec![5, 2], Activation::Tanh)).unwrap();
        p.layers[0].bias[1] = 1.0 / 3.0;
        p.layers[2].bias[0] = -f64::MIN_POSITIVE;
        let text = checkpoint_to_string(&p);
        let q = checkpoint_from_str(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(checkpoint_to_string(&q), text);

        let p0 = init_params(&spec(vec![], Activation::Relu)).unwrap();
        assert_eq!(checkpoint_from_str(&checkpoint_to_string(&p0)).unwrap(), p0);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(checkpoint_from_str("nope").is_err());
        let p = init_params(&spec(vec![5], Activation::Relu)).unwrap();
        let text = checkpoint_to_string(&p);
        let truncated: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            checkpoint_from_str(&truncated),
            Err(Error::Checkpoint(_))
        ));
    }
}
