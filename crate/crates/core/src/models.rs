//! Softmax-regression and one-hidden-layer perceptron clients trained with
//! seeded mini-batch SGD on cross-entropy.
//!
//! Parameters live in a single flat [`ParamVector`]. With `hidden_dim == 0`
//! the layout is `W[C×d] ‖ b[C]`; otherwise `W1[h×d] ‖ b1[h] ‖ W2[C×h] ‖ b2[C]`,
//! all row-major.
//!
//! Predictions break argmax ties toward the lowest class index.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, ParamVector, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
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
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_dim: 0,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model.input_dim must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model.num_classes must be >= 2"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        if h == 0 {
            c * d + c
        } else {
            h * d + h + c * h + c
        }
    }

    fn check(&self, params: &ParamVector, data: &ClientDataset) -> Result<()> {
        self.validate()?;
        if params.dim() != self.num_params() {
            return Err(Error::DimensionMismatch {
                index: 0,
                expected: self.num_params(),
                found: params.dim(),
            });
        }
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                index: 0,
                expected: self.input_dim,
                found: data.dim(),
            });
        }
        if data.num_classes() > self.num_classes {
            return Err(Error::invalid(format!(
                "dataset has {} classes, model has {}",
                data.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub l2: f64,
    /// Derived per client and round at run time; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be >= 1"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid("train.l2 must be >= 0"));
        }
        Ok(())
    }
}

/// Mean cross-entropy (nats) and top-1 accuracy on one dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// `P_k`: what a client reports about its trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMetrics {
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub train_loss: f64,
}

impl PerformanceMetrics {
    pub fn new(val: Evaluation, train_loss: f64) -> Result<Self> {
        if !(val.loss.is_finite() && train_loss.is_finite()) {
            return Err(Error::NonFinite("performance metrics"));
        }
        if !(0.0..=1.0).contains(&val.accuracy) {
            return Err(Error::invalid("accuracy outside [0,1]"));
        }
        Ok(PerformanceMetrics {
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            train_loss,
        })
    }
}

/// Scaled-uniform initialization: weights in `±1/√fan_in`, biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(spec.num_params());
    let mut layer = |rows: usize, fan_in: usize, out: &mut Vec<f64>| {
        let s = 1.0 / (fan_in as f64).sqrt();
        out.extend((0..rows * fan_in).map(|_| rng.random_range(-s..s)));
        out.extend(std::iter::repeat_n(0.0, rows));
    };
    if spec.hidden_dim == 0 {
        layer(spec.num_classes, spec.input_dim, &mut out);
    } else {
        layer(spec.hidden_dim, spec.input_dim, &mut out);
        layer(spec.num_classes, spec.hidden_dim, &mut out);
    }
    ParamVector::new(out).expect("finite initialization")
}

/// Borrowed view of the parameter blocks.
struct Layers<'a> {
    spec: &'a ModelSpec,
    p: &'a [f64],
}

impl<'a> Layers<'a> {
    /// Logits for one input row; fills `hidden` with (pre, post) activations.
    fn forward(&self, x: &[f64], hidden: &mut Vec<(f64, f64)>, logits: &mut [f64]) {
        let (d, h, c) = (self.spec.input_dim, self.spec.hidden_dim, self.spec.num_classes);
        hidden.clear();
        if h == 0 {
            let (w, b) = self.p.split_at(c * d);
            for k in 0..c {
                logits[k] = b[k] + dot(&w[k * d..(k + 1) * d], x);
            }
            return;
        }
        let (w1, rest) = self.p.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        for j in 0..h {
            let z = b1[j] + dot(&w1[j * d..(j + 1) * d], x);
            hidden.push((z, self.spec.activation.apply(z)));
        }
        for k in 0..c {
            logits[k] = b2[k]
                + w2[k * h..(k + 1) * h]
                    .iter()
                    .zip(hidden.iter())
                    .map(|(w, (_, a))| w * a)
                    .sum::<f64>();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Class probabilities for every row of `data`, row-major `n×C`.
pub fn predict_proba(spec: &ModelSpec, params: &ParamVector, data: &ClientDataset) -> Result<Vec<f64>> {
    spec.check(params, data)?;
    let layers = Layers { spec, p: params };
    let c = spec.num_classes;
    let mut hidden = Vec::with_capacity(spec.hidden_dim);
    let mut logits = vec![0.0; c];
    let mut out = Vec::with_capacity(data.len() * c);
    for i in 0..data.len() {
        layers.forward(data.row(i), &mut hidden, &mut logits);
        let lse = log_sum_exp(&logits);
        out.extend(logits.iter().map(|z| (z - lse).exp()));
    }
    Ok(out)
}

/// Mean cross-entropy over `rows` plus `l2/2·‖θ‖²`, and its gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &ClientDataset,
    rows: &[usize],
    l2: f64,
) -> Result<(f64, Vec<f64>)> {
    spec.check(params, data)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    let layers = Layers { spec, p: params };
    let mut grad = vec![0.0; params.dim()];
    let mut hidden = Vec::with_capacity(h);
    let mut logits = vec![0.0; c];
    let mut delta = vec![0.0; c];
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;

    for &i in rows {
        let x = data.row(i);
        let y = data.labels()[i];
        layers.forward(x, &mut hidden, &mut logits);
        let lse = log_sum_exp(&logits);
        loss += lse - logits[y];
        for k in 0..c {
            delta[k] = ((logits[k] - lse).exp() - if k == y { 1.0 } else { 0.0 }) * scale;
        }
        if h == 0 {
            let (gw, gb) = grad.split_at_mut(c * d);
            for k in 0..c {
                for (g, xv) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *g += delta[k] * xv;
                }
                gb[k] += delta[k];
            }
            continue;
        }
        let w2 = &params[h * d + h..h * d + h + c * h];
        let (gw1, rest) = grad.split_at_mut(h * d);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(c * h);
        for k in 0..c {
            for (j, (_, a)) in hidden.iter().enumerate() {
                gw2[k * h + j] += delta[k] * a;
            }
            gb2[k] += delta[k];
        }
        for (j, &(z, a)) in hidden.iter().enumerate() {
            let back: f64 = (0..c).map(|k| w2[k * h + j] * delta[k]).sum();
            let dz = back * spec.activation.derivative(z, a);
            if dz != 0.0 {
                for (g, xv) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *g += dz * xv;
                }
            }
            gb1[j] += dz;
        }
    }
    loss *= scale;
    if l2 > 0.0 {
        loss += 0.5 * l2 * params.norm_sq();
        for (g, p) in grad.iter_mut().zip(params.iter()) {
            *g += l2 * p;
        }
    }
    Ok((loss, grad))
}

/// `cfg.epochs` passes of mini-batch SGD, reshuffling rows each epoch from
/// a seed derived from `cfg.seed` and the epoch index.
pub fn train_local(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &ClientDataset,
    cfg: &TrainConfig,
) -> Result<ParamVector> {
    spec.check(params, data)?;
    cfg.validate()?;
    let mut theta = params.clone().into_inner();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut Rng::new(derive_seed(cfg.seed, &[epoch as u64])));
        for batch in order.chunks(cfg.batch_size) {
            let current = ParamVector::new(theta).map_err(|_| Error::NonFinite("training"))?;
            let (_, grad) = loss_and_grad(spec, &current, data, batch, cfg.l2)?;
            theta = current.into_inner();
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= cfg.learning_rate * g;
            }
        }
    }
    ParamVector::new(theta).map_err(|_| Error::NonFinite("training"))
}

/// Mean cross-entropy and top-1 accuracy (ties go to the lowest class).
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &ClientDataset) -> Result<Evaluation> {
    spec.check(params, data)?;
    let layers = Layers { spec, p: params };
    let mut hidden = Vec::with_capacity(spec.hidden_dim);
    let mut logits = vec![0.0; spec.num_classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        layers.forward(data.row(i), &mut hidden, &mut logits);
        let y = data.labels()[i];
        loss += log_sum_exp(&logits) - logits[y];
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("evaluation loss"));
    }
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / n,
    })
}

/// `F_k(θ)`: mean cross-entropy of `params` on `data`.
pub fn local_loss(spec: &ModelSpec, params: &ParamVector, data: &ClientDataset) -> Result<f64> {
    evaluate(spec, params, data).map(|e| e.loss)
}
