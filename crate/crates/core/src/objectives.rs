//! Differentiable client objectives `f_i` with exact full-batch gradients and
//! mini-batch stochastic gradients.
//!
//! Three task families are provided:
//!
//! * **quadratic**: `f_i(w) = mean_j ½‖w − x_j‖²`. Gradient `w − mean(x)`,
//!   smoothness exactly 1, mini-batch noise known in closed form and a closed
//!   form global optimum. This is the workhorse for exact convergence checks.
//! * **logistic**: binary (sigmoid) for two classes, multinomial (softmax)
//!   otherwise, with optional L2 regularization.
//! * **mlp**: one tanh hidden layer, softmax cross-entropy or squared loss.
//!   Only used to exercise nonconvex behaviour.
//!
//! All gradients are averages of per-sample gradients accumulated in the
//! order the sample indices are given, so a batch listing the whole dataset
//! in order reproduces [`Objective::full_grad`] bit for bit.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::{Purpose, RngContract};

/// Largest parameter count accepted for the MLP task.
pub const MLP_MAX_PARAMS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpLoss {
    CrossEntropy,
    Squared,
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Quadratic { dim: usize },
    Logistic { features: usize, classes: usize, reg: f64 },
    Mlp { features: usize, hidden: usize, outputs: usize, loss: MlpLoss },
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

/// One client's loss `f_i` over its local dataset.
#[derive(Debug, Clone)]
pub struct Objective {
    model: Model,
    data: Arc<ClientDataset>,
    smoothness: f64,
}

impl Objective {
    pub fn quadratic(data: Arc<ClientDataset>) -> Self {
        let dim = data.data.dim();
        Self { model: Model::Quadratic { dim }, data, smoothness: 1.0 }
    }

    /// Logistic regression over `classes` classes (binary sigmoid when
    /// `classes == 2`, softmax otherwise) with L2 weight `reg`.
    pub fn logistic(data: Arc<ClientDataset>, classes: usize, reg: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("logistic objective needs at least 2 classes"));
        }
        if reg < 0.0 {
            return Err(Error::config("regularization weight must be non-negative"));
        }
        check_labels(&data, classes)?;
        let features = data.data.dim();
        let max_sq =
            (0..data.len()).map(|j| data.data.features(j).iter().map(|x| x * x).sum::<f64>() + 1.0).fold(0.0, f64::max);
        // Hessian of the per-sample loss w.r.t. the logits is bounded by 1/4
        // (sigmoid) or 1/2 (softmax).
        let curvature = if classes == 2 { 0.25 } else { 0.5 };
        Ok(Self { model: Model::Logistic { features, classes, reg }, data, smoothness: curvature * max_sq + reg })
    }

    /// One-hidden-layer tanh network. For [`MlpLoss::CrossEntropy`] the output
    /// width is `classes`; for [`MlpLoss::Squared`] it is 1 and `classes` is
    /// ignored. The smoothness constant is estimated by probing gradient
    /// differences at random points.
    pub fn mlp(data: Arc<ClientDataset>, hidden: usize, loss: MlpLoss, classes: usize) -> Result<Self> {
        let features = data.data.dim();
        let outputs = match loss {
            MlpLoss::CrossEntropy => {
                if classes < 2 {
                    return Err(Error::config("cross-entropy MLP needs at least 2 classes"));
                }
                check_labels(&data, classes)?;
                classes
            }
            MlpLoss::Squared => 1,
        };
        if hidden == 0 {
            return Err(Error::config("MLP needs at least one hidden unit"));
        }
        let params = hidden * (features + 1) + outputs * (hidden + 1);
        if params > MLP_MAX_PARAMS {
            return Err(Error::config(format!("MLP has {params} parameters, limit is {MLP_MAX_PARAMS}")));
        }
        let mut obj = Self { model: Model::Mlp { features, hidden, outputs, loss }, data, smoothness: 1.0 };
        obj.smoothness = obj.probe_smoothness(64, 1.0)?;
        Ok(obj)
    }

    pub fn with_smoothness(mut self, l: f64) -> Self {
        self.smoothness = l;
        self
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self.model {
            Model::Quadratic { .. } => ObjectiveKind::Quadratic,
            Model::Logistic { .. } => ObjectiveKind::Logistic,
            Model::Mlp { .. } => ObjectiveKind::Mlp,
        }
    }

    /// Parameter dimension `M`.
    pub fn dim(&self) -> usize {
        match self.model {
            Model::Quadratic { dim } => dim,
            Model::Logistic { features, classes, .. } => {
                if classes == 2 {
                    features + 1
                } else {
                    classes * (features + 1)
                }
            }
            Model::Mlp { features, hidden, outputs, .. } => hidden * (features + 1) + outputs * (hidden + 1),
        }
    }

    /// Smoothness constant `L` (exact for quadratic, an upper bound for
    /// logistic, an empirical estimate for the MLP).
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn data(&self) -> &ClientDataset {
        &self.data
    }

    pub fn num_samples(&self) -> usize {
        self.data.len()
    }

    /// Whether the task predicts class labels.
    pub fn is_classifier(&self) -> bool {
        match self.model {
            Model::Quadratic { .. } => false,
            Model::Logistic { .. } => true,
            Model::Mlp { loss, .. } => loss == MlpLoss::CrossEntropy,
        }
    }

    fn check_dim(&self, w: &ParamVector) -> Result<()> {
        w.ensure_len(self.dim(), "model")
    }

    /// Average loss over the whole local dataset.
    pub fn full_loss(&self, w: &ParamVector) -> Result<f64> {
        self.check_dim(w)?;
        let n = self.data.len();
        let mut total = 0.0;
        let mut scratch = Scratch::new(&self.model);
        for j in 0..n {
            total += self.sample_loss(w.as_slice(), j, &mut scratch);
        }
        Ok(total / n as f64 + self.reg_loss(w))
    }

    /// Exact full-batch gradient `∇f_i(w)`.
    pub fn full_grad(&self, w: &ParamVector) -> Result<ParamVector> {
        self.check_dim(w)?;
        Ok(self.batch_grad(w, 0..self.data.len()))
    }

    /// Average gradient over exactly the samples in `batch`.
    pub fn stoch_grad(&self, w: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        self.check_dim(w)?;
        if batch.is_empty() {
            return Err(Error::config("stochastic gradient over an empty batch"));
        }
        if let Some(&bad) = batch.iter().find(|&&j| j >= self.data.len()) {
            return Err(Error::config(format!("batch index {bad} out of range for {} samples", self.data.len())));
        }
        Ok(self.batch_grad(w, batch.iter().copied()))
    }

    fn batch_grad(&self, w: &ParamVector, batch: impl Iterator<Item = usize>) -> ParamVector {
        let mut grad = vec![0.0; self.dim()];
        let mut scratch = Scratch::new(&self.model);
        let mut count = 0usize;
        for j in batch {
            self.accumulate_grad(w.as_slice(), j, &mut grad, &mut scratch);
            count += 1;
        }
        let inv = 1.0 / count as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        if let Model::Logistic { reg, .. } = self.model {
            if reg > 0.0 {
                for (g, wi) in grad.iter_mut().zip(w.iter()) {
                    *g += reg * wi;
                }
            }
        }
        ParamVector::from_vec(grad)
    }

    /// Uniformly sample `batch_size` distinct sample indices. A batch covering
    /// the dataset is returned in order without consuming randomness.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        let n = self.data.len();
        if batch_size >= n {
            (0..n).collect()
        } else {
            index::sample(rng, n, batch_size).into_vec()
        }
    }

    /// Closed-form `E‖∇F_i(w;ξ) − ∇f_i(w)‖²` for uniform batches of
    /// `batch_size` drawn without replacement. Only available for the
    /// quadratic task, where it does not depend on `w`.
    pub fn noise_variance(&self, batch_size: usize) -> Option<f64> {
        if self.kind() != ObjectiveKind::Quadratic || batch_size == 0 {
            return None;
        }
        let n = self.data.len();
        let b = batch_size.min(n);
        if b == n {
            return Some(0.0);
        }
        let mean = self.data.data.feature_mean();
        let spread: f64 = (0..n)
            .map(|j| self.data.data.features(j).iter().zip(mean.iter()).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        Some(spread / b as f64 * (n - b) as f64 / (n - 1) as f64)
    }

    /// Monte Carlo estimate of the gradient noise `E‖∇F_i(w;ξ) − ∇f_i(w)‖²`.
    pub fn estimate_noise_variance<R: Rng + ?Sized>(
        &self,
        w: &ParamVector,
        batch_size: usize,
        draws: usize,
        rng: &mut R,
    ) -> Result<Estimate> {
        if draws < 2 {
            return Err(Error::config("noise estimate needs at least two draws"));
        }
        let full = self.full_grad(w)?;
        let samples: Vec<f64> = (0..draws)
            .map(|_| {
                let batch = self.sample_batch(batch_size, rng);
                self.batch_grad(w, batch.into_iter()).dist_sq(&full)
            })
            .collect();
        Ok(mean_and_stderr(&samples))
    }

    /// Noise bound `σ²`: analytic for quadratic, otherwise a Monte Carlo
    /// estimate (10⁴ draws) at `w` reported as mean plus three standard errors.
    pub fn noise_bound(&self, w: &ParamVector, batch_size: usize, seed: u64) -> Result<f64> {
        if let Some(v) = self.noise_variance(batch_size) {
            return Ok(v);
        }
        let mut rng = RngContract::new(seed).stream(Purpose::Probe, self.data.client_id as u64, 1, 0);
        let est = self.estimate_noise_variance(w, batch_size, 10_000, &mut rng)?;
        Ok(est.mean + 3.0 * est.std_err)
    }

    fn probe_smoothness(&self, pairs: usize, scale: f64) -> Result<f64> {
        let mut rng = RngContract::new(0).stream(Purpose::Probe, self.data.client_id as u64, 0, 0);
        let m = self.dim();
        let mut best = 0.0f64;
        for _ in 0..pairs {
            let a: Vec<f64> = (0..m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let b: Vec<f64> = a.iter().map(|x| x + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect();
            let (a, b) = (ParamVector::from_vec(a), ParamVector::from_vec(b));
            let ratio = self.full_grad(&a)?.dist(&self.full_grad(&b)?) / a.dist(&b);
            best = best.max(ratio);
        }
        Ok(best.max(f64::MIN_POSITIVE))
    }

    fn reg_loss(&self, w: &ParamVector) -> f64 {
        match self.model {
            Model::Logistic { reg, .. } if reg > 0.0 => 0.5 * reg * w.norm_sq(),
            _ => 0.0,
        }
    }

    fn sample_loss(&self, w: &[f64], j: usize, scratch: &mut Scratch) -> f64 {
        let x = self.data.data.features(j);
        let label = self.data.data.label(j);
        match self.model {
            Model::Quadratic { .. } => 0.5 * w.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            Model::Logistic { features, classes, .. } => {
                if classes == 2 {
                    let z = affine(&w[..features], w[features], x);
                    softplus(z) - label * z
                } else {
                    logits_linear(w, features, classes, x, &mut scratch.logits);
                    log_sum_exp(&scratch.logits) - scratch.logits[label as usize]
                }
            }
            Model::Mlp { features, hidden, outputs, loss } => {
                mlp_forward(w, features, hidden, outputs, x, scratch);
                match loss {
                    MlpLoss::CrossEntropy => log_sum_exp(&scratch.logits) - scratch.logits[label as usize],
                    MlpLoss::Squared => 0.5 * (scratch.logits[0] - label).powi(2),
                }
            }
        }
    }

    fn accumulate_grad(&self, w: &[f64], j: usize, grad: &mut [f64], scratch: &mut Scratch) {
        let x = self.data.data.features(j);
        let label = self.data.data.label(j);
        match self.model {
            Model::Quadratic { .. } => {
                for ((g, a), b) in grad.iter_mut().zip(w).zip(x) {
                    *g += a - b;
                }
            }
            Model::Logistic { features, classes, .. } => {
                if classes == 2 {
                    let z = affine(&w[..features], w[features], x);
                    let r = sigmoid(z) - label;
                    for (g, xi) in grad[..features].iter_mut().zip(x) {
                        *g += r * xi;
                    }
                    grad[features] += r;
                } else {
                    logits_linear(w, features, classes, x, &mut scratch.logits);
                    softmax_in_place(&mut scratch.logits);
                    let stride = features + 1;
                    for c in 0..classes {
                        let r = scratch.logits[c] - if c == label as usize { 1.0 } else { 0.0 };
                        let row = &mut grad[c * stride..(c + 1) * stride];
                        for (g, xi) in row[..features].iter_mut().zip(x) {
                            *g += r * xi;
                        }
                        row[features] += r;
                    }
                }
            }
            Model::Mlp { features, hidden, outputs, loss } => {
                mlp_forward(w, features, hidden, outputs, x, scratch);
                // output residual dL/dz
                match loss {
                    MlpLoss::CrossEntropy => {
                        softmax_in_place(&mut scratch.logits);
                        scratch.logits[label as usize] -= 1.0;
                    }
                    MlpLoss::Squared => scratch.logits[0] -= label,
                }
                let (w1_len, b1_len) = (hidden * features, hidden);
                let w2_off = w1_len + b1_len;
                let b2_off = w2_off + outputs * hidden;
                for o in 0..outputs {
                    let r = scratch.logits[o];
                    for h in 0..hidden {
                        grad[w2_off + o * hidden + h] += r * scratch.hidden[h];
                    }
                    grad[b2_off + o] += r;
                }
                for h in 0..hidden {
                    let back: f64 = (0..outputs).map(|o| w[w2_off + o * hidden + h] * scratch.logits[o]).sum();
                    let da = back * (1.0 - scratch.hidden[h] * scratch.hidden[h]);
                    for (g, xi) in grad[h * features..(h + 1) * features].iter_mut().zip(x) {
                        *g += da * xi;
                    }
                    grad[w1_len + h] += da;
                }
            }
        }
    }

    /// Predicted class for feature vector `x`, or `None` for regression tasks.
    pub fn predict_class(&self, w: &ParamVector, x: &[f64]) -> Option<usize> {
        let w = w.as_slice();
        match self.model {
            Model::Quadratic { .. } => None,
            Model::Logistic { features, classes, .. } => {
                if classes == 2 {
                    Some(usize::from(affine(&w[..features], w[features], x) > 0.0))
                } else {
                    let mut logits = vec![0.0; classes];
                    logits_linear(w, features, classes, x, &mut logits);
                    Some(argmax(&logits))
                }
            }
            Model::Mlp { features, hidden, outputs, loss } => {
                if loss != MlpLoss::CrossEntropy {
                    return None;
                }
                let mut scratch = Scratch::new(&self.model);
                mlp_forward(w, features, hidden, outputs, x, &mut scratch);
                Some(argmax(&scratch.logits))
            }
        }
    }
}

/// Minimizer of `(1/N) Σ f_i` when every objective is quadratic: the average
/// of the client means. `None` for any other task mix.
pub fn global_optimum(objectives: &[Objective]) -> Option<ParamVector> {
    let first = objectives.first()?;
    if objectives.iter().any(|o| o.kind() != ObjectiveKind::Quadratic || o.dim() != first.dim()) {
        return None;
    }
    let means: Vec<ParamVector> = objectives.iter().map(|o| o.data.data.feature_mean()).collect();
    ParamVector::mean(&means)
}

/// Global objective `f(w) = (1/N) Σ f_i(w)`, clients summed in order.
pub fn global_loss(objectives: &[Objective], w: &ParamVector) -> Result<f64> {
    if objectives.is_empty() {
        return Err(Error::config("no objectives"));
    }
    let mut total = 0.0;
    for o in objectives {
        total += o.full_loss(w)?;
    }
    Ok(total / objectives.len() as f64)
}

/// Central gradient `∇f(w) = (1/N) Σ ∇f_i(w)`, clients summed in order.
pub fn global_grad(objectives: &[Objective], w: &ParamVector) -> Result<ParamVector> {
    let grads: Vec<ParamVector> = objectives.iter().map(|o| o.full_grad(w)).collect::<Result<_>>()?;
    ParamVector::mean(&grads).ok_or_else(|| Error::config("no objectives"))
}

pub fn mean_and_stderr(samples: &[f64]) -> Estimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var =
        if samples.len() > 1 { samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Estimate { mean, std_err: (var / n).sqrt() }
}

fn check_labels(data: &ClientDataset, classes: usize) -> Result<()> {
    for j in 0..data.len() {
        match data.data.class(j) {
            Some(c) if c < classes => {}
            _ => {
                return Err(Error::config(format!(
                    "client {}: label {} is not a class index below {classes}",
                    data.client_id,
                    data.data.label(j)
                )))
            }
        }
    }
    Ok(())
}

struct Scratch {
    logits: Vec<f64>,
    hidden: Vec<f64>,
}

impl Scratch {
    fn new(model: &Model) -> Self {
        match *model {
            Model::Quadratic { .. } => Self { logits: Vec::new(), hidden: Vec::new() },
            Model::Logistic { classes, .. } => Self { logits: vec![0.0; classes], hidden: Vec::new() },
            Model::Mlp { hidden, outputs, .. } => Self { logits: vec![0.0; outputs], hidden: vec![0.0; hidden] },
        }
    }
}

#[inline]
fn affine(w: &[f64], b: f64, x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b
}

fn logits_linear(w: &[f64], features: usize, classes: usize, x: &[f64], out: &mut [f64]) {
    let stride = features + 1;
    for (c, z) in out.iter_mut().enumerate().take(classes) {
        let row = &w[c * stride..(c + 1) * stride];
        *z = affine(&row[..features], row[features], x);
    }
}

fn mlp_forward(w: &[f64], features: usize, hidden: usize, outputs: usize, x: &[f64], s: &mut Scratch) {
    let w1_len = hidden * features;
    let w2_off = w1_len + hidden;
    let b2_off = w2_off + outputs * hidden;
    for h in 0..hidden {
        let a = affine(&w[h * features..(h + 1) * features], w[w1_len + h], x);
        s.hidden[h] = a.tanh();
    }
    for o in 0..outputs {
        s.logits[o] = affine(&w[w2_off + o * hidden..w2_off + (o + 1) * hidden], w[b2_off + o], &s.hidden);
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}
