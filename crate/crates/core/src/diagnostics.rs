//! Empirical versions of the analysis quantities: gradient-estimation error
//! `E_t`, objective bias `γ_t`, update variance `Φ_t`, the weighted mismatch
//! `Γ_T`, test accuracy and communication cost.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::Algorithm;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{BatchMode, Federation};
use crate::objectives::{mean_and_stderr, Estimate, Objective};
use crate::param::ParamVector;

/// Per-client full gradients at `w`, computed in parallel, returned in client order.
pub fn client_grads(objectives: &[Objective], w: &ParamVector) -> Result<Vec<ParamVector>> {
    objectives.par_iter().map(|o| o.full_grad(w)).collect()
}

/// `E_t = ‖v_expected − ∇f(w_t)‖²`.
pub fn gradient_estimation_error(v_expected: &ParamVector, w: &ParamVector, objectives: &[Objective]) -> Result<f64> {
    let grads = client_grads(objectives, w)?;
    let central = ParamVector::mean(&grads).ok_or_else(|| Error::config("no objectives"))?;
    v_expected.ensure_len(central.len(), "expected update")?;
    Ok(v_expected.dist_sq(&central))
}

/// `γ_t = ‖(1/|S_t|) Σ_{i∈S_t} ∇f_i(w_t) − ∇f(w_t)‖²`.
pub fn objective_bias(active: &[usize], w: &ParamVector, objectives: &[Objective]) -> Result<f64> {
    let grads = client_grads(objectives, w)?;
    let central = ParamVector::mean(&grads).ok_or_else(|| Error::config("no objectives"))?;
    objective_bias_from_grads(active, &grads, &central)
}

pub fn objective_bias_from_grads(active: &[usize], grads: &[ParamVector], central: &ParamVector) -> Result<f64> {
    if let Some(&bad) = active.iter().find(|&&i| i >= grads.len()) {
        return Err(Error::config(format!("active client {bad} does not exist")));
    }
    let partial = ParamVector::mean(active.iter().map(|&i| &grads[i]))
        .ok_or_else(|| Error::config("objective bias of an empty active set"))?;
    Ok(partial.dist_sq(central))
}

/// The federation's full-batch update at its current iteration, i.e. the
/// `v_expected` used by `E_t`. Nothing is committed.
pub fn expected_update(fed: &Federation, active: &[usize]) -> Result<ParamVector> {
    fed.preview(active, BatchMode::FullBatch)
}

/// Replays of the current round with independent batch streams.
pub fn replay_updates(fed: &Federation, active: &[usize], replays: usize) -> Result<Vec<ParamVector>> {
    (0..replays as u64).into_par_iter().map(|r| fed.preview(active, BatchMode::Replay(r))).collect()
}

/// `Φ̂_t`: sample variance of the replayed `v_t` around its replay mean,
/// summed over coordinates, with a standard error.
pub fn phi_estimate(fed: &Federation, active: &[usize], replays: usize) -> Result<Estimate> {
    if replays < 2 {
        return Err(Error::config("phi estimate needs at least 2 replays"));
    }
    let updates = replay_updates(fed, active, replays)?;
    Ok(sample_variance(&updates))
}

/// Unbiased total variance `(1/(R−1)) Σ_r ‖v_r − v̄‖²` with the standard error
/// of the per-replay terms.
pub fn sample_variance(samples: &[ParamVector]) -> Estimate {
    let r = samples.len() as f64;
    let mean = ParamVector::mean(samples).expect("sample_variance of an empty sample");
    let terms: Vec<f64> = samples.iter().map(|v| v.dist_sq(&mean) * r / (r - 1.0)).collect();
    mean_and_stderr(&terms)
}

/// Fraction of correct argmax predictions on `test`, using `template` for the
/// model structure. `None` for regression tasks.
pub fn evaluate(template: &Objective, w: &ParamVector, test: &Dataset) -> Result<Option<f64>> {
    if test.is_empty() {
        return Err(Error::config("empty test set"));
    }
    if !template.is_classifier() {
        return Ok(None);
    }
    w.ensure_len(template.dim(), "model")?;
    let correct = (0..test.len())
        .filter(|&j| template.predict_class(w, test.features(j)).is_some_and(|c| Some(c) == test.class(j)))
        .count();
    Ok(Some(correct as f64 / test.len() as f64))
}

/// Uploads charged over a trace of active-set sizes.
pub fn communication_cost(algorithm: Algorithm, counts: &[usize]) -> usize {
    counts.iter().sum::<usize>() * algorithm.uploads_per_client()
}

/// How `E_t` is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Not measured.
    Off,
    /// Deterministic full-batch replay of the round.
    #[default]
    FullBatch,
    /// Mean of the stochastic replays (shares the `Φ̂` replays when enabled).
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub t: usize,
    pub loss: f64,
    pub grad_norm2: f64,
    pub error: Option<f64>,
    pub gamma: Option<f64>,
    pub phi_hat: Option<f64>,
    pub n_active: usize,
    /// Uploads spent to reach `w_t`.
    pub uploads: usize,
    pub accuracy: Option<f64>,
    /// Empty on the final row, which only evaluates `w_T`.
    pub eta: Option<f64>,
}

pub const CSV_HEADER: &str = "t,loss,grad_norm2,E_t,gamma_t,phi_hat,n_active,uploads,acc,eta_t";

// Shortest round-trip form; switches to exponent notation for tiny and huge values.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.t,
            num(self.loss),
            num(self.grad_norm2),
            opt(self.error),
            opt(self.gamma),
            opt(self.phi_hat),
            self.n_active,
            self.uploads,
            opt(self.accuracy),
            opt(self.eta)
        )
    }

    pub fn is_finite(&self) -> bool {
        [Some(self.loss), Some(self.grad_norm2), self.error, self.gamma, self.phi_hat, self.eta, self.accuracy]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Parse a metrics CSV written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<RoundMetrics>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Parse("metrics CSV header mismatch".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Parse(format!("bad number {s:?}"))) };
    let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Parse(format!("bad integer {s:?}"))) };
    let maybe = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::Parse(format!("expected 10 fields, got {}", f.len())));
            }
            Ok(RoundMetrics {
                t: int(f[0])?,
                loss: num(f[1])?,
                grad_norm2: num(f[2])?,
                error: maybe(f[3])?,
                gamma: maybe(f[4])?,
                phi_hat: maybe(f[5])?,
                n_active: int(f[6])?,
                uploads: int(f[7])?,
                accuracy: maybe(f[8])?,
                eta: maybe(f[9])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub seed: u64,
    pub iterations: usize,
    /// `Ξ_T = Σ η_t`
    pub xi: f64,
    /// `Γ_T = (1/Ξ_T) Σ η_t γ_t`, over rounds with a measured `γ_t`.
    pub gamma_weighted: Option<f64>,
    /// `Δ = f(w_0) − f(w*)` when the optimum is known.
    pub delta: Option<f64>,
    pub final_loss: f64,
    pub final_grad_norm2: f64,
    pub final_accuracy: Option<f64>,
    pub min_grad_norm2: f64,
    pub mean_grad_norm2: f64,
    pub uploads: usize,
    pub empty_rounds: usize,
    pub failure: Option<String>,
}

impl RunSummary {
    /// Summarize a trial whose last row evaluates `w_T`.
    pub fn from_metrics(
        algorithm: Algorithm,
        seed: u64,
        rows: &[RoundMetrics],
        optimal_loss: Option<f64>,
    ) -> Result<Self> {
        let last = rows.last().ok_or_else(|| Error::config("no metrics to summarize"))?;
        let xi: f64 = rows.iter().filter_map(|r| r.eta).sum();
        if !(xi > 0.0) && rows.len() > 1 {
            return Err(Error::numerical("sum of learning rates is not positive"));
        }
        let weighted: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.eta?, r.gamma?))).collect();
        let gamma_weighted = (!weighted.is_empty()).then(|| {
            let num: f64 = weighted.iter().map(|(e, g)| e * g).sum();
            let den: f64 = weighted.iter().map(|(e, _)| e).sum();
            num / den
        });
        let count = rows.len() as f64;
        let (min, sum) = rows.iter().fold((f64::INFINITY, 0.0), |(m, s), r| (m.min(r.grad_norm2), s + r.grad_norm2));
        Ok(Self {
            algorithm: algorithm.name().to_string(),
            seed,
            iterations: rows.len() - 1,
            xi,
            gamma_weighted,
            delta: match (rows.first(), optimal_loss) {
                (Some(r), Some(f)) => Some(r.loss - f),
                _ => None,
            },
            final_loss: last.loss,
            final_grad_norm2: last.grad_norm2,
            final_accuracy: last.accuracy,
            min_grad_norm2: min,
            mean_grad_norm2: sum / count,
            uploads: last.uploads,
            empty_rounds: rows.iter().filter(|r| r.eta.is_some() && r.n_active == 0).count(),
            failure: None,
        })
    }

    pub fn failed(algorithm: Algorithm, seed: u64, iterations: usize, reason: String) -> Self {
        Self {
            algorithm: algorithm.name().to_string(),
            seed,
            iterations,
            xi: 0.0,
            gamma_weighted: None,
            delta: None,
            final_loss: f64::NAN,
            final_grad_norm2: f64::NAN,
            final_accuracy: None,
            min_grad_norm2: f64::NAN,
            mean_grad_norm2: f64::NAN,
            uploads: 0,
            empty_rounds: 0,
            failure: Some(reason),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single trial).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Across-seed aggregate of successful trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialsSummary {
    pub algorithm: String,
    pub trials: usize,
    pub failures: usize,
    pub final_loss: Option<MeanStd>,
    pub final_grad_norm2: Option<MeanStd>,
    pub final_accuracy: Option<MeanStd>,
    pub gamma_weighted: Option<MeanStd>,
    pub uploads: usize,
}

impl TrialsSummary {
    pub fn from_runs(algorithm: Algorithm, runs: &[RunSummary]) -> Self {
        let ok: Vec<&RunSummary> = runs.iter().filter(|r| r.failure.is_none()).collect();
        let collect = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Option<MeanStd> {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            (v.len() == ok.len()).then(|| MeanStd::of(&v)).flatten()
        };
        Self {
            algorithm: algorithm.name().to_string(),
            trials: runs.len(),
            failures: runs.len() - ok.len(),
            final_loss: collect(&|r| Some(r.final_loss)),
            final_grad_norm2: collect(&|r| Some(r.final_grad_norm2)),
            final_accuracy: collect(&|r| r.final_accuracy),
            gamma_weighted: collect(&|r| r.gamma_weighted),
            uploads: ok.iter().map(|r| r.uploads).max().unwrap_or(0),
        }
    }
}
