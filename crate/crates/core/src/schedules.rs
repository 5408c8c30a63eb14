//! Global learning-rate schedules and the step-size conditions under which
//! MimiC's convergence bound holds.
//!
//! Notation used below: `ρ_t = η_t |S_{t+1}| / (η_{t+1} |S_t|)`,
//! `φ_K = (((2 + 2η_L²L²)^K − 1) / (K (2η_L²L² + 1)) + 1) L²`, and
//! `C_K = 16 η_L² L² K (K − 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default `ν` in the step-size conditions.
pub const DEFAULT_NU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// `η_t = initial · decay^t`.
    Exponential {
        initial: f64,
        decay: f64,
    },
    /// `η_t = c |S_t| / (t + β)`.
    Lemma6 {
        c: f64,
        beta: f64,
    },
    Constant {
        lr: f64,
    },
}

/// Learning rates for each iteration, plus the iterations whose value had to
/// be substituted (lemma6 with an empty active set).
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedSchedule {
    pub etas: Vec<f64>,
    pub substituted: Vec<usize>,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Exponential { initial, decay } => initial > 0.0 && decay > 0.0,
            LrSchedule::Lemma6 { c, beta } => c > 0.0 && beta > 0.0,
            LrSchedule::Constant { lr } => lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("learning-rate schedule {self:?} needs positive parameters")))
        }
    }

    /// Realize `η_t` for every entry of `counts` (the `|S_t|` stream).
    pub fn realize(&self, counts: &[usize]) -> Result<RealizedSchedule> {
        self.validate()?;
        let mut etas = Vec::with_capacity(counts.len());
        let mut substituted = Vec::new();
        for (t, &n) in counts.iter().enumerate() {
            let eta = match *self {
                LrSchedule::Exponential { initial, decay } => initial * decay.powi(t as i32),
                LrSchedule::Constant { lr } => lr,
                LrSchedule::Lemma6 { c, beta } => {
                    if n == 0 {
                        substituted.push(t);
                        etas.last().copied().unwrap_or(c / beta)
                    } else {
                        lemma6_rate(c, beta, n, t)
                    }
                }
            };
            etas.push(eta);
        }
        Ok(RealizedSchedule { etas, substituted })
    }
}

/// `η_t = c |S_t| / (t + β)`.
pub fn lemma6_rate(c: f64, beta: f64, active: usize, t: usize) -> f64 {
    c * active as f64 / (t as f64 + beta)
}

/// Lemma-6 schedule over an `|S_t|` stream.
pub fn lemma6_schedule(c: f64, beta: f64, counts: &[usize]) -> Result<RealizedSchedule> {
    LrSchedule::Lemma6 { c, beta }.realize(counts)
}

/// The constant `φ_K`. Errors instead of returning infinity when the power
/// overflows.
pub fn phi_k(local_lr: f64, smoothness: f64, steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::config("phi_K needs K >= 1"));
    }
    if !(smoothness > 0.0) {
        return Err(Error::config("phi_K needs L > 0"));
    }
    let a = local_lr * local_lr * smoothness * smoothness;
    let k = i32::try_from(steps).map_err(|_| Error::numerical("phi_K: K too large"))?;
    let power = (2.0 + 2.0 * a).powi(k);
    let value = ((power - 1.0) / (steps as f64 * (2.0 * a + 1.0)) + 1.0) * smoothness * smoothness;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numerical(format!("phi_K overflows for K = {steps}")))
    }
}

/// FedAvg's drift constant `C_K = 16 η_L² L² K (K − 1)`.
pub fn c_k(local_lr: f64, smoothness: f64, steps: usize) -> f64 {
    let k = steps as f64;
    16.0 * local_lr * local_lr * smoothness * smoothness * k * (k - 1.0)
}

/// Quadratic-inequality coefficients `(A_t, B_t, C_t)` for the lemma6
/// constant `c`: the step-size condition holds at `t` whenever
/// `A_t c² + B_t c − C_t ≤ 0`.
pub fn lemma6_coefficients(
    t: usize,
    beta: f64,
    num_clients: usize,
    tau_max: usize,
    smoothness: f64,
    phi: f64,
    nu: f64,
) -> (f64, f64, f64) {
    let s = t as f64 + beta;
    let n = num_clients as f64;
    let a = phi * tau_max as f64 * n * n * ((1.0 - nu) * s + 1.0);
    let b = nu * smoothness * n * s * s;
    let c = nu * s * s * s;
    (a, b, c)
}

/// Largest `c` that satisfies the lemma6 quadratic inequality at every
/// `t < iterations`.
pub fn lemma6_feasible_c(
    iterations: usize,
    beta: f64,
    num_clients: usize,
    tau_max: usize,
    smoothness: f64,
    phi: f64,
    nu: f64,
) -> Result<f64> {
    if iterations == 0 || !(beta > 0.0) || !(nu > 0.0 && nu < 1.0) {
        return Err(Error::config("feasible-c scan needs T >= 1, beta > 0 and nu in (0, 1)"));
    }
    let mut best = f64::INFINITY;
    for t in 0..iterations {
        let (a, b, c) = lemma6_coefficients(t, beta, num_clients, tau_max, smoothness, phi, nu);
        // (sqrt(b² + 4ac) − b) / 2a, in the cancellation-free form
        let root = 2.0 * c / ((b * b + 4.0 * a * c).sqrt() + b);
        best = best.min(root);
    }
    Ok(best)
}

/// Constants the conditions depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionParams {
    pub nu: f64,
    pub phi_k: f64,
    pub tau_max: usize,
    pub num_clients: usize,
    pub smoothness: f64,
    pub local_lr: f64,
    pub local_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationCheck {
    pub t: usize,
    pub active: usize,
    pub eta: f64,
    pub rho: f64,
    pub rho_ok: bool,
    /// `(1/η_t)(1/(2η_t) − L/2)`
    pub lhs: f64,
    /// `(ρ_t − ν) φ_K τ_max N / (2ν |S_t|)`
    pub rhs: f64,
    pub step_ok: bool,
    /// Same condition written with `η_{t+1}/|S_{t+1}|` in place of
    /// `η_t/(ρ_t|S_t|)`; algebraically identical, may differ by rounding.
    pub step_ok_alt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub params: ConditionParams,
    pub iterations: Vec<IterationCheck>,
    pub c_k: f64,
    /// `1 − C_K > 0`, FedAvg's local-rate precondition.
    pub fedavg_ok: bool,
    /// `ν < min_t (ρ_t − 1)`, needed for `α_t > 0`.
    pub nu_admissible: bool,
    pub min_rho_gap: f64,
    /// Iterations where the two forms of the step condition disagree.
    pub form_discrepancies: Vec<usize>,
    /// Iterations whose rates were substituted.
    pub substituted: Vec<usize>,
    pub rho_pass: bool,
    pub step_pass: bool,
}

impl ConditionReport {
    /// Both `ρ_t > 1` and the step-size inequality hold everywhere.
    pub fn passed(&self) -> bool {
        self.rho_pass && self.step_pass
    }

    pub fn first_failure(&self) -> Option<usize> {
        self.iterations.iter().find(|c| !c.rho_ok || !c.step_ok).map(|c| c.t)
    }

    /// Per-iteration CSV: `t,n_active,eta,rho,lhs,rhs,rho_ok,step_ok`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,n_active,eta,rho,lhs,rhs,rho_ok,step_ok\n");
        for c in &self.iterations {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.t, c.active, c.eta, c.rho, c.lhs, c.rhs, c.rho_ok as u8, c.step_ok as u8
            ));
        }
        out
    }
}

/// Check `ρ_t > 1` and the step-size inequality for every `t` that has a
/// successor, i.e. `etas`/`counts` must carry `T + 1` entries to cover `T`
/// iterations. Never fails on violated conditions; they are reported.
pub fn check_conditions(etas: &[f64], counts: &[usize], params: ConditionParams) -> Result<ConditionReport> {
    if etas.len() != counts.len() || etas.len() < 2 {
        return Err(Error::config("check_conditions needs matching eta/count streams of length >= 2"));
    }
    let p = params;
    let mut iterations = Vec::with_capacity(etas.len() - 1);
    let mut discrepancies = Vec::new();
    let mut min_gap = f64::INFINITY;
    for t in 0..etas.len() - 1 {
        let (eta, next) = (etas[t], etas[t + 1]);
        // an empty round has no meaningful |S_t|; count it as one client
        let s_now = counts[t].max(1) as f64;
        let s_next = counts[t + 1].max(1) as f64;
        let rho = eta * s_next / (next * s_now);
        min_gap = min_gap.min(rho - 1.0);
        let lhs = (1.0 / eta) * (0.5 / eta - 0.5 * p.smoothness);
        let rhs = (rho - p.nu) * p.phi_k * p.tau_max as f64 * p.num_clients as f64 / (2.0 * p.nu * s_now);
        let step_ok = lhs >= rhs;
        let alt_lhs = 0.5 / eta - 0.5 * p.smoothness;
        let alt_rhs =
            rho * (rho - p.nu) / (2.0 * p.nu) * next / s_next * p.phi_k * p.tau_max as f64 * p.num_clients as f64;
        let step_ok_alt = alt_lhs >= alt_rhs;
        if step_ok != step_ok_alt {
            discrepancies.push(t);
        }
        iterations.push(IterationCheck {
            t,
            active: counts[t],
            eta,
            rho,
            rho_ok: rho > 1.0,
            lhs,
            rhs,
            step_ok,
            step_ok_alt,
        });
    }
    let c_k = c_k(p.local_lr, p.smoothness, p.local_steps);
    let rho_pass = iterations.iter().all(|c| c.rho_ok);
    let step_pass = iterations.iter().all(|c| c.step_ok);
    Ok(ConditionReport {
        params,
        c_k,
        fedavg_ok: 1.0 - c_k > 0.0,
        nu_admissible: p.nu > 0.0 && p.nu < min_gap,
        min_rho_gap: min_gap,
        form_discrepancies: discrepancies,
        substituted: Vec::new(),
        iterations,
        rho_pass,
        step_pass,
    })
}

/// Largest admissible-looking `ν`: half the smallest `ρ_t − 1`.
pub fn admissible_nu(etas: &[f64], counts: &[usize]) -> Option<f64> {
    let gap = (0..etas.len().saturating_sub(1))
        .map(|t| etas[t] * counts[t + 1].max(1) as f64 / (etas[t + 1] * counts[t].max(1) as f64) - 1.0)
        .fold(f64::INFINITY, f64::min);
    (gap.is_finite() && gap > 0.0).then_some(0.5 * gap.min(1.0))
}
