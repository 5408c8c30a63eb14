//! Client-side local training: `K` mini-batch SGD steps from the broadcast
//! model, returning the averaged local update `ĝ_i`.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::param::ParamVector;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    /// Number of local SGD steps `K`.
    pub steps: usize,
    /// Local learning rate `η_L`.
    pub lr: f64,
    pub batch_size: usize,
    /// Proximal weight `μ`; zero disables the FedProx term.
    pub prox_mu: f64,
}

impl LocalConfig {
    pub fn new(steps: usize, lr: f64, batch_size: usize) -> Self {
        Self { steps, lr, batch_size, prox_mu: 0.0 }
    }

    pub fn with_prox(mut self, mu: f64) -> Self {
        self.prox_mu = mu;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("local steps K must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("local learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(Error::config("proximal weight must be non-negative"));
        }
        Ok(())
    }

    /// Whether `η_L ≤ 1/(10L)`, the local-rate condition of the FedAvg
    /// drift bound. Logs a warning when violated.
    pub fn check_local_rate(&self, smoothness: f64) -> bool {
        let ok = self.lr <= 1.0 / (10.0 * smoothness);
        if !ok {
            log::warn!(
                "local learning rate {} exceeds 1/(10L) = {} for L = {smoothness}",
                self.lr,
                1.0 / (10.0 * smoothness)
            );
        }
        ok
    }

    /// Local steps covering `epochs` passes over a dataset of `samples`.
    pub fn epochs_to_steps(epochs: usize, samples: usize, batch_size: usize) -> usize {
        epochs * samples.div_ceil(batch_size.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    /// Averaged local update `ĝ_i(w_t)`.
    pub update: ParamVector,
    pub final_model: ParamVector,
}

/// Run `K` local steps `w ← w − η_L (∇F_i(w; ξ) + μ (w − w_t))`.
///
/// With `μ = 0` the update is the mean of the stochastic gradients, so
/// `final_model = w_t − η_L K ĝ` up to rounding. With `μ > 0` the update is
/// defined as `(w_t − final_model) / (η_L K)` so the server treats it the
/// same way.
pub fn local_train<R: Rng + ?Sized>(
    obj: &Objective,
    w_t: &ParamVector,
    cfg: &LocalConfig,
    rng: &mut R,
) -> Result<LocalOutcome> {
    local_train_corrected(obj, w_t, cfg, None, rng)
}

/// [`local_train`] with a constant `drift` added to every step's gradient
/// (used by SCAFFOLD's control variates).
pub fn local_train_corrected<R: Rng + ?Sized>(
    obj: &Objective,
    w_t: &ParamVector,
    cfg: &LocalConfig,
    drift: Option<&ParamVector>,
    rng: &mut R,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    w_t.ensure_len(obj.dim(), "broadcast model")?;
    if let Some(d) = drift {
        d.ensure_len(obj.dim(), "drift correction")?;
    }
    if cfg.batch_size > obj.num_samples() && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!(
            "batch size {} exceeds {} local samples of client {}; using the full batch",
            cfg.batch_size,
            obj.num_samples(),
            obj.data().client_id
        );
    }
    let mut w = w_t.clone();
    let mut grad_sum = ParamVector::zeros(obj.dim());
    for _ in 0..cfg.steps {
        let batch = obj.sample_batch(cfg.batch_size, rng);
        let mut g = obj.stoch_grad(&w, &batch)?;
        if let Some(d) = drift {
            g.add_assign(d);
        }
        grad_sum.add_assign(&g);
        if cfg.prox_mu > 0.0 {
            let mut prox = w.sub(w_t);
            prox.scale(cfg.prox_mu);
            g.add_assign(&prox);
        }
        w.axpy(-cfg.lr, &g);
    }
    w.ensure_finite("local model")?;
    let update = if cfg.prox_mu > 0.0 {
        let mut u = w_t.sub(&w);
        u.scale(1.0 / (cfg.lr * cfg.steps as f64));
        u
    } else {
        grad_sum.scale(1.0 / cfg.steps as f64);
        grad_sum
    };
    Ok(LocalOutcome { update, final_model: w })
}
