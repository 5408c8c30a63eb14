//! One simulated federation: client objectives, local training and the
//! server state, advanced one iteration at a time.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::{
    Algorithm, ClientCorrections, CorrectionSite, RoundResult, ScaffoldVariant, ServerState, Upload,
};
use crate::error::{Error, Result};
use crate::local::{local_train_corrected, LocalConfig};
use crate::objectives::Objective;
use crate::param::ParamVector;
use crate::rng::{Purpose, RngContract};

/// Source of mini-batch randomness for a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// The training streams.
    Training,
    /// Independent streams for the r-th diagnostic replay.
    Replay(u64),
    /// Every local step uses the client's whole dataset.
    FullBatch,
}

// Lane 1 of a batch stream holds SCAFFOLD's anchor batch.
const LOCAL_LANE: u64 = 0;
const ANCHOR_LANE: u64 = 1;

pub struct Federation {
    objectives: Vec<Objective>,
    local: LocalConfig,
    server: ServerState,
    client_corrections: Option<ClientCorrections>,
    rng: RngContract,
}

impl Federation {
    pub fn new(
        objectives: Vec<Objective>,
        init: ParamVector,
        algorithm: Algorithm,
        local: LocalConfig,
        rng: RngContract,
    ) -> Result<Self> {
        local.validate()?;
        let first = objectives.first().ok_or_else(|| Error::config("federation without clients"))?;
        let dim = first.dim();
        if objectives.iter().any(|o| o.dim() != dim) {
            return Err(Error::config("clients disagree on the model dimension"));
        }
        init.ensure_len(dim, "initial model")?;
        let n = objectives.len();
        Ok(Self { server: ServerState::new(algorithm, init, n), objectives, local, client_corrections: None, rng })
    }

    pub fn with_scaffold_variant(mut self, variant: ScaffoldVariant) -> Self {
        self.server = self.server.with_scaffold_variant(variant);
        self
    }

    pub fn with_correction_site(mut self, site: CorrectionSite) -> Self {
        if self.server.algorithm == Algorithm::Mimic && site == CorrectionSite::Client {
            self.server = self.server.with_correction_site(site);
            self.client_corrections = Some(ClientCorrections::new(self.objectives.len(), self.server.dim()));
        }
        self
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn model(&self) -> &ParamVector {
        &self.server.model
    }

    pub fn objectives(&self) -> &[Objective] {
        &self.objectives
    }

    pub fn local_config(&self) -> &LocalConfig {
        &self.local
    }

    pub fn set_local_lr(&mut self, lr: f64) {
        self.local.lr = lr;
    }

    pub fn client_corrections(&self) -> Option<&ClientCorrections> {
        self.client_corrections.as_ref()
    }

    fn stream(&self, client: usize, mode: BatchMode, lane: u64) -> ChaCha8Rng {
        let t = self.server.iteration as u64;
        match mode {
            BatchMode::Training | BatchMode::FullBatch => self.rng.stream(Purpose::Batch, client as u64, t, lane),
            BatchMode::Replay(r) => self.rng.stream(Purpose::Replay, client as u64, t, r * 2 + lane),
        }
    }

    fn client_config(&self, client: usize, mode: BatchMode) -> LocalConfig {
        let mut cfg = self.local;
        if mode == BatchMode::FullBatch {
            cfg.batch_size = self.objectives[client].num_samples();
        }
        cfg
    }

    /// Compute every active client's upload for the current iteration.
    /// Clients run in parallel; results come back in `active` order.
    pub fn uploads(&self, active: &[usize], mode: BatchMode) -> Result<Vec<Upload>> {
        if let Some(&bad) = active.iter().find(|&&i| i >= self.objectives.len()) {
            return Err(Error::config(format!("active client {bad} does not exist")));
        }
        let w = &self.server.model;
        let scaffold_drifts = self.scaffold_drifts(active, mode)?;
        active
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let obj = &self.objectives[i];
                let cfg = self.client_config(i, mode);
                let mut rng = self.stream(i, mode, LOCAL_LANE);
                let drift = scaffold_drifts.as_ref().map(|d| &d[k].0);
                let outcome = local_train_corrected(obj, w, &cfg, drift, &mut rng)?;
                let local_update = outcome.update;
                let (sent, control) = match (self.server.algorithm, &scaffold_drifts) {
                    (Algorithm::Scaffold, Some(d)) => {
                        let control = match self.server.scaffold().map(|s| s.variant) {
                            // c_i⁺ − c_i with c_i⁺ = ĝ − (c − c_i)
                            Some(ScaffoldVariant::Persistent) => {
                                let s = self.server.scaffold().unwrap();
                                let new_ci = local_update.sub(&d[k].0);
                                new_ci.sub(&s.clients[i])
                            }
                            _ => d[k].1.clone(),
                        };
                        (local_update.clone(), Some(control))
                    }
                    (Algorithm::Mimic, _) => match &self.client_corrections {
                        Some(cc) => (cc.correct(i, &local_update), None),
                        None => (local_update.clone(), None),
                    },
                    _ => (local_update.clone(), None),
                };
                Ok(Upload { client: i, local_update, sent, control })
            })
            .collect()
    }

    /// Per-client `(drift, anchor)` for SCAFFOLD local steps. The anchor is the
    /// client's gradient at `w_t` (within-round variant) or unused.
    fn scaffold_drifts(&self, active: &[usize], mode: BatchMode) -> Result<Option<Vec<(ParamVector, ParamVector)>>> {
        let Some(state) = self.server.scaffold() else {
            return Ok(None);
        };
        let w = &self.server.model;
        match state.variant {
            ScaffoldVariant::Persistent => Ok(Some(
                active.iter().map(|&i| (state.server.sub(&state.clients[i]), ParamVector::zeros(w.len()))).collect(),
            )),
            ScaffoldVariant::WithinRound => {
                let anchors: Vec<ParamVector> = active
                    .par_iter()
                    .map(|&i| {
                        let obj = &self.objectives[i];
                        let cfg = self.client_config(i, mode);
                        let mut rng = self.stream(i, mode, ANCHOR_LANE);
                        let batch = obj.sample_batch(cfg.batch_size, &mut rng);
                        obj.stoch_grad(w, &batch)
                    })
                    .collect::<Result<_>>()?;
                let Some(mean) = ParamVector::mean(&anchors) else {
                    return Ok(Some(Vec::new()));
                };
                Ok(Some(anchors.into_iter().map(|a| (mean.sub(&a), a)).collect()))
            }
        }
    }

    /// The global update `v_t` this round would apply, without applying it.
    pub fn preview(&self, active: &[usize], mode: BatchMode) -> Result<ParamVector> {
        let uploads = self.uploads(active, mode)?;
        self.server.aggregate(&uploads)
    }

    /// Run one iteration with global learning rate `lr`. Returns `None` (and
    /// leaves the model untouched) when nobody is active.
    pub fn step(&mut self, active: &[usize], lr: f64) -> Result<Option<RoundResult>> {
        if active.is_empty() {
            self.server.skip_round();
            return Ok(None);
        }
        let uploads = self.uploads(active, BatchMode::Training)?;
        let v = self.server.aggregate(&uploads)?;
        let result = self.server.commit(&uploads, v, lr)?;
        if let Some(cc) = self.client_corrections.as_mut() {
            for u in &uploads {
                cc.absorb(u.client, &result.update, &u.local_update);
            }
        }
        Ok(Some(result))
    }

    /// SCAFFOLD iteration with the client loop embedded: gather anchors or
    /// variates, run corrected local steps, aggregate.
    pub fn scaffold_round(&mut self, active: &[usize], lr: f64) -> Result<RoundResult> {
        if self.server.algorithm != Algorithm::Scaffold {
            return Err(Error::config("scaffold_round on a non-SCAFFOLD federation"));
        }
        self.step(active, lr)?.ok_or_else(|| Error::integrity("SCAFFOLD round with no active clients"))
    }
}
