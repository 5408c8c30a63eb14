//! Server-side aggregation for FedAvg, FedProx, MIFA, SCAFFOLD and MimiC.
//!
//! A round is split in two: [`ServerState::aggregate`] computes the applied
//! global update `v_t` from the received uploads without touching state, and
//! [`ServerState::commit`] applies `w_{t+1} = w_t − η_t v_t` and updates the
//! per-algorithm bookkeeping. Keeping the first half pure lets diagnostics
//! replay a round (full batch or fresh mini-batches) from the same state.
//!
//! Uploads must be sorted by ascending client id; all sums run in that order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    Scaffold,
    Mifa,
    Mimic,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::FedAvg, Algorithm::FedProx, Algorithm::Scaffold, Algorithm::Mifa, Algorithm::Mimic];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::Scaffold => "scaffold",
            Algorithm::Mifa => "mifa",
            Algorithm::Mimic => "mimic",
        }
    }

    /// Model-sized uploads each active client sends per round.
    pub fn uploads_per_client(self) -> usize {
        match self {
            Algorithm::Scaffold => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown algorithm {s:?}")))
    }
}

/// How SCAFFOLD maintains its control variates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaffoldVariant {
    /// Server and client variates persist across rounds (option II of the
    /// original method).
    #[default]
    Persistent,
    /// Each round every active client uploads `g_i(w_t)` first and local
    /// steps use `g_i(w) − g_i(w_t) + mean_j g_j(w_t)`; nothing persists.
    WithinRound,
}

/// Where MimiC keeps the correction variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionSite {
    #[default]
    Server,
    /// Clients add their own correction before uploading; the server only
    /// averages.
    Client,
}

/// What one active client sends in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client: usize,
    /// The client's local update `ĝ_i(w_t)` (for SCAFFOLD, the average
    /// corrected step direction).
    pub local_update: ParamVector,
    /// The vector actually transmitted: `ĝ_i`, or `ĝ_i + c_i` for client-side
    /// MimiC corrections.
    pub sent: ParamVector,
    /// SCAFFOLD's second upload: the client variate change (persistent) or
    /// the anchor gradient `g_i(w_t)` (within-round).
    pub control: Option<ParamVector>,
}

impl Upload {
    pub fn plain(client: usize, update: ParamVector) -> Self {
        Self { client, sent: update.clone(), local_update: update, control: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub iteration: usize,
    /// Applied global update `v_t`.
    pub update: ParamVector,
    pub lr: f64,
    pub active: Vec<usize>,
    /// Model-sized uploads charged this round.
    pub uploads: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct MimicState {
    corrections: Vec<ParamVector>,
    last_active: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Memo {
    update: ParamVector,
    iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldState {
    pub variant: ScaffoldVariant,
    pub server: ParamVector,
    pub clients: Vec<ParamVector>,
}

/// Global model plus everything the server remembers between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub model: ParamVector,
    pub algorithm: Algorithm,
    pub iteration: usize,
    num_clients: usize,
    mimic: Option<MimicState>,
    mifa: Vec<Option<Memo>>,
    scaffold: Option<ScaffoldState>,
}

impl ServerState {
    pub fn new(algorithm: Algorithm, model: ParamVector, num_clients: usize) -> Self {
        let dim = model.len();
        Self {
            algorithm,
            iteration: 0,
            num_clients,
            mimic: (algorithm == Algorithm::Mimic).then(|| MimicState {
                corrections: vec![ParamVector::zeros(dim); num_clients],
                last_active: vec![None; num_clients],
            }),
            mifa: if algorithm == Algorithm::Mifa { vec![None; num_clients] } else { Vec::new() },
            scaffold: (algorithm == Algorithm::Scaffold).then(|| ScaffoldState {
                variant: ScaffoldVariant::Persistent,
                server: ParamVector::zeros(dim),
                clients: vec![ParamVector::zeros(dim); num_clients],
            }),
            model,
        }
    }

    pub fn with_scaffold_variant(mut self, variant: ScaffoldVariant) -> Self {
        if let Some(s) = self.scaffold.as_mut() {
            s.variant = variant;
        }
        self
    }

    /// Move MimiC corrections to the clients: the server stores none.
    pub fn with_correction_site(mut self, site: CorrectionSite) -> Self {
        if site == CorrectionSite::Client {
            self.mimic = None;
        }
        self
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn dim(&self) -> usize {
        self.model.len()
    }

    /// Number of correction vectors held at the server (MimiC).
    pub fn stored_corrections(&self) -> usize {
        self.mimic.as_ref().map_or(0, |m| m.corrections.len())
    }

    /// Stored MimiC correction of `client`, if corrections live at the server.
    pub fn correction(&self, client: usize) -> Option<&ParamVector> {
        self.mimic.as_ref().map(|m| &m.corrections[client])
    }

    /// Iteration at which the server last received an update from `client`
    /// (MimiC and MIFA).
    pub fn last_active(&self, client: usize) -> Option<usize> {
        if let Some(m) = &self.mimic {
            return m.last_active[client];
        }
        self.mifa.get(client).and_then(|m| m.as_ref().map(|m| m.iteration))
    }

    /// MIFA's memorized update for `client` and the iteration it was received.
    pub fn memorized(&self, client: usize) -> Option<(&ParamVector, usize)> {
        self.mifa.get(client)?.as_ref().map(|m| (&m.update, m.iteration))
    }

    pub fn scaffold(&self) -> Option<&ScaffoldState> {
        self.scaffold.as_ref()
    }

    fn check_uploads(&self, uploads: &[Upload]) -> Result<()> {
        if uploads.is_empty() {
            return Err(Error::integrity("aggregation over an empty active set"));
        }
        for pair in uploads.windows(2) {
            if pair[0].client >= pair[1].client {
                return Err(Error::integrity("uploads must be sorted by ascending client id"));
            }
        }
        for u in uploads {
            if u.client >= self.num_clients {
                return Err(Error::integrity(format!("upload from unknown client {}", u.client)));
            }
            if u.sent.len() != self.dim() || u.local_update.len() != self.dim() {
                return Err(Error::integrity(format!(
                    "upload from client {} has dimension {}, model has {}",
                    u.client,
                    u.sent.len(),
                    self.dim()
                )));
            }
        }
        Ok(())
    }

    /// Applied global update `v_t` for these uploads. Does not modify state.
    pub fn aggregate(&self, uploads: &[Upload]) -> Result<ParamVector> {
        self.check_uploads(uploads)?;
        let mut sum = ParamVector::zeros(self.dim());
        match self.algorithm {
            Algorithm::Mifa => {
                let mut k = 0;
                for i in 0..self.num_clients {
                    if k < uploads.len() && uploads[k].client == i {
                        sum.add_assign(&uploads[k].sent);
                        k += 1;
                    } else {
                        let memo = self.mifa[i]
                            .as_ref()
                            .ok_or_else(|| Error::integrity(format!("MIFA has no memorized update for client {i}")))?;
                        sum.add_assign(&memo.update);
                    }
                }
                sum.scale(1.0 / self.num_clients as f64);
            }
            Algorithm::Mimic => {
                for u in uploads {
                    sum.add_assign(&u.sent);
                    if let Some(m) = &self.mimic {
                        sum.add_assign(&m.corrections[u.client]);
                    }
                }
                sum.scale(1.0 / uploads.len() as f64);
            }
            Algorithm::FedAvg | Algorithm::FedProx | Algorithm::Scaffold => {
                for u in uploads {
                    sum.add_assign(&u.sent);
                }
                sum.scale(1.0 / uploads.len() as f64);
            }
        }
        sum.ensure_finite("global update")?;
        Ok(sum)
    }

    /// Apply `v_t` with learning rate `lr` and update the bookkeeping.
    pub fn commit(&mut self, uploads: &[Upload], update: ParamVector, lr: f64) -> Result<RoundResult> {
        self.check_uploads(uploads)?;
        update.ensure_len(self.dim(), "global update")?;
        let t = self.iteration;
        self.model.axpy(-lr, &update);
        self.model.ensure_finite("global model")?;
        match self.algorithm {
            Algorithm::Mimic => {
                if let Some(m) = self.mimic.as_mut() {
                    for u in uploads {
                        m.corrections[u.client] = update.sub(&u.local_update);
                        m.last_active[u.client] = Some(t);
                    }
                }
            }
            Algorithm::Mifa => {
                for u in uploads {
                    self.mifa[u.client] = Some(Memo { update: u.sent.clone(), iteration: t });
                }
            }
            Algorithm::Scaffold => {
                let s = self.scaffold.as_mut().expect("scaffold state");
                if s.variant == ScaffoldVariant::Persistent {
                    let mut server_delta = ParamVector::zeros(s.server.len());
                    for u in uploads {
                        let delta = u.control.as_ref().ok_or_else(|| {
                            Error::integrity(format!("client {} sent no control variate change", u.client))
                        })?;
                        s.clients[u.client].add_assign(delta);
                        server_delta.add_assign(delta);
                    }
                    s.server.axpy(1.0 / self.num_clients as f64, &server_delta);
                }
            }
            Algorithm::FedAvg | Algorithm::FedProx => {}
        }
        self.iteration += 1;
        Ok(RoundResult {
            iteration: t,
            update,
            lr,
            active: uploads.iter().map(|u| u.client).collect(),
            uploads: uploads.len() * self.algorithm.uploads_per_client(),
        })
    }

    /// An iteration in which nobody uploaded: the model is left unchanged.
    pub fn skip_round(&mut self) {
        self.iteration += 1;
    }

    fn round_for(&mut self, expected: Algorithm, uploads: &[Upload], lr: f64) -> Result<RoundResult> {
        if self.algorithm != expected {
            return Err(Error::config(format!("{expected} round requested on a {} server", self.algorithm)));
        }
        let v = self.aggregate(uploads)?;
        self.commit(uploads, v, lr)
    }

    /// `v_t = mean_{i∈S_t} ĝ_i`, `w_{t+1} = w_t − η_t v_t`. Also used for FedProx,
    /// whose difference lies entirely in local training.
    pub fn fedavg_round(&mut self, uploads: &[Upload], lr: f64) -> Result<RoundResult> {
        let expected = if self.algorithm == Algorithm::FedProx { Algorithm::FedProx } else { Algorithm::FedAvg };
        self.round_for(expected, uploads, lr)
    }

    /// Each received update is corrected by the client's stored `c_i`, the
    /// corrected updates are averaged, and afterwards every active client's
    /// correction becomes `v_t − ĝ_i(w_t)`.
    pub fn mimic_round(&mut self, uploads: &[Upload], lr: f64) -> Result<RoundResult> {
        self.round_for(Algorithm::Mimic, uploads, lr)
    }

    /// Memorize fresh updates, then average the memory over all clients.
    pub fn mifa_round(&mut self, uploads: &[Upload], lr: f64) -> Result<RoundResult> {
        self.round_for(Algorithm::Mifa, uploads, lr)
    }

    /// Aggregate SCAFFOLD uploads produced by
    /// [`crate::federation::Federation::scaffold_round`].
    pub fn scaffold_aggregate_round(&mut self, uploads: &[Upload], lr: f64) -> Result<RoundResult> {
        self.round_for(Algorithm::Scaffold, uploads, lr)
    }
}

/// Client-held MimiC corrections for the amortized deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientCorrections {
    corrections: Vec<ParamVector>,
}

impl ClientCorrections {
    pub fn new(num_clients: usize, dim: usize) -> Self {
        Self { corrections: vec![ParamVector::zeros(dim); num_clients] }
    }

    /// `v_t^i = ĝ_i + c_i`, computed on the client.
    pub fn correct(&self, client: usize, local_update: &ParamVector) -> ParamVector {
        local_update.add(&self.corrections[client])
    }

    /// After the broadcast of `v_t`, an active client stores `v_t − ĝ_i`.
    pub fn absorb(&mut self, client: usize, global_update: &ParamVector, local_update: &ParamVector) {
        self.corrections[client] = global_update.sub(local_update);
    }

    pub fn get(&self, client: usize) -> &ParamVector {
        &self.corrections[client]
    }
}

/// Mean computed as a sum of pre-scaled terms `Σ (v_i / n)`; the aggregation
/// path above sums first and divides once.
pub fn mean_of_scaled_terms(vectors: &[ParamVector]) -> Option<ParamVector> {
    let first = vectors.first()?;
    let inv = 1.0 / vectors.len() as f64;
    let mut acc = ParamVector::zeros(first.len());
    for v in vectors {
        acc.axpy(inv, v);
    }
    Some(acc)
}
