//! Client availability: which clients upload in each iteration.
//!
//! Three generators model the dropout patterns used in the experiments:
//! periodic round-robin activity with bounded staleness, independent
//! activation with a fixed probability, and weighted sampling of a fixed
//! number of clients per round. Iteration 0 is full participation unless
//! explicitly disabled.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngContract};

/// Per-iteration active sets `S_t` (sorted client ids) over `T` iterations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvailabilitySchedule {
    num_clients: usize,
    active: Vec<Vec<usize>>,
}

impl AvailabilitySchedule {
    /// Build from explicit active sets. Sets are sorted and deduplicated.
    pub fn from_sets(num_clients: usize, mut active: Vec<Vec<usize>>) -> Result<Self> {
        if num_clients == 0 {
            return Err(Error::config("schedule needs at least one client"));
        }
        for (t, set) in active.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if let Some(&bad) = set.iter().find(|&&i| i >= num_clients) {
                return Err(Error::config(format!("iteration {t}: client {bad} out of range")));
            }
        }
        Ok(Self { num_clients, active })
    }

    /// Every client active in every iteration.
    pub fn full(num_clients: usize, iterations: usize) -> Self {
        Self { num_clients, active: vec![(0..num_clients).collect(); iterations] }
    }

    /// Client `i` active at `t` iff `t % periods[i] == 0`.
    pub fn from_periods(periods: &[usize], iterations: usize) -> Result<Self> {
        if periods.is_empty() || periods.contains(&0) {
            return Err(Error::config("periods must be positive and nonempty"));
        }
        let active = (0..iterations).map(|t| (0..periods.len()).filter(|&i| t % periods[i] == 0).collect()).collect();
        Ok(Self { num_clients: periods.len(), active })
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn iterations(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self, t: usize) -> &[usize] {
        &self.active[t]
    }

    pub fn active_sets(&self) -> &[Vec<usize>] {
        &self.active
    }

    pub fn is_active(&self, t: usize, i: usize) -> bool {
        self.active[t].binary_search(&i).is_ok()
    }

    /// `|S_t|` for every iteration.
    pub fn counts(&self) -> Vec<usize> {
        self.active.iter().map(Vec::len).collect()
    }

    /// Last iteration `t' < t` with `i ∈ S_t'`.
    pub fn last_active_before(&self, t: usize, i: usize) -> Option<usize> {
        (0..t.min(self.active.len())).rev().find(|&s| self.is_active(s, i))
    }

    /// Staleness `τ(t, i) = t − max{t' < t : i ∈ S_t'}`; zero at `t = 0`.
    pub fn staleness(&self, t: usize, i: usize) -> Result<usize> {
        if i >= self.num_clients || t >= self.active.len() {
            return Err(Error::config(format!("staleness({t}, {i}) out of range")));
        }
        if t == 0 {
            return Ok(0);
        }
        self.last_active_before(t, i)
            .map(|s| t - s)
            .ok_or_else(|| Error::integrity(format!("client {i} has no activity before iteration {t}")))
    }

    /// Largest staleness of any active client over the whole schedule, found
    /// in one forward pass. Errors if some client appears before its first
    /// recorded activity (only possible when iteration 0 is not full).
    pub fn max_staleness(&self) -> Result<usize> {
        let mut last: Vec<Option<usize>> = vec![None; self.num_clients];
        let mut worst = 0;
        for (t, set) in self.active.iter().enumerate() {
            for &i in set {
                if t > 0 {
                    match last[i] {
                        Some(s) => worst = worst.max(t - s),
                        None => {
                            return Err(Error::integrity(format!("client {i} has no activity before iteration {t}")))
                        }
                    }
                }
                last[i] = Some(t);
            }
        }
        Ok(worst)
    }

    /// One line per iteration with comma-separated active client ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for set in &self.active {
            for (k, i) in set.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{i}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, num_clients: usize) -> Result<Self> {
        let active = text
            .lines()
            .enumerate()
            .map(|(lineno, line)| {
                let line = line.trim();
                if line.is_empty() {
                    return Ok(Vec::new());
                }
                line.split(',')
                    .map(|tok| {
                        tok.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Parse(format!("line {}: {tok:?}: {e}", lineno + 1)))
                    })
                    .collect()
            })
            .collect::<Result<Vec<Vec<usize>>>>()?;
        Self::from_sets(num_clients, active)
    }
}

/// Each client draws `u_i` uniformly from `0..=tau_max` and is active every
/// `max(1, u_i)` iterations, starting at iteration 0.
pub fn round_robin_schedule(
    num_clients: usize,
    iterations: usize,
    tau_max: usize,
    seed: u64,
) -> Result<AvailabilitySchedule> {
    AvailabilitySchedule::from_periods(&round_robin_periods(num_clients, tau_max, seed)?, iterations)
}

/// The per-client periods drawn by [`round_robin_schedule`].
pub fn round_robin_periods(num_clients: usize, tau_max: usize, seed: u64) -> Result<Vec<usize>> {
    if tau_max < 1 {
        return Err(Error::config("tau_max must be at least 1"));
    }
    if num_clients == 0 {
        return Err(Error::config("schedule needs at least one client"));
    }
    let mut rng = RngContract::new(seed).stream(Purpose::Availability, 1, 0, 0);
    Ok((0..num_clients).map(|_| rng.random_range(0..=tau_max).max(1)).collect())
}

/// Client `i` active at `t ≥ 1` iff its uniform draw `r_t^i ≤ p`.
pub fn static_prob_schedule(
    num_clients: usize,
    iterations: usize,
    p: f64,
    seed: u64,
    force_full_first: bool,
) -> Result<AvailabilitySchedule> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config(format!("activation probability {p} not in (0, 1]")));
    }
    if num_clients == 0 {
        return Err(Error::config("schedule needs at least one client"));
    }
    let contract = RngContract::new(seed);
    let active = (0..iterations)
        .map(|t| {
            if t == 0 && force_full_first {
                return (0..num_clients).collect();
            }
            let mut rng = contract.stream(Purpose::Availability, 2, t as u64, 0);
            (0..num_clients).filter(|_| rng.random::<f64>() <= p).collect()
        })
        .collect();
    Ok(AvailabilitySchedule { num_clients, active })
}

/// Number of clients selected per round by [`weighted_sample_schedule`].
pub fn weighted_sample_size(num_clients: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("participation ratio {ratio} not in (0, 1]")));
    }
    let k = (ratio * num_clients as f64).round() as usize;
    if k == 0 || k > num_clients {
        return Err(Error::config(format!(
            "round({ratio} x {num_clients}) = {k} is not a valid number of active clients"
        )));
    }
    Ok(k)
}

/// Each round, every client draws a weight uniform on `[1, 10]` and
/// `round(ratio × N)` clients are picked by weighted sampling without
/// replacement.
pub fn weighted_sample_schedule(
    num_clients: usize,
    iterations: usize,
    ratio: f64,
    seed: u64,
    force_full_first: bool,
) -> Result<AvailabilitySchedule> {
    let k = weighted_sample_size(num_clients, ratio)?;
    let contract = RngContract::new(seed);
    let active = (0..iterations)
        .map(|t| {
            if t == 0 && force_full_first {
                return (0..num_clients).collect();
            }
            let mut rng = contract.stream(Purpose::Availability, 3, t as u64, 0);
            let weights: Vec<f64> = (0..num_clients).map(|_| rng.random_range(1.0..=10.0)).collect();
            let mut chosen = weighted_without_replacement(&weights, k, &mut rng);
            chosen.sort_unstable();
            chosen
        })
        .collect();
    Ok(AvailabilitySchedule { num_clients, active })
}

/// Sequential weighted draws: each pick is proportional to the weights of
/// the items still available.
pub fn weighted_without_replacement<R: Rng + ?Sized>(weights: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<(usize, f64)> = weights.iter().copied().enumerate().collect();
    let mut total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && !remaining.is_empty() {
        let mut target = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (pos, &(_, w)) in remaining.iter().enumerate() {
            if target < w {
                pick = pos;
                break;
            }
            target -= w;
        }
        let (idx, w) = remaining.remove(pick);
        total -= w;
        out.push(idx);
    }
    out
}
