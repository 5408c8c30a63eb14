//! The per-trial iteration loop and the multi-seed experiment driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::Algorithm;
use crate::availability::{round_robin_schedule, static_prob_schedule, weighted_sample_schedule, AvailabilitySchedule};
use crate::data::{
    heterogeneity_stats, make_clustered_clients, make_synthetic_classification, partition_shards, Dataset,
    PartitionSpec,
};
use crate::diagnostics::{
    client_grads, evaluate, expected_update, metrics_csv, replay_updates, sample_variance, ErrorMode, RoundMetrics,
    RunSummary, TrialsSummary,
};
use crate::error::{Error, Result};
use crate::federation::Federation;
use crate::objectives::{global_loss, global_optimum, Objective};
use crate::param::ParamVector;
use crate::rng::{mix64, Purpose, RngContract};
use crate::schedules::{check_conditions, phi_k, ConditionParams, ConditionReport};

use super::config::{AvailabilityConfig, ExperimentConfig, TaskConfig};

const TEST_SALT: u64 = 0x7465_7374_5f73_6574;

/// Client objectives plus the held-out set and optimum, when they exist.
pub struct Task {
    pub objectives: Vec<Objective>,
    pub test: Option<Dataset>,
    pub optimal_loss: Option<f64>,
}

pub fn build_task(cfg: &ExperimentConfig, seed: u64) -> Result<Task> {
    let n = cfg.num_clients;
    match &cfg.task {
        TaskConfig::Quadratic { dim, points_per_client, spread, heterogeneity, means } => {
            let means = match means {
                Some(m) => m.clone(),
                None => {
                    let mut rng = RngContract::new(seed).stream(Purpose::Data, u64::MAX, 0, 0);
                    (0..n)
                        .map(|_| {
                            (0..*dim)
                                .map(|_| heterogeneity * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                                .collect()
                        })
                        .collect()
                }
            };
            let clients = make_clustered_clients(&means, *points_per_client, *spread, seed)?;
            let objectives: Vec<Objective> = clients.into_iter().map(|c| Objective::quadratic(Arc::new(c))).collect();
            let optimal_loss = match global_optimum(&objectives) {
                Some(w) => Some(global_loss(&objectives, &w)?),
                None => None,
            };
            Ok(Task { objectives, test: None, optimal_loss })
        }
        TaskConfig::Logistic { classes, per_class, features, separation, reg, test_per_class } => {
            let train = make_synthetic_classification(*classes, *per_class, *features, *separation, seed)?;
            let test = make_synthetic_classification(
                *classes,
                *test_per_class,
                *features,
                *separation,
                mix64(seed ^ TEST_SALT),
            )?;
            let spec = PartitionSpec::new(n, cfg.partition.shards_per_client, seed);
            let objectives = partition_shards(&train, &spec)?
                .into_iter()
                .map(|c| Objective::logistic(Arc::new(c), *classes, *reg))
                .collect::<Result<_>>()?;
            Ok(Task { objectives, test: Some(test), optimal_loss: None })
        }
        TaskConfig::Mlp { classes, per_class, features, separation, hidden, loss, test_per_class } => {
            let train = make_synthetic_classification(*classes, *per_class, *features, *separation, seed)?;
            let test = make_synthetic_classification(
                *classes,
                *test_per_class,
                *features,
                *separation,
                mix64(seed ^ TEST_SALT),
            )?;
            let spec = PartitionSpec::new(n, cfg.partition.shards_per_client, seed);
            let objectives = partition_shards(&train, &spec)?
                .into_iter()
                .map(|c| Objective::mlp(Arc::new(c), *hidden, *loss, *classes))
                .collect::<Result<_>>()?;
            Ok(Task { objectives, test: Some(test), optimal_loss: None })
        }
    }
}

/// Availability over `iterations` rounds.
pub fn build_schedule(cfg: &ExperimentConfig, seed: u64, iterations: usize) -> Result<AvailabilitySchedule> {
    let n = cfg.num_clients;
    match cfg.availability {
        AvailabilityConfig::Full => Ok(AvailabilitySchedule::full(n, iterations)),
        AvailabilityConfig::RoundRobin { tau_max } => round_robin_schedule(n, iterations, tau_max, seed),
        AvailabilityConfig::StaticProb { p, force_full_first } => {
            static_prob_schedule(n, iterations, p, seed, force_full_first)
        }
        AvailabilityConfig::Weighted { ratio, force_full_first } => {
            weighted_sample_schedule(n, iterations, ratio, seed, force_full_first)
        }
    }
}

pub fn initial_model(dim: usize, scale: f64, seed: u64) -> ParamVector {
    if scale == 0.0 {
        return ParamVector::zeros(dim);
    }
    let mut rng = RngContract::new(seed).stream(Purpose::Init, 0, 0, 0);
    ParamVector::from_vec(
        (0..dim).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>(),
    )
}

/// Step-size condition report for the schedule of one seed. The `|S_t|`
/// stream is taken over `T + 1` iterations so `ρ_{T−1}` is defined.
pub fn condition_report(
    cfg: &ExperimentConfig,
    task: &Task,
    schedule: &AvailabilitySchedule,
) -> Result<ConditionReport> {
    let counts = schedule.counts();
    let realized = cfg.lr.realize(&counts)?;
    let samples = task.objectives.iter().map(Objective::num_samples).min().unwrap_or(1);
    let local = cfg.local.resolve(samples, Algorithm::FedAvg)?;
    let smoothness = task.objectives.iter().map(Objective::smoothness).fold(0.0, f64::max);
    let tau_max = schedule.max_staleness().unwrap_or(schedule.iterations()).max(1);
    let params = ConditionParams {
        nu: cfg.diagnostics.nu,
        phi_k: phi_k(local.lr, smoothness, local.steps)?,
        tau_max,
        num_clients: cfg.num_clients,
        smoothness,
        local_lr: local.lr,
        local_steps: local.steps,
    };
    let mut report = check_conditions(&realized.etas, &counts, params)?;
    report.substituted = realized.substituted;
    Ok(report)
}

/// Result of one (algorithm, seed) trial. `rows` ends with a row that
/// evaluates `w_T` unless the trial failed.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rows: Vec<RoundMetrics>,
    pub summary: RunSummary,
    pub final_model: ParamVector,
    /// Largest per-client heterogeneity at `w_0` and `w_T`.
    pub kappa_max: f64,
}

pub fn run_trial(cfg: &ExperimentConfig, algorithm: Algorithm, seed: u64) -> Result<TrialOutput> {
    let task = build_task(cfg, seed)?;
    let schedule = build_schedule(cfg, seed, cfg.rounds)?;
    run_trial_with(cfg, algorithm, seed, &task, &schedule)
}

/// Run a trial on a prebuilt task and schedule. Numerical blow-ups end the
/// trial early and are recorded in the summary; other errors propagate.
pub fn run_trial_with(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    seed: u64,
    task: &Task,
    schedule: &AvailabilitySchedule,
) -> Result<TrialOutput> {
    let objectives = &task.objectives;
    let dim = objectives.first().ok_or_else(|| Error::config("task without clients"))?.dim();
    let samples = objectives.iter().map(Objective::num_samples).min().unwrap_or(1);
    let local = cfg.local.resolve(samples, algorithm)?;
    let smoothness = objectives.iter().map(Objective::smoothness).fold(0.0, f64::max);
    local.check_local_rate(smoothness);
    let w0 = initial_model(dim, cfg.init_scale, seed);
    let fed = Federation::new(objectives.clone(), w0.clone(), algorithm, local, RngContract::new(seed))?
        .with_scaffold_variant(cfg.scaffold.variant)
        .with_correction_site(cfg.mimic.correction_site);
    let mut rows = Vec::with_capacity(cfg.rounds + 1);
    let (fed, outcome) = simulate(cfg, task, schedule, fed, &mut rows);
    let final_model = fed.model().clone();
    let summary = match outcome {
        Ok(()) => RunSummary::from_metrics(algorithm, seed, &rows, task.optimal_loss)?,
        Err(e @ Error::Numerical(_)) => {
            warn!("{algorithm} seed {seed} aborted: {e}");
            RunSummary::failed(algorithm, seed, rows.len(), e.to_string())
        }
        Err(e) => return Err(e),
    };
    let probes: Vec<ParamVector> = if final_model.is_finite() { vec![w0, final_model.clone()] } else { vec![w0] };
    let kappa_max = heterogeneity_stats(objectives, &probes)?.into_iter().fold(0.0, f64::max);
    Ok(TrialOutput { algorithm, seed, rows, summary, final_model, kappa_max })
}

fn simulate(
    cfg: &ExperimentConfig,
    task: &Task,
    schedule: &AvailabilitySchedule,
    mut fed: Federation,
    rows: &mut Vec<RoundMetrics>,
) -> (Federation, Result<()>) {
    let result = simulate_inner(cfg, task, schedule, &mut fed, rows);
    (fed, result)
}

fn simulate_inner(
    cfg: &ExperimentConfig,
    task: &Task,
    schedule: &AvailabilitySchedule,
    fed: &mut Federation,
    rows: &mut Vec<RoundMetrics>,
) -> Result<()> {
    let objectives = &task.objectives;
    let rounds = cfg.rounds;
    if schedule.iterations() < rounds || schedule.num_clients() != objectives.len() {
        return Err(Error::config("availability schedule does not cover the run"));
    }
    let counts: Vec<usize> = schedule.counts();
    let etas = cfg.lr.realize(&counts[..rounds])?.etas;
    let base_local_lr = fed.local_config().lr;
    let diag = cfg.diagnostics;
    let mut uploads = 0;
    for t in 0..=rounds {
        let w = fed.model().clone();
        let grads = client_grads(objectives, &w)?;
        let central = ParamVector::mean(&grads).expect("nonempty federation");
        let loss = global_loss(objectives, &w)?;
        let accuracy = match &task.test {
            Some(test) if t % diag.eval_every == 0 || t == rounds => evaluate(&objectives[0], &w, test)?,
            _ => None,
        };
        let mut row = RoundMetrics {
            t,
            loss,
            grad_norm2: central.norm_sq(),
            error: None,
            gamma: None,
            phi_hat: None,
            n_active: 0,
            uploads,
            accuracy,
            eta: None,
        };
        if t == rounds {
            check_row(&row)?;
            rows.push(row);
            break;
        }
        let active = schedule.active(t);
        let eta = etas[t];
        row.n_active = active.len();
        row.eta = Some(eta);
        if cfg.local.decay_local_lr {
            fed.set_local_lr(base_local_lr * eta / etas[0]);
        }
        if !active.is_empty() {
            row.gamma = Some(crate::diagnostics::objective_bias_from_grads(active, &grads, &central)?);
            let replays = if diag.phi {
                diag.phi_replays
            } else if diag.error_mode == ErrorMode::MonteCarlo {
                diag.error_replays
            } else {
                0
            };
            let replayed = if replays > 0 { replay_updates(fed, active, replays)? } else { Vec::new() };
            if diag.phi {
                row.phi_hat = Some(sample_variance(&replayed).mean);
            }
            row.error = match diag.error_mode {
                ErrorMode::Off => None,
                ErrorMode::FullBatch => Some(expected_update(fed, active)?.dist_sq(&central)),
                ErrorMode::MonteCarlo => Some(ParamVector::mean(&replayed).expect("replays").dist_sq(&central)),
            };
        }
        check_row(&row)?;
        rows.push(row);
        if let Some(result) = fed.step(active, eta)? {
            uploads += result.uploads;
        }
    }
    Ok(())
}

fn check_row(row: &RoundMetrics) -> Result<()> {
    if row.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!("non-finite metrics at iteration {}", row.t)))
    }
}

/// Output file name for one trial.
pub fn csv_name(algorithm: Algorithm, scenario: &str, seed: u64) -> String {
    format!("{}_{}_seed{}.csv", algorithm.name(), scenario, seed)
}

fn conditions_name(scenario: &str, seed: u64) -> String {
    format!("conditions_{scenario}_seed{seed}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentInfo {
    pub name: String,
    pub task: String,
    pub scenario: String,
    pub num_clients: usize,
    pub rounds: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub csv: String,
    pub kappa_max: f64,
    #[serde(flatten)]
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub seed: u64,
    pub csv: String,
    pub passed: bool,
    pub rho_pass: bool,
    pub step_pass: bool,
    pub first_failure: Option<usize>,
    pub nu: f64,
    pub nu_admissible: bool,
    pub min_rho_gap: f64,
    pub phi_k: f64,
    pub c_k: f64,
    pub fedavg_ok: bool,
    pub tau_max: usize,
    pub form_discrepancies: Vec<usize>,
    pub substituted: Vec<usize>,
}

impl ConditionEntry {
    pub fn new(seed: u64, csv: String, r: &ConditionReport) -> Self {
        Self {
            seed,
            csv,
            passed: r.passed(),
            rho_pass: r.rho_pass,
            step_pass: r.step_pass,
            first_failure: r.first_failure(),
            nu: r.params.nu,
            nu_admissible: r.nu_admissible,
            min_rho_gap: r.min_rho_gap,
            phi_k: r.params.phi_k,
            c_k: r.c_k,
            fedavg_ok: r.fedavg_ok,
            tau_max: r.params.tau_max,
            form_discrepancies: r.form_discrepancies.clone(),
            substituted: r.substituted.clone(),
        }
    }
}

/// Contents of `summary.txt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub experiment: ExperimentInfo,
    #[serde(default)]
    pub aggregate: Vec<TrialsSummary>,
    #[serde(default)]
    pub run: Vec<RunEntry>,
    #[serde(default)]
    pub conditions: Vec<ConditionEntry>,
}

impl SummaryFile {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("cannot serialize summary: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }
}

pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub trials: Vec<TrialOutput>,
    pub summary: SummaryFile,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> usize {
        self.trials.iter().filter(|t| t.summary.failure.is_some()).count()
    }
}

/// Run every (algorithm, seed) pair, write per-trial CSVs, per-seed condition
/// reports and `summary.txt` into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| run_experiment_inner(cfg, out_dir))
    } else {
        run_experiment_inner(cfg, out_dir)
    }
}

fn run_experiment_inner(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(out_dir)?;
    let scenario = cfg.availability.name();
    let per_seed: Vec<(Task, AvailabilitySchedule, ConditionReport)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let task = build_task(cfg, seed)?;
            let schedule = build_schedule(cfg, seed, cfg.rounds + 1)?;
            let report = condition_report(cfg, &task, &schedule)?;
            Ok((task, schedule, report))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, Algorithm)> =
        cfg.algorithms.iter().flat_map(|&a| (0..cfg.seeds.len()).map(move |k| (k, a))).collect();
    let trials: Vec<TrialOutput> = pairs
        .par_iter()
        .map(|&(k, a)| {
            let (task, schedule, _) = &per_seed[k];
            run_trial_with(cfg, a, cfg.seeds[k], task, schedule)
        })
        .collect::<Result<_>>()?;

    let mut runs = Vec::with_capacity(trials.len());
    for trial in &trials {
        let csv = csv_name(trial.algorithm, scenario, trial.seed);
        fs::write(out_dir.join(&csv), metrics_csv(&trial.rows))?;
        runs.push(RunEntry { csv, kappa_max: trial.kappa_max, summary: trial.summary.clone() });
    }
    let mut conditions = Vec::with_capacity(per_seed.len());
    for (k, (_, _, report)) in per_seed.iter().enumerate() {
        let csv = conditions_name(scenario, cfg.seeds[k]);
        fs::write(out_dir.join(&csv), report.to_csv())?;
        conditions.push(ConditionEntry::new(cfg.seeds[k], csv, report));
    }
    let aggregate = cfg
        .algorithms
        .iter()
        .map(|&a| {
            let mine: Vec<RunSummary> = trials.iter().filter(|t| t.algorithm == a).map(|t| t.summary.clone()).collect();
            TrialsSummary::from_runs(a, &mine)
        })
        .collect();
    let summary = SummaryFile {
        experiment: ExperimentInfo {
            name: cfg.name.clone().unwrap_or_else(|| "experiment".into()),
            task: cfg.task.kind_name().into(),
            scenario: scenario.into(),
            num_clients: cfg.num_clients,
            rounds: cfg.rounds,
            seeds: cfg.seeds.clone(),
        },
        aggregate,
        run: runs,
        conditions,
    };
    fs::write(out_dir.join("summary.txt"), summary.to_toml()?)?;
    info!("wrote {} trials to {}", trials.len(), out_dir.display());
    Ok(ExperimentOutcome { out_dir: out_dir.to_path_buf(), trials, summary })
}
