//! Acceptance criteria. Runs as a plain binary (no libtest harness) and
//! prints one PASS/FAIL line per criterion; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mimic_sim::aggregation::Algorithm;
use mimic_sim::availability::{
    round_robin_schedule, static_prob_schedule, weighted_sample_schedule, AvailabilitySchedule,
};
use mimic_sim::data::{heterogeneity_stats, make_clustered_clients, make_synthetic_classification, ClientDataset};
use mimic_sim::diagnostics::phi_estimate;
use mimic_sim::harness::config::ExperimentConfig;
use mimic_sim::harness::runner::{build_task, run_trial_with};
use mimic_sim::harness::{compare_runs, load_traces, run_experiment};
use mimic_sim::objectives::{global_optimum, mean_and_stderr, MlpLoss, Objective};
use mimic_sim::rng::Purpose;
use mimic_sim::schedules::{
    admissible_nu, check_conditions, lemma6_feasible_c, lemma6_schedule, phi_k, ConditionParams,
};
use mimic_sim::{Federation, LocalConfig, ParamVector, RngContract};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn quadratic_config(n: usize, rounds: usize, availability: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
num_clients = {n}
rounds = {rounds}
algorithms = ["mimic"]
seeds = [1]
init_scale = 1.0
[task]
kind = "quadratic"
dim = 3
points_per_client = 4
heterogeneity = 2.0
[local]
steps = 1
lr = 0.05
batch_size = 4
[availability]
{availability}
[lr]
kind = "constant"
lr = 0.5
{extra}"#
    );
    ExperimentConfig::from_toml(&text).expect("valid config")
}

/// MimiC's gradient-estimation error is zero on quadratics whatever the
/// schedule, once every client has reported once.
fn central_update_mimicry() -> Outcome {
    let scenarios = [
        "scenario = \"full\"",
        "scenario = \"round_robin\"\ntau_max = 5",
        "scenario = \"static_prob\"\np = 0.3",
        "scenario = \"weighted\"\nratio = 0.4",
    ];
    let mut worst = 0.0f64;
    let mut measured = 0;
    for scenario in scenarios {
        let cfg = quadratic_config(10, 100, scenario, "");
        for seed in 1..=3 {
            let task = build_task(&cfg, seed).map_err(|e| e.to_string())?;
            let schedule =
                mimic_sim::harness::runner::build_schedule(&cfg, seed, cfg.rounds).map_err(|e| e.to_string())?;
            let out = run_trial_with(&cfg, Algorithm::Mimic, seed, &task, &schedule).map_err(|e| e.to_string())?;
            for r in &out.rows {
                if let Some(e) = r.error {
                    worst = worst.max(e);
                    measured += 1;
                }
            }
        }
    }
    check(
        worst <= 1e-10 && measured > 0,
        format!("max E_t = {worst:.3e} over {measured} iterations, 4 schedules x 3 seeds"),
    )
}

/// Two groups of quadratic clients with opposite optima; group B reports only
/// every tenth iteration.
fn fedavg_bias_vs_mimic() -> Outcome {
    let n = 10;
    let rounds = 2000;
    let means: Vec<String> = (0..n).map(|i| if i < 5 { "[1.0]".into() } else { "[-1.0]".into() }).collect();
    let text = format!(
        r#"
num_clients = {n}
rounds = {rounds}
algorithms = ["mimic", "fedavg"]
seeds = [1]
init_scale = 1.0
[task]
kind = "quadratic"
dim = 1
points_per_client = 2
means = [{}]
[local]
steps = 1
lr = 0.1
batch_size = 2
[availability]
scenario = "full"
[lr]
kind = "lemma6"
c = 0.5
beta = 10.0
"#,
        means.join(", ")
    );
    let cfg = ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?;
    let periods: Vec<usize> = (0..n).map(|i| if i < 5 { 1 } else { 10 }).collect();
    let schedule = AvailabilitySchedule::from_periods(&periods, rounds).map_err(|e| e.to_string())?;
    let task = build_task(&cfg, 1).map_err(|e| e.to_string())?;
    let star = global_optimum(&task.objectives).ok_or("no closed-form optimum")?;
    let kappa = heterogeneity_stats(&task.objectives, &[star.clone(), ParamVector::from_vec(vec![3.0])])
        .map_err(|e| e.to_string())?
        .into_iter()
        .fold(0.0, f64::max);
    let mimic = run_trial_with(&cfg, Algorithm::Mimic, 1, &task, &schedule).map_err(|e| e.to_string())?;
    let fedavg = run_trial_with(&cfg, Algorithm::FedAvg, 1, &task, &schedule).map_err(|e| e.to_string())?;
    let dist_mimic = mimic.final_model.dist(&star);
    let dist_fedavg = fedavg.final_model.dist(&star);

    let a_only = |t: usize| !t.is_multiple_of(10);
    let mut fedavg_min_error = f64::INFINITY;
    let mut fedavg_gap = 0.0f64;
    for r in fedavg.rows.iter().filter(|r| r.eta.is_some() && a_only(r.t)) {
        let (e, g) = (r.error.ok_or("missing E_t")?, r.gamma.ok_or("missing gamma_t")?);
        fedavg_min_error = fedavg_min_error.min(e);
        fedavg_gap = fedavg_gap.max((e - g).abs() / g);
    }
    let mimic_max_error = mimic.rows.iter().filter_map(|r| r.error).fold(0.0, f64::max);
    let mimic_min_gamma =
        mimic.rows.iter().filter(|r| a_only(r.t)).filter_map(|r| r.gamma).fold(f64::INFINITY, f64::min);
    let ok = dist_mimic <= 1e-3
        && dist_fedavg >= 0.05
        && fedavg_min_error >= 0.5 * kappa * kappa
        && fedavg_gap <= 1e-9
        && mimic_max_error <= 1e-10
        && mimic_min_gamma >= 0.5 * kappa * kappa;
    check(
        ok,
        format!(
            "|w_T-w*|: mimic {dist_mimic:.2e}, fedavg {dist_fedavg:.3}; fedavg min E_t on A-only rounds {fedavg_min_error:.3} \
             (0.5 kappa^2 = {:.3}, max |E_t-gamma_t|/gamma_t {fedavg_gap:.1e}); mimic max E_t {mimic_max_error:.1e} \
             with min gamma_t {mimic_min_gamma:.3}",
            0.5 * kappa * kappa
        ),
    )
}

fn variance_bound() -> Outcome {
    let n = 10;
    let batch = 2;
    let means: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 - 4.5, 0.5 * i as f64]).collect();
    let clients = make_clustered_clients(&means, 10, 1.5, 7).map_err(|e| e.to_string())?;
    let objs: Vec<Objective> = clients.into_iter().map(|c| Objective::quadratic(Arc::new(c))).collect();
    let sigma2 = objs.iter().map(|o| o.noise_variance(batch).unwrap()).fold(0.0, f64::max);
    let all: Vec<usize> = (0..n).collect();
    let mut lines = Vec::new();
    let mut ok = true;
    for k in [1, 5] {
        for s in [1, 5, 10] {
            let local = LocalConfig::new(k, 0.05, batch);
            let mut fed = Federation::new(
                objs.clone(),
                ParamVector::from_vec(vec![2.0, -1.0]),
                Algorithm::Mimic,
                local,
                RngContract::new(11),
            )
            .map_err(|e| e.to_string())?;
            for _ in 0..3 {
                fed.step(&all, 0.3).map_err(|e| e.to_string())?;
            }
            let est = phi_estimate(&fed, &all[..s], 1000).map_err(|e| e.to_string())?;
            let bound = sigma2 / (s * k) as f64;
            let pass = est.mean <= bound + 3.0 * est.std_err;
            ok &= pass;
            lines.push(format!("|S|={s} K={k}: {:.4} <= {bound:.4}{}", est.mean, if pass { "" } else { " VIOLATED" }));
        }
    }
    check(ok, format!("sigma^2 = {sigma2:.4}; {}", lines.join("; ")))
}

fn schedule_conditions() -> Outcome {
    let horizon = 10_000;
    let (local_lr, smoothness, steps) = (0.01, 1.0, 5);
    let phi = phi_k(local_lr, smoothness, steps).map_err(|e| e.to_string())?;
    let mut failures = Vec::new();
    let mut cells = 0;
    for beta in [10.0, 100.0] {
        for n in [10, 30] {
            for tau in [5, 20] {
                let schedule = round_robin_schedule(n, horizon + 2, tau, 1).map_err(|e| e.to_string())?;
                let counts = schedule.counts();
                let measured_tau = schedule.max_staleness().map_err(|e| e.to_string())?;
                let probe = lemma6_schedule(1.0, beta, &counts).map_err(|e| e.to_string())?;
                let nu = admissible_nu(&probe.etas, &counts).ok_or("no admissible nu")?;
                let c = 0.999
                    * lemma6_feasible_c(horizon + 1, beta, n, tau, smoothness, phi, nu).map_err(|e| e.to_string())?;
                let etas = lemma6_schedule(c, beta, &counts).map_err(|e| e.to_string())?.etas;
                let params = ConditionParams {
                    nu,
                    phi_k: phi,
                    tau_max: tau,
                    num_clients: n,
                    smoothness,
                    local_lr,
                    local_steps: steps,
                };
                let report = check_conditions(&etas, &counts, params).map_err(|e| e.to_string())?;
                cells += 1;
                if !(report.passed()
                    && report.nu_admissible
                    && measured_tau <= tau
                    && report.iterations.len() == horizon + 1)
                {
                    failures.push(format!("beta={beta} N={n} tau={tau} first failure {:?}", report.first_failure()));
                }
            }
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() { format!("{cells} grid cells pass for t <= {horizon}") } else { failures.join("; ") },
    )
}

fn logistic_clients(n: usize, classes: usize, seed: u64) -> Vec<Objective> {
    let ds = make_synthetic_classification(classes, 2 * n, 3, 1.5, seed).unwrap();
    mimic_sim::data::partition_shards(&ds, &mimic_sim::PartitionSpec::new(n, 2, seed))
        .unwrap()
        .into_iter()
        .map(|c| Objective::logistic(Arc::new(c), classes, 0.01).unwrap())
        .collect()
}

fn reduction_equivalences() -> Outcome {
    let quads: Vec<Objective> =
        make_clustered_clients(&[vec![1.0, 2.0], vec![-3.0, 0.0], vec![0.5, -1.0], vec![2.0, 2.0]], 4, 1.0, 3)
            .unwrap()
            .into_iter()
            .map(|c| Objective::quadratic(Arc::new(c)))
            .collect();
    let mut worst = 0.0f64;
    for objs in [logistic_clients(6, 4, 2), quads] {
        let n = objs.len();
        let dim = objs[0].dim();
        let all: Vec<usize> = (0..n).collect();
        let batch = objs.iter().map(Objective::num_samples).max().unwrap();
        let mut feds: Vec<Federation> = Algorithm::ALL
            .iter()
            .map(|&alg| {
                let local =
                    LocalConfig::new(1, 0.05, batch).with_prox(if alg == Algorithm::FedProx { 0.5 } else { 0.0 });
                Federation::new(objs.clone(), ParamVector::filled(dim, 0.2), alg, local, RngContract::new(5)).unwrap()
            })
            .collect();
        for _ in 0..200 {
            for fed in feds.iter_mut() {
                fed.step(&all, 0.5).map_err(|e| e.to_string())?;
            }
            for a in 0..feds.len() {
                for b in a + 1..feds.len() {
                    worst = worst.max(feds[a].model().max_abs_diff(feds[b].model()));
                }
            }
        }
    }
    check(
        worst <= 1e-10,
        format!("max pairwise deviation {worst:.2e} over 200 iterations (5 algorithms, logistic and quadratic)"),
    )
}

fn client(rows: Vec<(f64, Vec<f64>)>) -> Arc<ClientDataset> {
    let dim = rows[0].1.len();
    Arc::new(ClientDataset::new(0, mimic_sim::Dataset::from_rows(dim, rows).unwrap()).unwrap())
}

fn classification(classes: usize, per_class: usize, d: usize, seed: u64) -> Arc<ClientDataset> {
    Arc::new(ClientDataset::new(0, make_synthetic_classification(classes, per_class, d, 2.0, seed).unwrap()).unwrap())
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut with_last = combinations(n - 1, k - 1);
    with_last.iter_mut().for_each(|c| c.push(n - 1));
    let mut out = combinations(n - 1, k);
    out.extend(with_last);
    out
}

fn gradient_correctness() -> Outcome {
    let mut rng = RngContract::new(21).stream(Purpose::Probe, 0, 0, 0);
    let mut randn = |len: usize, scale: f64| -> ParamVector {
        ParamVector::from_vec((0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
    };
    let quad_rows: Vec<(f64, Vec<f64>)> =
        (0..7).map(|j| (0.0, vec![j as f64 * 0.7 - 2.0, (j * j) as f64 * 0.1])).collect();
    let build = |per_class: usize, seed: u64| -> Vec<(&'static str, Objective)> {
        vec![
            (
                "quadratic",
                Objective::quadratic(client(quad_rows.iter().cycle().take(per_class * 2).cloned().collect())),
            ),
            ("logistic/binary", Objective::logistic(classification(2, per_class, 3, seed), 2, 0.05).unwrap()),
            (
                "logistic/softmax",
                Objective::logistic(classification(4, per_class.div_ceil(2), 3, seed), 4, 0.01).unwrap(),
            ),
            (
                "mlp/cross-entropy",
                Objective::mlp(classification(3, per_class.div_ceil(2), 2, seed), 4, MlpLoss::CrossEntropy, 3).unwrap(),
            ),
            ("mlp/squared", Objective::mlp(classification(2, per_class, 2, seed), 3, MlpLoss::Squared, 2).unwrap()),
        ]
    };
    let mut report = Vec::new();
    let mut ok = true;

    // finite differences
    let mut worst_fd = 0.0f64;
    for (_, obj) in build(6, 1) {
        for _ in 0..100 {
            let w = randn(obj.dim(), 0.7);
            let g = obj.full_grad(&w).unwrap();
            let h = 1e-5;
            let fd: Vec<f64> = (0..w.len())
                .map(|k| {
                    let (mut up, mut down) = (w.clone(), w.clone());
                    up.as_mut_slice()[k] += h;
                    down.as_mut_slice()[k] -= h;
                    (obj.full_loss(&up).unwrap() - obj.full_loss(&down).unwrap()) / (2.0 * h)
                })
                .collect();
            worst_fd = worst_fd.max(g.dist(&ParamVector::from_vec(fd)) / g.norm().max(1e-8));
        }
    }
    ok &= worst_fd <= 1e-5;
    report.push(format!("finite differences: worst relative error {worst_fd:.1e} (5 objectives x 100 probes)"));

    // exhaustive enumeration on small datasets
    let mut worst_enum = 0.0f64;
    for (name, obj) in build(2, 2) {
        let n = obj.num_samples();
        if n > 8 {
            return Err(format!("{name} has {n} samples, too many to enumerate"));
        }
        let w = randn(obj.dim(), 0.5);
        let full = obj.full_grad(&w).unwrap();
        for b in 1..=n {
            let grads: Vec<ParamVector> = combinations(n, b).iter().map(|c| obj.stoch_grad(&w, c).unwrap()).collect();
            worst_enum = worst_enum.max(ParamVector::mean(&grads).unwrap().max_abs_diff(&full));
        }
    }
    ok &= worst_enum <= 1e-12;
    report.push(format!("exhaustive batches: max deviation {worst_enum:.1e}"));

    // Monte Carlo along a fixed random direction
    let mut worst_z = 0.0f64;
    for (_, obj) in build(15, 3) {
        let w = randn(obj.dim(), 0.5);
        let u = randn(obj.dim(), 1.0);
        let target = obj.full_grad(&w).unwrap().dot(&u);
        let mut batch_rng = RngContract::new(22).stream(Purpose::Probe, 1, obj.dim() as u64, 0);
        let samples: Vec<f64> = (0..20_000)
            .map(|_| {
                let batch = obj.sample_batch(4, &mut batch_rng);
                obj.stoch_grad(&w, &batch).unwrap().dot(&u)
            })
            .collect();
        let est = mean_and_stderr(&samples);
        worst_z = worst_z.max((est.mean - target).abs() / est.std_err.max(1e-300));
    }
    ok &= worst_z <= 3.0;
    report.push(format!("Monte Carlo: worst |z| {worst_z:.2}"));
    check(ok, report.join("; "))
}

const ORDERING_CONFIG: &str = r#"
name = "ordering"
num_clients = 30
rounds = 200
algorithms = ["mimic", "mifa", "fedavg", "scaffold"]
seeds = [1, 2, 3]
[task]
kind = "logistic"
classes = 10
per_class = 60
features = 2
separation = 3.0
reg = 0.001
test_per_class = 100
[partition]
shards_per_client = 2
[local]
steps = 1
lr = 0.1
batch_size = 10
[availability]
scenario = "static_prob"
p = 0.1
[lr]
kind = "exponential"
initial = 1.0
decay = 0.99
[diagnostics]
error_mode = "off"
eval_every = 1
"#;

fn algorithm_ordering() -> Outcome {
    let cfg = ExperimentConfig::from_toml(ORDERING_CONFIG).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_experiment(&cfg, dir.path()).map_err(|e| e.to_string())?;
    let traces = load_traces(&[&dir.path().join("summary.txt")]).map_err(|e| e.to_string())?;
    let cmp = compare_runs(&traces).map_err(|e| e.to_string())?;
    let acc: BTreeMap<&str, (f64, f64)> = cmp
        .table
        .iter()
        .map(|r| r.accuracy.map(|a| (r.label.as_str(), (a.mean, a.std))))
        .collect::<Option<_>>()
        .ok_or("missing accuracy")?;
    let beats = |a: &str, b: &str| {
        let ((ma, sa), (mb, sb)) = (acc[a], acc[b]);
        let margin = ma - mb;
        (margin > sa.max(sb), format!("{a}-{b} {margin:+.4} (std {:.4})", sa.max(sb)))
    };
    let pairs = [beats("mimic", "mifa"), beats("mifa", "fedavg"), beats("mimic", "scaffold")];
    let summary: Vec<String> = acc.iter().map(|(k, (m, s))| format!("{k} {m:.4}±{s:.4}")).collect();
    let detail: Vec<String> = pairs.iter().map(|(ok, d)| format!("{d}{}", if *ok { "" } else { " NOT MET" })).collect();
    check(pairs.iter().all(|p| p.0), format!("accuracy {}; {}", summary.join(", "), detail.join("; ")))
}

fn availability_contracts() -> Outcome {
    let mut report = Vec::new();
    let mut ok = true;
    let mut worst_ratio = 0.0f64;
    for tau in [1, 5, 20] {
        for seed in 1..=5 {
            let s = round_robin_schedule(30, 5000, tau, seed).map_err(|e| e.to_string())?;
            let measured = s.max_staleness().map_err(|e| e.to_string())?;
            ok &= measured <= tau;
            worst_ratio = worst_ratio.max(measured as f64 / tau as f64);
        }
    }
    report.push(format!("round robin: max staleness / tau_max = {worst_ratio:.2}"));

    for ratio in [0.1, 0.5, 0.8] {
        let s = weighted_sample_schedule(30, 2000, ratio, 1, true).map_err(|e| e.to_string())?;
        let k = (ratio * 30.0f64).round() as usize;
        let exact = (1..2000).all(|t| s.active(t).len() == k);
        ok &= exact;
        report.push(format!("weighted P={ratio}: |S_t| = {k} {}", if exact { "always" } else { "VIOLATED" }));
    }

    let (p, t_max) = (0.1, 2000);
    let s = static_prob_schedule(30, t_max, p, 1, true).map_err(|e| e.to_string())?;
    let rounds = (t_max - 1) as f64;
    let band = 3.0 * (p * (1.0 - p) / rounds).sqrt();
    let freqs: Vec<f64> = (0..30).map(|i| (1..t_max).filter(|&t| s.is_active(t, i)).count() as f64 / rounds).collect();
    let outside = freqs.iter().filter(|f| (*f - p).abs() > band).count();
    ok &= outside == 0;
    let (lo, hi) = freqs.iter().fold((1.0f64, 0.0f64), |(lo, hi), &f| (lo.min(f), hi.max(f)));
    report.push(format!("static p=0.1: frequencies in [{lo:.4}, {hi:.4}], band {p}±{band:.4}, {outside} outside"));
    check(ok, report.join("; "))
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

const DETERMINISM_CONFIG: &str = r#"
num_clients = 8
rounds = 40
algorithms = ["mimic", "mifa", "fedavg", "fedprox", "scaffold"]
seeds = [1, 2]
init_scale = 0.5
[task]
kind = "mlp"
classes = 4
per_class = 8
features = 3
separation = 2.0
hidden = 4
test_per_class = 10
[local]
steps = 3
lr = 0.05
batch_size = 2
prox_mu = 0.1
[availability]
scenario = "static_prob"
p = 0.4
[lr]
kind = "exponential"
initial = 0.5
decay = 0.99
[diagnostics]
error_mode = "monte_carlo"
phi = true
phi_replays = 10
"#;

fn determinism() -> Outcome {
    let quad = quadratic_config(
        6,
        60,
        "scenario = \"round_robin\"\ntau_max = 4",
        "[diagnostics]\nerror_mode = \"monte_carlo\"\nerror_replays = 5",
    );
    let mlp = ExperimentConfig::from_toml(DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let mut files = 0;
    for base in [mlp, quad] {
        let mut outputs = Vec::new();
        for threads in [0, 0, 1, 4] {
            let mut cfg = base.clone();
            cfg.threads = threads;
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            run_experiment(&cfg, dir.path()).map_err(|e| e.to_string())?;
            outputs.push(dir_bytes(dir.path()));
        }
        if outputs.iter().any(|o| o != &outputs[0]) {
            return Err("outputs differ between invocations or thread counts".into());
        }
        files += outputs[0].len();
    }
    Ok(format!("{files} files byte-identical across 2 invocations and 1 vs 4 threads"))
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "central-update mimicry", limit: Duration::from_secs(1), run: central_update_mimicry },
        Criterion {
            id: 2,
            name: "fedavg bias vs mimic correction",
            limit: Duration::from_secs(30),
            run: fedavg_bias_vs_mimic,
        },
        Criterion { id: 3, name: "variance bound", limit: Duration::from_secs(60), run: variance_bound },
        Criterion { id: 4, name: "schedule conditions", limit: Duration::from_secs(5), run: schedule_conditions },
        Criterion {
            id: 5,
            name: "reduction equivalences",
            limit: Duration::from_secs(60),
            run: reduction_equivalences,
        },
        Criterion { id: 6, name: "gradient correctness", limit: Duration::from_secs(60), run: gradient_correctness },
        Criterion {
            id: 7,
            name: "algorithm ordering at matched budget",
            limit: Duration::from_secs(300),
            run: algorithm_ordering,
        },
        Criterion {
            id: 8,
            name: "availability contracts",
            limit: Duration::from_secs(60),
            run: availability_contracts,
        },
        Criterion { id: 9, name: "determinism", limit: Duration::from_secs(120), run: determinism },
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; too slow (limit {:?})", c.limit)),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "{} [{}] {} ({:.2}s): {}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criterion(s) failed");
        ExitCode::FAILURE
    }
}
