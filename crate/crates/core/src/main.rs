use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mimic_sim::harness::config::ExperimentConfig;
use mimic_sim::harness::runner::{build_schedule, build_task, condition_report};
use mimic_sim::harness::{compare_runs, load_traces, run_experiment};
use mimic_sim::objectives::Objective;
use mimic_sim::schedules::{lemma6_feasible_c, LrSchedule};
use mimic_sim::{Error, Result};

#[derive(Parser)]
#[command(name = "mimic-sim", version, about = "Federated learning under client dropouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every algorithm and seed of an experiment config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        seeds: SeedArgs,
        /// Output directory (default: config `out_dir`, else `$MIMIC_SIM_OUT/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "MIMIC_SIM_OUT", default_value = "runs", hide_env_values = true)]
        out_root: PathBuf,
    },
    /// Rank finished runs at a matched upload budget.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
    /// Check the step-size conditions of a config's learning-rate schedule.
    CheckSchedule {
        config: PathBuf,
        #[command(flatten)]
        seeds: SeedArgs,
        /// Also write the per-iteration report as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the availability schedule (one line of client ids per iteration).
    DumpAvailability {
        config: PathBuf,
        #[command(flatten)]
        seeds: SeedArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SeedArgs {
    /// Replace the configured seeds with `S, S+1, ...`.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Number of trials (seeds) to run.
    #[arg(long)]
    trials: Option<usize>,
}

impl SeedArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let count = self.trials.unwrap_or(if self.seed_override.is_some() { 1 } else { cfg.seeds.len() });
        if count == 0 {
            return Err(Error::config("--trials must be at least 1"));
        }
        if let Some(s) = self.seed_override {
            cfg.seeds = (0..count as u64).map(|k| s.wrapping_add(k)).collect();
        } else {
            let mut next = cfg.seeds.iter().max().map_or(1, |m| m.wrapping_add(1));
            cfg.seeds.truncate(count);
            while cfg.seeds.len() < count {
                cfg.seeds.push(next);
                next = next.wrapping_add(1);
            }
        }
        Ok(())
    }
}

fn load(path: &Path, seeds: &SeedArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    seeds.apply(&mut cfg)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, seeds, out, out_root } => {
            let cfg = load(&config, &seeds)?;
            let dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| {
                out_root.join(cfg.name.clone().unwrap_or_else(|| {
                    config.file_stem().map_or("experiment".into(), |s| s.to_string_lossy().into_owned())
                }))
            });
            let outcome = run_experiment(&cfg, &dir)?;
            for agg in &outcome.summary.aggregate {
                let fmt = |m: Option<mimic_sim::diagnostics::MeanStd>| {
                    m.map_or("-".to_string(), |m| format!("{:.6} ± {:.6}", m.mean, m.std))
                };
                println!(
                    "{:<9} loss {}  acc {}  failures {}/{}",
                    agg.algorithm,
                    fmt(agg.final_loss),
                    fmt(agg.final_accuracy),
                    agg.failures,
                    agg.trials
                );
            }
            println!("outputs in {}", outcome.out_dir.display());
            if outcome.failures() > 0 {
                eprintln!("{} trial(s) aborted on numerical failure", outcome.failures());
                return Ok(ExitCode::from(2));
            }
        }
        Command::Compare { summaries } => {
            let paths: Vec<&Path> = summaries.iter().map(PathBuf::as_path).collect();
            let traces = load_traces(&paths)?;
            print!("{}", compare_runs(&traces)?.render());
        }
        Command::CheckSchedule { config, seeds, out } => {
            let cfg = load(&config, &seeds)?;
            for &seed in &cfg.seeds {
                let task = build_task(&cfg, seed)?;
                let schedule = build_schedule(&cfg, seed, cfg.rounds + 1)?;
                let report = condition_report(&cfg, &task, &schedule)?;
                println!(
                    "seed {seed}: {}  rho>1 {}  step {}  first failure {:?}  nu {} (admissible {}, min rho-1 {:.3e})  phi_K {:.6}  C_K {:.6}  tau_max {}",
                    if report.passed() { "PASS" } else { "FAIL" },
                    report.rho_pass,
                    report.step_pass,
                    report.first_failure(),
                    report.params.nu,
                    report.nu_admissible,
                    report.min_rho_gap,
                    report.params.phi_k,
                    report.c_k,
                    report.params.tau_max,
                );
                if !report.form_discrepancies.is_empty() {
                    println!("  forms disagree at {} iteration(s)", report.form_discrepancies.len());
                }
                if !report.substituted.is_empty() {
                    println!("  empty rounds with substituted rate: {:?}", report.substituted);
                }
                if let LrSchedule::Lemma6 { beta, .. } = cfg.lr {
                    let smoothness = task.objectives.iter().map(Objective::smoothness).fold(0.0, f64::max);
                    let c = lemma6_feasible_c(
                        cfg.rounds,
                        beta,
                        cfg.num_clients,
                        report.params.tau_max,
                        smoothness,
                        report.params.phi_k,
                        report.params.nu,
                    )?;
                    println!("  largest feasible lemma6 c for beta {beta}: {c:.6e}");
                }
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join(format!("conditions_seed{seed}.csv")), report.to_csv())?;
                }
            }
        }
        Command::DumpAvailability { config, seeds, out } => {
            let cfg = load(&config, &seeds)?;
            let seed = cfg.seeds[0];
            let text = build_schedule(&cfg, seed, cfg.rounds)?.to_text();
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
