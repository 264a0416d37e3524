//! Command-line front end: model generation and I/O, gain synthesis,
//! closed-loop simulation, verification suites, and the synthesis-runtime
//! benchmark.
//!
//! Exit codes: 0 success, 2 validation/parse failure, 3 artifact mismatch,
//! 4 numerical/check failure.

use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use netlqr::baselines::{centralized_lqr, decoupled_check};
use netlqr::error::Error;
use netlqr::fileio::{self, RunManifest};
use netlqr::model::{
    min_symmetric_eigenvalue, random_model_with_costs, CostSampling, Dims, ModelSpec,
};
use netlqr::oracle::{exact_cost, exact_cost_enumerated, stationarity_check, LinearPolicy};
use netlqr::simulator::{monte_carlo_with_profile, simulate_episode_stream, write_trace_csv};
use netlqr::synthesis::synthesize;

#[derive(Parser)]
#[command(name = "netlqr", version, about = "Decentralized LQ control over lossy uplinks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random model file
    Generate {
        /// Number of subsystems
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// State dimension per subsystem
        #[arg(long, default_value_t = 3)]
        dx: usize,
        /// Action dimension (remote and each local controller)
        #[arg(long, default_value_t = 3)]
        du: usize,
        #[arg(long = "t-horizon", default_value_t = 1000)]
        t_horizon: usize,
        /// Entry range "lo,hi" for dynamics and cost generation
        #[arg(long = "entry-range", default_value = "0,20", value_parser = parse_range)]
        entry_range: (f64, f64),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cost sampling: "reject" (uniform entries, rejection until PD) or
        /// "gram" (R = G'G); default picks reject only for tiny stage dims
        #[arg(long = "cost-sampling")]
        cost_sampling: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a model file, validate it, and write the synthesized gains
    Synthesize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo rollout of a gains file against its model
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gains: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace CSV path; a run manifest is written next to it
        #[arg(long)]
        out: PathBuf,
        /// Cap on the number of episodes written to the CSV (all by default)
        #[arg(long = "trace-episodes")]
        trace_episodes: Option<usize>,
    },
    /// Run the cross-validation suites and emit a pass/fail report
    Verify {
        /// Verify this model file (default: the built-in scalar instance)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Instead of a file, verify randomly generated models with this
        /// many subsystems
        #[arg(long = "random-n")]
        random_n: Option<usize>,
        /// How many random models to generate
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 3)]
        dx: usize,
        #[arg(long, default_value_t = 3)]
        du: usize,
        #[arg(long = "t-horizon", default_value_t = 20)]
        t_horizon: usize,
        #[arg(long = "entry-range", default_value = "0,20", value_parser = parse_range)]
        entry_range: (f64, f64),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: corrupt one synthesized gain entry; the suite must
        /// catch it
        #[arg(long = "inject-gain-error", hide = true)]
        inject_gain_error: bool,
    },
    /// Time decentralized synthesis against centralized LQ synthesis
    Benchmark {
        #[arg(long = "n-list", default_value = "1,10,100", value_parser = parse_usize_list)]
        n_list: std::vec::Vec<usize>,
        #[arg(long, default_value_t = 3)]
        dx: usize,
        #[arg(long, default_value_t = 3)]
        du: usize,
        #[arg(long = "t-horizon", default_value_t = 1000)]
        t_horizon: usize,
        #[arg(long, default_value_t = 3)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "entry-range", default_value = "0,20", value_parser = parse_range)]
        entry_range: (f64, f64),
        /// Also time this many simulated episodes per trial
        #[arg(long = "simulate-episodes")]
        simulate_episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_range(text: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err("expected \"lo,hi\"".to_string());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = parts[1].trim().parse().map_err(|e| format!("{e}"))?;
    if lo >= hi {
        return Err("need lo < hi".to_string());
    }
    Ok((lo, hi))
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{e}")))
        .collect()
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_MISMATCH: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidModel(_) | Error::Format(_) | Error::Json(_) | Error::Io(_) => EXIT_VALIDATION,
        Error::ArtifactMismatch(_) => EXIT_MISMATCH,
        _ => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            if let Error::InvalidModel(violations) = &err {
                for v in violations {
                    eprintln!("  [{}] {}", v.code, v.message);
                }
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Generate {
            n,
            dx,
            du,
            t_horizon,
            entry_range,
            seed,
            cost_sampling,
            out,
        } => {
            let dims = Dims::new(vec![dx; n], vec![du; n + 1], t_horizon);
            let sampling = match cost_sampling.as_deref() {
                Some("reject") => Some(CostSampling::UniformRejection),
                Some("gram") => Some(CostSampling::GramUniform),
                Some(other) => {
                    return Err(Error::Format(format!(
                        "unknown cost sampling {other} (expected reject|gram)"
                    )))
                }
                None => None,
            };
            let model = match sampling {
                Some(s) => random_model_with_costs(&dims, entry_range, seed, s)?,
                None => netlqr::model::random_model(&dims, entry_range, seed)?,
            };
            fileio::save_model(&model, &out)?;
            println!("wrote {} (hash {})", out.display(), fileio::model_hash(&model));
            Ok(ExitCode::SUCCESS)
        }
        Command::Synthesize { model, out } => {
            let start = Instant::now();
            let spec = fileio::load_model(&model)?;
            spec.require_valid()?;
            let schedule = synthesize(&spec)?;
            let mut manifest = RunManifest::new(
                "synthesize",
                &schedule.model_hash,
                vec![],
                serde_json::json!({ "model": model.display().to_string() }),
            );
            manifest.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            fileio::save_gains(&schedule, Some(&manifest), &out)?;
            println!(
                "synthesized T = {} schedule for {} subsystems -> {}",
                schedule.dims.horizon,
                schedule.dims.n_subsystems(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            model,
            gains,
            episodes,
            seed,
            out,
            trace_episodes,
        } => {
            let start = Instant::now();
            let spec = fileio::load_model(&model)?;
            spec.require_valid()?;
            let schedule = fileio::load_gains(&gains)?;
            let hash = fileio::model_hash(&spec);
            if schedule.model_hash != hash {
                return Err(Error::ArtifactMismatch(format!(
                    "gains were synthesized from model {}, got {}",
                    schedule.model_hash, hash
                )));
            }
            let report = monte_carlo_with_profile(&spec, &schedule, episodes, seed)?;
            let traced = trace_episodes.unwrap_or(episodes).min(episodes);
            let traces = (0..traced as u64)
                .map(|i| simulate_episode_stream(&spec, &schedule, seed, i))
                .collect::<Result<Vec<_>, _>>()?;
            let mut csv = std::fs::File::create(&out)?;
            write_trace_csv(&mut csv, &traces)?;
            let mut manifest = RunManifest::new(
                "simulate",
                &hash,
                vec![seed],
                serde_json::json!({ "episodes": episodes, "traced": traced }),
            );
            manifest.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let manifest_path = out.with_extension("manifest.json");
            std::fs::write(
                &manifest_path,
                serde_json::to_string_pretty(&serde_json::json!({
                    "manifest": manifest,
                    "report": report,
                }))?,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            model,
            random_n,
            seeds,
            dx,
            du,
            t_horizon,
            entry_range,
            seed,
            out,
            inject_gain_error,
        } => {
            let models: Vec<(String, ModelSpec)> = match (model, random_n) {
                (Some(path), _) => vec![(path.display().to_string(), fileio::load_model(&path)?)],
                (None, Some(n)) => (0..seeds)
                    .map(|k| {
                        let dims = Dims::new(vec![dx; n], vec![du; n + 1], t_horizon);
                        random_model_with_costs(
                            &dims,
                            entry_range,
                            seed.wrapping_add(k),
                            CostSampling::GramUniform,
                        )
                        .map(|m| (format!("random(n={n}, seed={})", seed.wrapping_add(k)), m))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                (None, None) => vec![("builtin-scalar".to_string(), ModelSpec::scalar_reference())],
            };
            let report = run_verify(&models, inject_gain_error)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(path, &text)?;
            }
            println!("{text}");
            if report.pass {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(EXIT_NUMERICAL))
            }
        }
        Command::Benchmark {
            n_list,
            dx,
            du,
            t_horizon,
            trials,
            seed,
            entry_range,
            simulate_episodes,
            out,
        } => {
            assert!(!n_list.is_empty(), "n-list must not be empty");
            let start = Instant::now();
            let mut rows = Vec::new();
            println!("n,mode,trials,mean_seconds");
            for &n in &n_list {
                let dims = Dims::new(vec![dx; n], vec![du; n + 1], t_horizon);
                let mut dec = Vec::new();
                let mut cen = Vec::new();
                let mut sim = Vec::new();
                for trial in 0..trials {
                    let model = random_model_with_costs(
                        &dims,
                        entry_range,
                        seed.wrapping_add(trial),
                        CostSampling::GramUniform,
                    )?;
                    let t0 = Instant::now();
                    let schedule = synthesize(&model)?;
                    dec.push(t0.elapsed().as_secs_f64());
                    let t1 = Instant::now();
                    let _ = centralized_lqr(&model)?;
                    cen.push(t1.elapsed().as_secs_f64());
                    if let Some(m) = simulate_episodes {
                        let t2 = Instant::now();
                        let _ = netlqr::simulator::monte_carlo(&model, &schedule, m, seed)?;
                        sim.push(t2.elapsed().as_secs_f64());
                    }
                }
                let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
                for (mode, xs) in [("decentralized", &dec), ("centralized", &cen)] {
                    let line = format!("{n},{mode},{trials},{}", mean(xs));
                    println!("{line}");
                    rows.push(line);
                }
                if !sim.is_empty() {
                    let line = format!("{n},simulate,{trials},{}", mean(&sim));
                    println!("{line}");
                    rows.push(line);
                }
                eprintln!(
                    "# n = {n}: decentralized/centralized mean-time ratio {:.3}",
                    mean(&dec) / mean(&cen)
                );
            }
            let mut csv = String::from("n,mode,trials,mean_seconds\n");
            for row in &rows {
                csv.push_str(row);
                csv.push('\n');
            }
            std::fs::write(&out, csv)?;
            let mut manifest = RunManifest::new(
                "benchmark",
                "",
                vec![seed],
                serde_json::json!({
                    "n_list": n_list, "dx": dx, "du": du, "t_horizon": t_horizon,
                    "trials": trials, "entry_range": [entry_range.0, entry_range.1],
                }),
            );
            manifest.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            std::fs::write(
                out.with_extension("manifest.json"),
                serde_json::to_string_pretty(&manifest)?,
            )?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[derive(Serialize)]
struct CheckResult {
    model: String,
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Serialize)]
struct VerifyReport {
    pass: bool,
    checks: Vec<CheckResult>,
}

fn run_verify(models: &[(String, ModelSpec)], inject_gain_error: bool) -> Result<VerifyReport, Error> {
    let mut checks = Vec::new();
    for (label, model) in models {
        let mut push = |name: &str, pass: bool, detail: String| {
            checks.push(CheckResult {
                model: label.clone(),
                name: name.to_string(),
                pass,
                detail,
            });
        };

        let violations = model.validate();
        push(
            "validate",
            violations.is_empty(),
            format!("{} violations", violations.len()),
        );
        if !violations.is_empty() {
            continue;
        }

        let mut schedule = synthesize(model)?;
        if inject_gain_error {
            schedule.k[0][(0, 0)] += 0.05;
        }

        // PSD chain of the cost-to-go matrices
        let mut min_eig = f64::INFINITY;
        for t in 0..=model.dims.horizon + 1 {
            min_eig = min_eig.min(min_symmetric_eigenvalue(&schedule.p[t]));
            for n in 0..model.dims.n_subsystems() {
                min_eig = min_eig.min(min_symmetric_eigenvalue(&schedule.p_drop[n][t]));
            }
        }
        push("psd_chain", min_eig >= -1e-9, format!("min eigenvalue {min_eig:.3e}"));

        // always-active reduction: the common gains never depend on p
        let central = centralized_lqr(model)?;
        let mut gap = 0.0f64;
        for t in 0..=model.dims.horizon {
            gap = gap.max(
                (&schedule.k[t] - &central.k[t]).amax() / schedule.k[t].amax().max(1.0),
            );
        }
        push("centralized_reduction", gap <= 1e-10, format!("max gain gap {gap:.3e}"));

        let policy = LinearPolicy::from_schedule(&schedule);
        let oracle = exact_cost(model, &policy)?;
        let predicted = schedule.expected_total_cost(model)?;
        let rel = (oracle - predicted).abs() / predicted.abs().max(1.0);
        push(
            "value_oracle_identity",
            rel <= 1e-8,
            format!("oracle {oracle:.6e} vs value {predicted:.6e} (rel {rel:.3e})"),
        );

        if model.dims.n_subsystems() <= 3 {
            let joint = exact_cost_enumerated(model, &policy)?;
            let gap = (oracle - joint).abs() / joint.abs().max(1.0);
            push("oracle_factorization", gap <= 1e-10, format!("rel gap {gap:.3e}"));
        }

        let mc = monte_carlo_with_profile(model, &schedule, 2000, 31)?;
        let sigmas = if mc.stderr > 0.0 {
            (mc.mean - oracle).abs() / mc.stderr
        } else {
            0.0
        };
        push(
            "monte_carlo_consistency",
            sigmas <= 4.0,
            format!("mc {:.6e} vs oracle {oracle:.6e} ({sigmas:.2} sigma)", mc.mean),
        );

        let stat = stationarity_check(model, &schedule, 1e-4, 40, 17)?;
        push(
            "stationarity",
            stat.passes,
            format!(
                "min delta {:.3e}, max directional derivative {:.3e}",
                stat.min_delta_cost, stat.max_abs_directional_derivative
            ),
        );

        // estimator exactness on a few episodes
        let mut exact = true;
        for s in 0..5 {
            let tr = simulate_episode_stream(model, &schedule, s, 0)?;
            for t in 0..tr.states.len() {
                for n in 0..model.dims.n_subsystems() {
                    if tr.gammas[t][n] && tr.estimates[t][n] != tr.states[t][n] {
                        exact = false;
                    }
                }
            }
        }
        push("estimator_exactness", exact, "delivered states must match estimates".to_string());

        if model.dims.n_subsystems() >= 2 {
            if let Ok(report) = decoupled_check(model) {
                push("decoupled", report.pass, format!("max action gap {:.3e}", report.max_action_gap));
            }
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport { pass, checks })
}
