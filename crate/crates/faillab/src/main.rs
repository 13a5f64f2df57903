//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage/runtime error, 2 config error,
//! 3 run divergence, 4 check-suite failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use faillab::eval::TargetSpec;
use faillab::harness::checkpoint;
use faillab::harness::checks::run_check_suite;
use faillab::harness::config::{parse_config, ExperimentConfig};
use faillab::harness::runlog::{read_evals, RunStatus};
use faillab::harness::runner;

#[derive(Parser)]
#[command(
    name = "faillab",
    version,
    about = "Desk-scale flow-matching adversarial imitation learning lab"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training experiment from a TOML config
    Train {
        config: PathBuf,
        /// Continue from a checkpoint file instead of a cold start
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a target; prints a metric report as JSON
    Eval {
        checkpoint: PathBuf,
        /// TOML file holding a [target] table (an experiment config works)
        target: PathBuf,
        #[arg(long, default_value_t = 2048)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        n_proj: usize,
        /// Euler steps for policy sampling
        #[arg(long, default_value_t = 28)]
        steps: usize,
    },
    /// Run each config in its own process; aggregate a summary CSV
    Sweep {
        /// Config paths or simple `*` patterns
        configs: Vec<String>,
        #[arg(long, default_value = "sweep_summary.csv")]
        out: PathBuf,
    },
    /// Merge eval records from run logs into one long-format CSV on stdout
    Curves { runs: Vec<PathBuf> },
    /// Run the full invariant/grad-check suite
    Check,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match cli.cmd {
        Cmd::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Cmd::Eval {
            checkpoint,
            target,
            n,
            seed,
            n_proj,
            steps,
        } => cmd_eval(&checkpoint, &target, n, seed, n_proj, steps),
        Cmd::Sweep { configs, out } => cmd_sweep(&configs, &out),
        Cmd::Curves { runs } => cmd_curves(&runs),
        Cmd::Check => cmd_check(),
    }
}

fn cmd_train(config_path: &Path, resume: Option<&Path>) -> ExitCode {
    let cfg = match parse_config(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = match resume {
        Some(ckpt_path) => match checkpoint::load(ckpt_path) {
            Ok(ckpt) => runner::run_resumed(&cfg, ckpt, true),
            Err(e) => {
                eprintln!("cannot load checkpoint: {e}");
                return ExitCode::from(2);
            }
        },
        None => runner::run_experiment(&cfg),
    };
    match outcome {
        Ok(out) => {
            let dir = cfg.resolved_out_dir();
            match out.log.status {
                RunStatus::Completed => {
                    println!(
                        "completed {} steps; logs in {}",
                        out.final_state.step,
                        dir.display()
                    );
                    ExitCode::SUCCESS
                }
                RunStatus::Diverged => {
                    eprintln!(
                        "run diverged at step {}; partial logs in {}",
                        out.final_state.step,
                        dir.display()
                    );
                    ExitCode::from(3)
                }
                RunStatus::Interrupted => ExitCode::from(1),
            }
        }
        Err(faillab::Error::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_target(path: &Path) -> Result<TargetSpec, String> {
    let body = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let value: toml::Value = toml::from_str(&body).map_err(|e| e.to_string())?;
    let t = value
        .get("target")
        .cloned()
        .ok_or_else(|| "file has no [target] table".to_string())?;
    let spec: TargetSpec = t.try_into().map_err(|e| format!("bad target: {e}"))?;
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn cmd_eval(
    ckpt_path: &Path,
    target_path: &Path,
    n: usize,
    seed: u64,
    n_proj: usize,
    steps: usize,
) -> ExitCode {
    let ckpt = match checkpoint::load(ckpt_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cannot load checkpoint: {e}");
            return ExitCode::from(2);
        }
    };
    let target = match load_target(target_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match runner::evaluate_raw(
        &ckpt.policy,
        ckpt.disc.as_ref(),
        &target,
        n,
        n_proj,
        steps,
        seed,
        ckpt.step,
    ) {
        Ok(report) => match serde_json::to_string_pretty(&report) {
            Ok(body) => {
                println!("{body}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("serialization failed: {e}");
                ExitCode::from(1)
            }
        },
        Err(e) => {
            eprintln!("eval failed: {e}");
            ExitCode::from(1)
        }
    }
}

/// Expand a simple `prefix*suffix` pattern against its parent directory.
fn expand_pattern(pattern: &str) -> Vec<PathBuf> {
    if !pattern.contains('*') {
        return vec![PathBuf::from(pattern)];
    }
    let path = Path::new(pattern);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("*");
    let (prefix, suffix) = name.split_once('*').unwrap_or((name, ""));
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with(prefix) && n.ends_with(suffix))
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    out
}

fn cmd_sweep(patterns: &[String], out: &Path) -> ExitCode {
    let configs: Vec<PathBuf> = patterns.iter().flat_map(|p| expand_pattern(p)).collect();
    if configs.is_empty() {
        eprintln!("sweep: no configs matched");
        return ExitCode::from(1);
    }
    let exe = match std::env::current_exe() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("sweep: cannot locate executable: {e}");
            return ExitCode::from(1);
        }
    };
    // validate everything up front so a bad config fails the whole sweep early
    let mut parsed = Vec::new();
    for c in &configs {
        match parse_config(c) {
            Ok(cfg) => parsed.push((c.clone(), cfg)),
            Err(e) => {
                eprintln!("config error in {}: {e}", c.display());
                return ExitCode::from(2);
            }
        }
    }
    // isolated parallel child processes
    let mut children = Vec::new();
    for (path, _) in &parsed {
        let child = std::process::Command::new(&exe)
            .arg("train")
            .arg(path)
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::inherit())
            .spawn();
        children.push((path.clone(), child));
    }
    let mut any_diverged = false;
    let mut any_failed = false;
    let mut rows = Vec::new();
    for ((path, cfg), (_, child)) in parsed.iter().zip(children) {
        let code = match child {
            Ok(mut c) => c.wait().ok().and_then(|s| s.code()).unwrap_or(1),
            Err(e) => {
                eprintln!("sweep: failed to launch {}: {e}", path.display());
                any_failed = true;
                continue;
            }
        };
        if code == 3 {
            any_diverged = true;
        } else if code != 0 {
            any_failed = true;
        }
        rows.push(summary_row(path, cfg, code));
    }
    let mut csv = String::from(
        "config,method,seed,exit_code,final_step,sliced_wasserstein,energy_distance,coverage_min,disc_probe_accuracy\n",
    );
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    if let Err(e) = std::fs::write(out, csv) {
        eprintln!("sweep: cannot write summary: {e}");
        return ExitCode::from(1);
    }
    println!("sweep summary written to {}", out.display());
    if any_failed {
        ExitCode::from(1)
    } else if any_diverged {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn summary_row(path: &Path, cfg: &ExperimentConfig, code: i32) -> String {
    let dir = cfg.resolved_out_dir();
    let evals = read_evals(&dir.join("evals.jsonl")).unwrap_or_default();
    match evals.last() {
        Some(last) => {
            let cov_min = last
                .report
                .mode_coverage
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let cov = if cov_min.is_finite() {
                format!("{cov_min}")
            } else {
                String::new()
            };
            let probe = last
                .report
                .disc_probe_accuracy
                .map(|p| format!("{p}"))
                .unwrap_or_default();
            format!(
                "{},{},{},{},{},{},{},{},{}",
                path.display(),
                cfg.method.name(),
                cfg.seed,
                code,
                last.step,
                last.report.sliced_wasserstein,
                last.report.energy_distance,
                cov,
                probe
            )
        }
        None => format!(
            "{},{},{},{},,,,,",
            path.display(),
            cfg.method.name(),
            cfg.seed,
            code
        ),
    }
}

fn cmd_curves(runs: &[PathBuf]) -> ExitCode {
    if runs.is_empty() {
        eprintln!("curves: provide run directories or evals.jsonl paths");
        return ExitCode::from(1);
    }
    println!("run,step,sliced_wasserstein,energy_distance,coverage_min,disc_probe_accuracy,collapse");
    for run in runs {
        let path = if run.is_dir() {
            run.join("evals.jsonl")
        } else {
            run.clone()
        };
        let evals = match read_evals(&path) {
            Ok(e) => e,
            Err(e) => {
                eprintln!("curves: cannot read {}: {e}", path.display());
                return ExitCode::from(1);
            }
        };
        let label = run.display();
        for rec in evals {
            let cov_min = rec
                .report
                .mode_coverage
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let cov = if cov_min.is_finite() {
                format!("{cov_min}")
            } else {
                String::new()
            };
            let probe = rec
                .report
                .disc_probe_accuracy
                .map(|p| format!("{p}"))
                .unwrap_or_default();
            println!(
                "{},{},{},{},{},{},{}",
                label,
                rec.step,
                rec.report.sliced_wasserstein,
                rec.report.energy_distance,
                cov,
                probe,
                rec.report.collapse
            );
        }
    }
    ExitCode::SUCCESS
}

fn cmd_check() -> ExitCode {
    let results = run_check_suite();
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {} — {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} check(s) failed");
        ExitCode::from(4)
    } else {
        println!("all {} checks passed", results.len());
        ExitCode::SUCCESS
    }
}
