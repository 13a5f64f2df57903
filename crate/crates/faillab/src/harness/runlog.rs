//! Run records: per-step metric rows (CSV) and periodic evaluation
//! snapshots (line-delimited JSON).
//!
//! The CSV schema is versioned by a leading comment line; every run with
//! the same (config, seed) produces byte-identical files. Floats are
//! written with Rust's shortest round-trip formatting, which is
//! deterministic.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::MetricReport;
use crate::Result;

/// Schema version for the step CSV; bump on breaking column changes.
pub const STEP_CSV_SCHEMA: u32 = 1;

const STEP_COLUMNS: &str = "step,disc_loss,gen_loss,cfm_anchor,reward_mean,reward_static_mean,kl,sigma_expert,sigma_policy,grad_norm_policy,grad_norm_disc,ratio_flags";

/// One training-step record. Fields that a method does not produce stay
/// `None` and serialize as empty CSV cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub disc_loss: Option<f64>,
    pub gen_loss: Option<f64>,
    pub cfm_anchor: Option<f64>,
    pub reward_mean: Option<f64>,
    pub reward_static_mean: Option<f64>,
    pub kl: Option<f64>,
    pub sigma_expert: Option<f64>,
    pub sigma_policy: Option<f64>,
    pub grad_norm_policy: Option<f64>,
    pub grad_norm_disc: Option<f64>,
    /// Count of ratio-exponent clamps this step (divergence guard hits).
    pub ratio_flags: u32,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            cell(self.disc_loss),
            cell(self.gen_loss),
            cell(self.cfm_anchor),
            cell(self.reward_mean),
            cell(self.reward_static_mean),
            cell(self.kl),
            cell(self.sigma_expert),
            cell(self.sigma_policy),
            cell(self.grad_norm_policy),
            cell(self.grad_norm_disc),
            self.ratio_flags
        );
        s
    }
}

/// One evaluation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Terminal status of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
    Interrupted,
}

/// Full in-memory run record. Persisted as `steps.csv`, `evals.jsonl`, and
/// `run.json` (header + status) under the run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLog {
    pub header: RunHeader,
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalRecord>,
    pub status: RunStatus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunHeader {
    pub method: String,
    pub seed: u64,
    pub code_version: String,
    /// Resolved config, round-trippable.
    pub config: toml::Value,
}

impl RunLog {
    pub fn new(header: RunHeader) -> Self {
        RunLog {
            header,
            steps: Vec::new(),
            evals: Vec::new(),
            status: RunStatus::Interrupted,
        }
    }

    /// Step indices must be strictly increasing.
    pub fn push_step(&mut self, m: StepMetrics) {
        if let Some(last) = self.steps.last() {
            assert!(m.step > last.step, "step indices must strictly increase");
        }
        self.steps.push(m);
    }

    pub fn push_eval(&mut self, e: EvalRecord) {
        self.evals.push(e);
    }
}

/// Streaming writer that flushes per record so an interrupted run leaves a
/// valid prefix on disk.
pub struct RunWriter {
    steps: std::io::BufWriter<std::fs::File>,
    evals: std::io::BufWriter<std::fs::File>,
    run_json: std::path::PathBuf,
    header: RunHeader,
}

impl RunWriter {
    pub fn create(dir: &Path, header: RunHeader) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut steps = std::io::BufWriter::new(std::fs::File::create(dir.join("steps.csv"))?);
        writeln!(steps, "# schema={STEP_CSV_SCHEMA}")?;
        writeln!(steps, "{STEP_COLUMNS}")?;
        steps.flush()?;
        let evals = std::io::BufWriter::new(std::fs::File::create(dir.join("evals.jsonl"))?);
        let w = RunWriter {
            steps,
            evals,
            run_json: dir.join("run.json"),
            header,
        };
        w.write_run_json(RunStatus::Interrupted)?;
        Ok(w)
    }

    pub fn write_step(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.steps, "{}", m.csv_row())?;
        self.steps.flush()?;
        Ok(())
    }

    pub fn write_eval(&mut self, e: &EvalRecord) -> Result<()> {
        writeln!(self.evals, "{}", serde_json::to_string(e)?)?;
        self.evals.flush()?;
        Ok(())
    }

    pub fn write_run_json(&self, status: RunStatus) -> Result<()> {
        #[derive(Serialize)]
        struct RunJson<'a> {
            header: &'a RunHeader,
            status: RunStatus,
        }
        let body = serde_json::to_string_pretty(&RunJson {
            header: &self.header,
            status,
        })?;
        std::fs::write(&self.run_json, body)?;
        Ok(())
    }

    pub fn finish(mut self, status: RunStatus) -> Result<()> {
        self.steps.flush()?;
        self.evals.flush()?;
        self.write_run_json(status)
    }
}

/// Read eval records back from an `evals.jsonl` file.
pub fn read_evals(path: &Path) -> Result<Vec<EvalRecord>> {
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}
