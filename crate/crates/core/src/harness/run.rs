//! Per-run logs: the step-wise loss log, periodic evaluations and the final
//! run manifest.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunKind;
use crate::distillation::LossBreakdown;
use crate::error::{Error, Result};
use crate::metrics::CorrelationReport;

pub const LOSS_LOG: &str = "losses.jsonl";
pub const EVAL_LOG: &str = "evals.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

/// Loss of one step, measured before its update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub breakdown: LossBreakdown,
}

/// Test-split evaluation after `step` completed updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub report: CorrelationReport,
}

/// Wall-clock facts about a run. Kept apart from everything else in the
/// manifest, which is a pure function of config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_s: f64,
    pub seconds: f64,
    /// Steps this invocation ran; smaller than `steps` after a resume.
    pub steps_this_invocation: usize,
}

/// Written as `report.json` when a run finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: RunKind,
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub losses: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
    /// Final test-split report; carries deltas when a baseline was given.
    pub report: CorrelationReport,
    pub wall_clock: WallClock,
}

impl RunManifest {
    pub fn text(&self) -> String {
        let r = &self.report;
        let metric = |v: Option<f64>, d: Option<f64>| match (v, d) {
            (Some(v), Some(d)) => format!("{v:.4} {}", crate::metrics::format_delta(d)),
            (Some(v), None) => format!("{v:.4}"),
            (None, _) => "undefined".into(),
        };
        let mut out = format!(
            "run       {}\nmodel     {}\nseed      {}\nsteps     {}\nparams    {} ({:.3}M)\ndataset   {}\nPLCC      {}\nSRCC      {}\n",
            self.kind.dir_name(self.seed),
            r.model,
            self.seed,
            self.steps,
            r.params,
            r.params as f64 / 1e6,
            r.dataset,
            metric(r.plcc, r.delta_plcc),
            metric(r.srcc, r.delta_srcc),
        );
        for e in &r.errors {
            out.push_str(&format!("note      {e}\n"));
        }
        if let Some(last) = self.losses.last() {
            let b = last.breakdown;
            out.push_str(&format!(
                "last loss step {}: total {:.5} (teacher {:.5}, student {:.5}, feature {:.5})\n",
                last.step, b.total, b.teacher_l2, b.student_l2, b.feature_smooth_l1
            ));
        }
        for e in &self.evals {
            let f = |v: Option<f64>| v.map_or("undefined".into(), |v| format!("{v:.4}"));
            out.push_str(&format!(
                "eval step {:>5}: PLCC {} SRCC {}\n",
                e.step,
                f(e.report.plcc),
                f(e.report.srcc)
            ));
        }
        out.push_str(&format!("wall clock {:.1} s\n", self.wall_clock.seconds));
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = dir.join(REPORT_JSON);
        std::fs::write(&json, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json, e))?;
        let text = dir.join(REPORT_TEXT);
        std::fs::write(&text, self.text()).map_err(|e| Error::io(&text, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Checks that `records` are numbered `0, 1, 2, ...` with no gap.
pub fn validate_loss_log(records: &[LossRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.step != i {
            return Err(Error::Checkpoint(format!(
                "loss log entry {i} has step {}; steps must be 0, 1, 2, ... without gaps",
                r.step
            )));
        }
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Rewrites `path` with exactly `records`, one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends one line, flushing so a crash loses at most the current step.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}
