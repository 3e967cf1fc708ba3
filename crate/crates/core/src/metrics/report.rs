use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Correlation of one model's predictions with ground truth on one split.
///
/// A metric is `None` when it is undefined (for example constant
/// predictions); the reason is kept in `errors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub model: String,
    pub params: usize,
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
    pub delta_plcc: Option<f64>,
    pub delta_srcc: Option<f64>,
    pub dataset: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

impl CorrelationReport {
    /// Sets deltas as `self - baseline` for each metric defined in both.
    pub fn with_baseline(mut self, baseline: &CorrelationReport) -> Self {
        self.delta_plcc = self.plcc.zip(baseline.plcc).map(|(a, b)| a - b);
        self.delta_srcc = self.srcc.zip(baseline.srcc).map(|(a, b)| a - b);
        self
    }
}

/// Formats a delta as `(↑0.071)` or `(↓0.012)`.
pub fn format_delta(delta: f64) -> String {
    let arrow = if delta < 0.0 { '↓' } else { '↑' };
    format!("({arrow}{:.3})", delta.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<CorrelationReport>,
    /// Indices of rows holding the best PLCC / SRCC within their dataset.
    pub best_plcc: Vec<usize>,
    pub best_srcc: Vec<usize>,
    /// Indices of rows holding the largest positive PLCC / SRCC gain.
    pub top_gain_plcc: Vec<usize>,
    pub top_gain_srcc: Vec<usize>,
    pub text: String,
}

impl ComparisonTable {
    pub fn records_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }
}

fn argmax_per_dataset(
    rows: &[CorrelationReport],
    key: impl Fn(&CorrelationReport) -> Option<f64>,
) -> Vec<usize> {
    let mut best: BTreeMap<&str, (f64, Vec<usize>)> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let Some(v) = key(r) else { continue };
        let entry = best
            .entry(&r.dataset)
            .or_insert((f64::NEG_INFINITY, Vec::new()));
        if v > entry.0 {
            *entry = (v, vec![i]);
        } else if v == entry.0 {
            entry.1.push(i);
        }
    }
    let mut out: Vec<usize> = best.into_values().flat_map(|(_, idx)| idx).collect();
    out.sort_unstable();
    out
}

/// Table in the layout of a method/params/PLCC/SRCC comparison.
///
/// `baselines` maps a row's model name to the model name of its
/// no-distillation baseline; mapped rows get deltas against the baseline row
/// of the same dataset. `*` marks the best value per dataset column and `^`
/// the largest positive gain.
pub fn comparison_table(
    reports: &[CorrelationReport],
    baselines: &BTreeMap<String, String>,
) -> Result<ComparisonTable> {
    let mut rows = reports.to_vec();
    for (name, base_name) in baselines {
        let targets: Vec<usize> = (0..rows.len())
            .filter(|&i| &rows[i].model == name)
            .collect();
        if targets.is_empty() {
            return Err(Error::Config(format!(
                "baseline map names unknown model {name:?}"
            )));
        }
        for i in targets {
            let base = reports
                .iter()
                .find(|r| &r.model == base_name && r.dataset == rows[i].dataset)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "baseline {base_name:?} for {name:?} not found on dataset {:?}",
                        rows[i].dataset
                    ))
                })?;
            rows[i] = rows[i].clone().with_baseline(base);
        }
    }

    let best_plcc = argmax_per_dataset(&rows, |r| r.plcc);
    let best_srcc = argmax_per_dataset(&rows, |r| r.srcc);
    let positive = |d: Option<f64>| d.filter(|v| *v > 0.0);
    let top_gain_plcc = argmax_per_dataset(&rows, |r| positive(r.delta_plcc));
    let top_gain_srcc = argmax_per_dataset(&rows, |r| positive(r.delta_srcc));

    let cell = |value: Option<f64>, delta: Option<f64>, best: bool, gain: bool| {
        let mut s = match value {
            Some(v) => format!("{v:.3}"),
            None => "n/a".to_string(),
        };
        if best {
            s.push('*');
        }
        if let Some(d) = delta {
            s.push(' ');
            s.push_str(&format_delta(d));
            if gain {
                s.push('^');
            }
        }
        s
    };

    let name_w = rows
        .iter()
        .map(|r| r.model.chars().count())
        .max()
        .unwrap_or(0)
        .max(6);
    let data_w = rows
        .iter()
        .map(|r| r.dataset.chars().count())
        .max()
        .unwrap_or(0)
        .max(7);
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<name_w$} | {:>9} | {:<data_w$} | {:<20} | {:<20}",
        "Method", "Params", "Dataset", "PLCC", "SRCC"
    );
    let _ = writeln!(text, "{}", "-".repeat(name_w + data_w + 62));
    for (i, r) in rows.iter().enumerate() {
        let plcc = cell(
            r.plcc,
            r.delta_plcc,
            best_plcc.contains(&i),
            top_gain_plcc.contains(&i),
        );
        let srcc = cell(
            r.srcc,
            r.delta_srcc,
            best_srcc.contains(&i),
            top_gain_srcc.contains(&i),
        );
        let _ = writeln!(
            text,
            "{:<name_w$} | {:>8.2}M | {:<data_w$} | {:<20} | {:<20}",
            r.model,
            r.params as f64 / 1e6,
            r.dataset,
            plcc,
            srcc
        );
    }
    let _ = writeln!(
        text,
        "* best per dataset column; ^ highest gain over baseline"
    );

    Ok(ComparisonTable {
        rows,
        best_plcc,
        best_srcc,
        top_gain_plcc,
        top_gain_srcc,
        text,
    })
}
