//! Multi-seed comparison of baseline and distilled students.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::commands::{
    distill_with_cache, load_dataset, train_baseline, train_teacher, RunRequest,
};
use super::config::{ExperimentConfig, Mode};
use crate::distillation::PrefixCache;
use crate::error::{Error, Result};

/// Test SRCC of the three students trained with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub seed: u64,
    pub baseline: f64,
    pub homologous: f64,
    pub heterogeneous: f64,
}

impl StudyRow {
    /// Distilled minus baseline SRCC of the ViT student.
    pub fn gain(&self) -> f64 {
        self.homologous - self.baseline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub teacher_seed: u64,
    pub teacher_srcc: f64,
    pub rows: Vec<StudyRow>,
    pub median_gain: f64,
    pub median_homologous: f64,
    pub median_heterogeneous: f64,
    pub wall_seconds: f64,
}

impl StudyReport {
    /// Median gain of distillation over the baseline is non-negative.
    pub fn gain_holds(&self) -> bool {
        self.median_gain >= 0.0
    }

    /// Homologous distillation beats heterogeneous distillation in median.
    pub fn ordering_holds(&self) -> bool {
        self.median_homologous >= self.median_heterogeneous
    }

    /// Seed-wise table followed by the medians.
    pub fn text(&self) -> String {
        let mut out = format!(
            "teacher (seed {}) test SRCC {:.4}\n",
            self.teacher_seed, self.teacher_srcc
        );
        let _ = writeln!(
            out,
            "{:>6}  {:>9}  {:>10}  {:>13}  {:>7}",
            "seed", "baseline", "homologous", "heterogeneous", "gain"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6}  {:>9.4}  {:>10.4}  {:>13.4}  {:>+7.4}",
                r.seed,
                r.baseline,
                r.homologous,
                r.heterogeneous,
                r.gain()
            );
        }
        let _ = writeln!(
            out,
            "{:>6}  {:>9}  {:>10.4}  {:>13.4}  {:>+7.4}",
            "median", "", self.median_homologous, self.median_heterogeneous, self.median_gain
        );
        let _ = writeln!(out, "wall clock {:.1} s", self.wall_seconds);
        out
    }
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of an empty sample");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn srcc_of(report: &crate::metrics::CorrelationReport) -> Result<f64> {
    report.srcc.ok_or_else(|| {
        Error::Config(format!(
            "{} has no defined test SRCC: {:?}",
            report.model, report.errors
        ))
    })
}

/// Trains one teacher, then per seed a baseline ViT student and students
/// distilled in both modes, all under `root`.
///
/// Seeds run on up to `available_parallelism` threads; every run is a pure
/// function of its seed, so the result does not depend on the thread count.
pub fn distillation_study(
    config: &ExperimentConfig,
    root: &Path,
    teacher_seed: u64,
    seeds: &[u64],
) -> Result<StudyReport> {
    if seeds.is_empty() {
        return Err(Error::Argument("the study needs at least one seed".into()));
    }
    let clock = Instant::now();
    let data = load_dataset(&config.data, root)?;
    let teacher = train_teacher(
        &RunRequest::new(config.clone(), root.to_path_buf(), teacher_seed)?,
        &data,
    )?;
    let teacher_srcc = srcc_of(&teacher.manifest.report)?;
    // every distill run shares the teacher's frozen prefix
    let cache = PrefixCache::default();

    let run_seed = |seed: u64| -> Result<StudyRow> {
        let request = RunRequest::new(config.clone(), root.to_path_buf(), seed)?;
        let base = train_baseline(&request, Mode::Homologous, &data)?;
        let hom = distill_with_cache(
            &request,
            Mode::Homologous,
            &teacher.checkpoint,
            Some(&base.manifest.report),
            &data,
            cache.clone(),
        )?;
        let het = distill_with_cache(
            &request,
            Mode::Heterogeneous,
            &teacher.checkpoint,
            None,
            &data,
            cache.clone(),
        )?;
        Ok(StudyRow {
            seed,
            baseline: srcc_of(&base.manifest.report)?,
            homologous: srcc_of(&hom.manifest.report)?,
            heterogeneous: srcc_of(&het.manifest.report)?,
        })
    };

    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(seeds.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<StudyRow>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = seeds.get(i) else { break };
                let row = run_seed(seed);
                results
                    .lock()
                    .expect("no thread panicked holding the lock")
                    .push((i, row));
            });
        }
    });
    let mut results = results
        .into_inner()
        .expect("no thread panicked holding the lock");
    results.sort_by_key(|(i, _)| *i);
    let rows = results
        .into_iter()
        .map(|(_, r)| r)
        .collect::<Result<Vec<_>>>()?;

    let gains: Vec<f64> = rows.iter().map(StudyRow::gain).collect();
    let hom: Vec<f64> = rows.iter().map(|r| r.homologous).collect();
    let het: Vec<f64> = rows.iter().map(|r| r.heterogeneous).collect();
    let report = StudyReport {
        teacher_seed,
        teacher_srcc,
        median_gain: median(&gains),
        median_homologous: median(&hom),
        median_heterogeneous: median(&het),
        rows,
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    let json = root.join("study.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(&json, e))?;
    let text = root.join("study.txt");
    std::fs::write(&text, report.text()).map_err(|e| Error::io(&text, e))?;
    Ok(report)
}
