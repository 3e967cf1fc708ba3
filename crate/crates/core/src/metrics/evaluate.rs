use super::correlation::{plcc, srcc, ScorePairs};
use super::report::CorrelationReport;
use crate::error::{Error, Result};
use crate::model_zoo::{count_parameters, Model, VideoClip};
use crate::synth_data::LabeledClip;

/// Anything that scores clips.
pub trait QualityModel {
    fn predict(&self, clip: &VideoClip) -> Result<f64>;
    fn parameter_count(&self) -> usize;
}

impl QualityModel for Model {
    fn predict(&self, clip: &VideoClip) -> Result<f64> {
        Ok(self.forward(clip)?.1.score)
    }

    fn parameter_count(&self) -> usize {
        count_parameters(self).total
    }
}

/// Names attached to a report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalLabel {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
}

impl EvalLabel {
    pub fn new(model: impl Into<String>, dataset: impl Into<String>, seed: u64) -> Self {
        Self {
            model: model.into(),
            dataset: dataset.into(),
            seed,
        }
    }
}

/// Builds a report from raw scores. Undefined metrics are recorded in the
/// report rather than returned as errors; a constant ground truth is an error.
pub fn report_from_scores(
    label: &EvalLabel,
    params: usize,
    predicted: Vec<f64>,
    actual: Vec<f64>,
) -> Result<CorrelationReport> {
    if actual.iter().all(|&v| v == actual[0]) {
        return Err(Error::UndefinedCorrelation("actual"));
    }
    let pairs = ScorePairs::new(predicted, actual)?;
    let mut errors = Vec::new();
    let mut keep = |r: Result<f64>, metric: &str| match r {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("{metric}: {e}"));
            None
        }
    };
    let plcc = keep(plcc(&pairs), "plcc");
    let srcc = keep(srcc(&pairs), "srcc");
    Ok(CorrelationReport {
        model: label.model.clone(),
        params,
        plcc,
        srcc,
        delta_plcc: None,
        delta_srcc: None,
        dataset: label.dataset.clone(),
        seed: label.seed,
        errors,
    })
}

/// Scores every clip in index order and correlates with the labels.
pub fn evaluate_model<M: QualityModel + ?Sized>(
    model: &M,
    split: &[LabeledClip],
    label: &EvalLabel,
) -> Result<CorrelationReport> {
    if split.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty split".into()));
    }
    let predicted = split
        .iter()
        .map(|c| model.predict(&c.clip))
        .collect::<Result<Vec<_>>>()?;
    let actual = split.iter().map(|c| c.mos).collect();
    report_from_scores(label, model.parameter_count(), predicted, actual)
}
