use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::losses::LossWeights;
use super::step::{DistillState, Gradients};
use crate::error::Result;
use crate::model_zoo::{NamedParam, NamedParamMut};
use crate::synth_data::LabeledClip;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub epsilon: f64,
    pub tolerance: f64,
    /// Magnitude below which errors are measured absolutely rather than
    /// relative to the gradient itself.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

impl GradCheckOptions {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    /// `teacher`, `student` or `projection`.
    pub component: String,
    pub group: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn text(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            out.push_str(&format!(
                "{:<10} {:<12} {:>6} scalars  max rel {:.3e}  max abs {:.3e}\n",
                g.component, g.group, g.scalars, g.max_rel_error, g.max_abs_error
            ));
        }
        out.push_str(&format!(
            "{}: max relative error {:.3e} (tolerance {:.1e})\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance
        ));
        out
    }
}

/// Redraws every parameter of teacher, student and projection from
/// `Normal(0, std)`.
///
/// Freshly built models have unit norm scales, zero biases and small weights,
/// so norm layers see nearly constant inputs and the loss is sharply curved;
/// a central difference at a fixed step is then dominated by truncation
/// error. A random, non-degenerate probe point also exercises the bias and
/// scale gradients that are trivial at initialization.
pub fn randomize_for_probe(state: &mut DistillState, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite positive std");
    for (_, access) in components() {
        for p in access(state) {
            p.param
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    state.clear_cache();
}

type Accessor = fn(&mut DistillState) -> Vec<NamedParamMut<'_>>;

fn components() -> [(&'static str, Accessor); 3] {
    [
        ("teacher", |s| s.teacher.model.params_mut()),
        ("student", |s| s.student.params_mut()),
        ("projection", |s| s.projection.params_mut()),
    ]
}

fn grads_of<'a>(grads: &'a Gradients, component: &str) -> Vec<NamedParam<'a>> {
    match component {
        "teacher" => grads.teacher.params(),
        "student" => grads.student.params(),
        _ => grads.projection.params(),
    }
}

/// Compares `analytic` with central finite differences of the weighted total
/// loss at every trainable scalar of `state`.
///
/// Parameters are restored bit-exactly after each probe.
pub fn check_gradients(
    state: &mut DistillState,
    batch: &[&LabeledClip],
    weights: &LossWeights,
    analytic: &Gradients,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let eps = options.epsilon;
    let mut groups: Vec<GroupError> = Vec::new();
    for (component, access) in components() {
        let grads = grads_of(analytic, component);
        let policy = state.teacher.policy().clone();
        let trainable: Vec<bool> = access(state)
            .iter()
            .map(|p| component != "teacher" || policy.is_trainable(&p.group))
            .collect();
        for (k, g) in grads.iter().enumerate() {
            if !trainable[k] {
                continue;
            }
            let idx = match groups
                .iter()
                .position(|e| e.component == component && e.group == g.group)
            {
                Some(i) => i,
                None => {
                    groups.push(GroupError {
                        component: component.into(),
                        group: g.group.clone(),
                        scalars: 0,
                        max_rel_error: 0.0,
                        max_abs_error: 0.0,
                    });
                    groups.len() - 1
                }
            };
            for i in 0..g.param.len() {
                let original = access(state)[k].param.data()[i];
                access(state)[k].param.data_mut()[i] = original + eps;
                let plus = state.batch_loss(batch, weights)?.total;
                access(state)[k].param.data_mut()[i] = original - eps;
                let minus = state.batch_loss(batch, weights)?.total;
                access(state)[k].param.data_mut()[i] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = g.param.data()[i];
                let entry = &mut groups[idx];
                entry.scalars += 1;
                entry.max_rel_error = entry.max_rel_error.max(options.relative_error(a, numeric));
                entry.max_abs_error = entry.max_abs_error.max((a - numeric).abs());
            }
        }
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= options.tolerance,
        groups,
        max_rel_error,
        tolerance: options.tolerance,
    })
}
