use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model_zoo::{NamedParam, NamedParamMut};

/// Adam with decoupled weight decay.
///
/// Decay applies only to tensors whose name ends in `.weight` (dense
/// matrices); biases, norm scales and positional tables are not decayed.
/// Frozen tensors are never visited, so they keep their exact bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed update count, used for bias correction.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Starts a new update; every [`AdamW::update`] until the next call shares
    /// its bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates the trainable tensors of one component. `params` and `grads`
    /// must list the same tensors in the same order; moment keys are
    /// `"{prefix}/{name}"`.
    pub fn update(
        &mut self,
        prefix: &str,
        params: Vec<NamedParamMut<'_>>,
        grads: Vec<NamedParam<'_>>,
        is_trainable: impl Fn(&str) -> bool,
        lr: f64,
    ) {
        assert!(self.step > 0, "begin_step must precede update");
        assert_eq!(
            params.len(),
            grads.len(),
            "gradient buffer does not mirror parameters"
        );
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (p, g) in params.into_iter().zip(grads) {
            debug_assert_eq!(p.name, g.name);
            if !is_trainable(&p.group) {
                continue;
            }
            let decay = if p.name.ends_with(".weight") {
                self.weight_decay
            } else {
                0.0
            };
            let n = p.param.len();
            let slot = self
                .moments
                .entry(format!("{prefix}/{}", p.name))
                .or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
            let gd = g.param.data();
            let pd = p.param.data_mut();
            for i in 0..n {
                let gi = gd[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gi;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = slot.m[i] / c1;
                let vhat = slot.v[i] / c2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * pd[i]);
            }
        }
    }
}

/// Learning rate as a function of the step index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup then cosine decay to zero at `total` steps.
    Cosine { warmup_steps: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup_steps } => {
                if step < warmup_steps {
                    return base * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1) as f64;
                let progress = ((step - warmup_steps) as f64 / span).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::Param;

    fn named<'a>(name: &str, p: &'a mut Param) -> Vec<NamedParamMut<'a>> {
        vec![NamedParamMut {
            group: "g".into(),
            name: name.into(),
            param: p,
        }]
    }

    fn grads<'a>(name: &str, g: &'a Param) -> Vec<NamedParam<'a>> {
        vec![NamedParam {
            group: "g".into(),
            name: name.into(),
            param: g,
        }]
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let mut p = Param::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let g = Param::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        let mut opt = AdamW::new(0.0);
        opt.begin_step();
        opt.update(
            "m",
            named("x.bias", &mut p),
            grads("x.bias", &g),
            |_| true,
            0.1,
        );
        let expect = |x: f64, g: f64| x - 0.1 * g / (g.abs() + 1e-8);
        assert!((p.data()[0] - expect(1.0, 0.5)).abs() < 1e-15);
        assert!((p.data()[1] - expect(-1.0, -2.0)).abs() < 1e-15);
    }

    #[test]
    fn decay_only_on_weights_and_frozen_untouched() {
        let mut w = Param::from_vec(&[1], vec![2.0]).unwrap();
        let mut b = Param::from_vec(&[1], vec![2.0]).unwrap();
        let zero = Param::zeros(&[1]);
        let mut opt = AdamW::new(0.5);
        opt.begin_step();
        opt.update(
            "m",
            named("l.weight", &mut w),
            grads("l.weight", &zero),
            |_| true,
            0.1,
        );
        opt.update(
            "m",
            named("l.bias", &mut b),
            grads("l.bias", &zero),
            |_| true,
            0.1,
        );
        assert_eq!(w.data()[0], 2.0 - 0.1 * 0.5 * 2.0);
        assert_eq!(b.data()[0], 2.0);

        let mut frozen = Param::from_vec(&[1], vec![3.0]).unwrap();
        let g = Param::from_vec(&[1], vec![1.0]).unwrap();
        opt.update(
            "m",
            named("f.weight", &mut frozen),
            grads("f.weight", &g),
            |_| false,
            0.1,
        );
        assert_eq!(frozen.data()[0].to_bits(), 3.0f64.to_bits());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = Param::from_vec(&[3], vec![0.3, -7.0, 0.0]).unwrap();
        let before = p.clone();
        let g = Param::from_vec(&[3], vec![1.0, 2.0, -3.0]).unwrap();
        let mut opt = AdamW::new(0.01);
        opt.begin_step();
        opt.update(
            "m",
            named("a.weight", &mut p),
            grads("a.weight", &g),
            |_| true,
            0.0,
        );
        assert_eq!(p, before);
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = LrSchedule::Cosine { warmup_steps: 4 };
        assert_eq!(s.lr_at(1.0, 0, 20), 0.25);
        assert_eq!(s.lr_at(1.0, 4, 20), 1.0);
        assert!(s.lr_at(1.0, 19, 20) < 0.02);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 99, 10), 0.3);
    }
}
