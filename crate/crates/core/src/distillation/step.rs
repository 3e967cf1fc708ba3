use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::freeze::Learner;
use super::losses::{huber_grad, mse_loss, total_loss, weighted, LossBreakdown, LossWeights};
use super::optim::{AdamW, LrSchedule};
use super::projection::{align_features, ProjectionMap, PROJECTION_GROUP};
use crate::error::{Error, Result};
use crate::model_zoo::{GradReach, Model, Trace, VideoClip};
use crate::seeding;
use crate::synth_data::{dihedral, LabeledClip, DIHEDRAL_VARIANTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Random flip/transpose per sample, see [`BatchSampler::augmented_batch`].
    #[serde(default = "default_augment")]
    pub augment: bool,
}

fn default_batch_size() -> usize {
    8
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_augment() -> bool {
    true
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            steps: 300,
            seed: 0,
            loss_weights: LossWeights::default(),
            weight_decay: default_weight_decay(),
            schedule: LrSchedule::Constant,
            augment: default_augment(),
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0 (got {})",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and >= 0 (got {})",
                self.weight_decay
            )));
        }
        self.loss_weights.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.schedule.lr_at(self.learning_rate, step, self.steps)
    }
}

/// Epoch-wise shuffled minibatches, a pure function of `(seed, step)` so a
/// resumed run draws the same batches as an uninterrupted one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config(
                "cannot sample batches from an empty training split".into(),
            ));
        }
        Ok(Self {
            len,
            batch_size,
            seed: seeding::derive(seed, &[0x42_4154_4348]),
        })
    }

    fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(self.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    pub fn indices(&self, step: usize) -> Vec<usize> {
        let first = step * self.batch_size;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for k in first..first + self.batch_size {
            let epoch = k / self.len;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, self.permutation(epoch)));
            }
            out.push(cached.as_ref().expect("set above").1[k % self.len]);
        }
        out
    }

    pub fn batch<'a>(&self, data: &'a [LabeledClip], step: usize) -> Vec<&'a LabeledClip> {
        self.indices(step).into_iter().map(|i| &data[i]).collect()
    }

    /// Owned batch of `step`, augmented when `augment` is set.
    pub fn training_batch(
        &self,
        data: &[LabeledClip],
        step: usize,
        augment: bool,
    ) -> Vec<LabeledClip> {
        if augment {
            self.augmented_batch(data, step)
        } else {
            self.indices(step)
                .into_iter()
                .map(|i| data[i].clone())
                .collect()
        }
    }

    /// The batch of `step` with a random flip/transpose per sample, also a
    /// pure function of `(seed, step)`.
    pub fn augmented_batch(&self, data: &[LabeledClip], step: usize) -> Vec<LabeledClip> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeding::derive(self.seed, &[step as u64, 0x415547]));
        self.indices(step)
            .into_iter()
            .map(|i| {
                let variant = rng.random_range(0..DIHEDRAL_VARIANTS);
                LabeledClip {
                    clip: dihedral(&data[i].clip, variant),
                    ..data[i].clone()
                }
            })
            .collect()
    }
}

/// Activations entering the first trainable stage, per distinct clip.
///
/// Keyed by the SHA-256 of the clip's shape and bits. Valid as long as the
/// stages below that point are frozen, which the owner of the cache
/// guarantees. Clones share storage, so runs over the same frozen teacher
/// (every seed and mode of a study) compute each prefix once; a cache shared
/// through [`DistillState::share_prefix_cache`] remembers a fingerprint of
/// the frozen parameters and refuses a different teacher.
#[derive(Debug, Clone, Default)]
pub struct PrefixCache(Arc<Mutex<CacheEntries>>);

#[derive(Debug, Default)]
struct CacheEntries {
    owner: Option<[u8; 32]>,
    entries: HashMap<[u8; 32], Array2<f64>>,
    hits: usize,
    misses: usize,
}

impl PrefixCache {
    fn key(clip: &VideoClip) -> [u8; 32] {
        let mut h = Sha256::new();
        for &d in clip.data().shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in clip.data().iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    /// SHA-256 of the learner's frozen parameters and its cut point.
    fn fingerprint(learner: &Learner) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((learner.reach().lowest_stage as u64).to_le_bytes());
        for p in learner
            .model
            .params()
            .iter()
            .filter(|p| !learner.is_trainable(&p.group))
        {
            h.update(p.name.as_bytes());
            for v in p.param.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, CacheEntries> {
        // entries are inserted whole, so a panicking holder leaves them valid
        self.0
            .lock()
            .unwrap_or_else(std::sync::PoisonError::into_inner)
    }

    fn bind(&self, learner: &Learner) -> Result<()> {
        let print = Self::fingerprint(learner);
        let mut inner = self.lock();
        match inner.owner {
            Some(owner) if owner != print => Err(Error::Argument(
                "prefix cache was filled by a teacher with different frozen parameters".into(),
            )),
            _ => {
                inner.owner = Some(print);
                Ok(())
            }
        }
    }

    fn get_or_compute(&self, model: &Model, clip: &VideoClip, upto: usize) -> Result<Array2<f64>> {
        let key = Self::key(clip);
        {
            let mut inner = self.lock();
            if let Some(x) = inner.entries.get(&key).cloned() {
                inner.hits += 1;
                return Ok(x);
            }
            inner.misses += 1;
        }
        // computed unlocked; a concurrent miss on the same clip inserts the
        // same value
        let x = model.prefix(clip, upto)?;
        self.lock().entries.insert(key, x.clone());
        Ok(x)
    }

    pub fn hits(&self) -> usize {
        self.lock().hits
    }

    pub fn misses(&self) -> usize {
        self.lock().misses
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().entries.is_empty()
    }
}

/// Forward pass keeping only what the learner's backward pass needs.
fn trace_for(learner: &Learner, cache: &PrefixCache, clip: &VideoClip) -> Result<Trace> {
    let reach = learner.reach();
    if reach.stem || reach.lowest_stage == 0 {
        return learner.model.trace(clip);
    }
    let x = cache.get_or_compute(&learner.model, clip, reach.lowest_stage)?;
    Ok(learner.model.trace_from(x, reach.lowest_stage))
}

fn mse_grad(pred: f64, target: f64, batch: usize) -> f64 {
    2.0 * (pred - target) / batch as f64
}

fn check_batch(batch: &[&LabeledClip]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    Ok(())
}

/// Gradient buffers mirroring the three trained components.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub teacher: Model,
    pub student: Model,
    pub projection: ProjectionMap,
}

/// Teacher, student and projection trained jointly on the three-term loss.
///
/// Outputs of the teacher's frozen stages are cached per clip; call
/// [`DistillState::clear_cache`] after editing frozen teacher parameters.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub teacher: Learner,
    pub student: Model,
    pub projection: ProjectionMap,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub step: usize,
    cache: PrefixCache,
}

impl DistillState {
    pub fn new(
        teacher: Learner,
        student: Model,
        projection: ProjectionMap,
        weight_decay: f64,
    ) -> Result<Self> {
        let (t, s) = (teacher.model.config(), student.config());
        if (t.frames, t.height, t.width) != (s.frames, s.height, s.width) {
            return Err(Error::Config(format!(
                "teacher geometry {}x{}x{} differs from student geometry {}x{}x{}",
                t.frames, t.height, t.width, s.frames, s.height, s.width
            )));
        }
        if projection.student_dim() != s.embed_dim || projection.teacher_dim() != t.embed_dim {
            return Err(Error::Config(format!(
                "projection maps {} -> {}, models need {} -> {}",
                projection.student_dim(),
                projection.teacher_dim(),
                s.embed_dim,
                t.embed_dim
            )));
        }
        Ok(Self {
            teacher,
            student,
            projection,
            optimizer: AdamW::new(weight_decay),
            step: 0,
            cache: PrefixCache::default(),
        })
    }

    pub fn prefix_cache(&self) -> &PrefixCache {
        &self.cache
    }

    /// Required after any change to a frozen teacher parameter. Detaches
    /// the state from a shared cache.
    pub fn clear_cache(&mut self) {
        self.cache = PrefixCache::default();
    }

    /// Uses `cache`, which may already hold prefixes of this teacher, from
    /// now on. Fails if it was bound to a teacher with other frozen values.
    pub fn share_prefix_cache(&mut self, cache: PrefixCache) -> Result<()> {
        cache.bind(&self.teacher)?;
        self.cache = cache;
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            teacher: self.teacher.model.zeros_like(),
            student: self.student.zeros_like(),
            projection: self.projection.zeros_like(),
        }
    }

    /// Loss on `batch` without touching any parameter.
    pub fn batch_loss(
        &mut self,
        batch: &[&LabeledClip],
        weights: &LossWeights,
    ) -> Result<LossBreakdown> {
        check_batch(batch)?;
        let mut tp = Vec::with_capacity(batch.len());
        let mut sp = Vec::with_capacity(batch.len());
        let mut tf = Vec::with_capacity(batch.len());
        let mut sf = Vec::with_capacity(batch.len());
        for item in batch {
            let t = trace_for(&self.teacher, &self.cache, &item.clip)?;
            let (f, s) = self.student.forward(&item.clip)?;
            tp.push(t.prediction.score);
            sp.push(s.score);
            tf.push(t.feature);
            sf.push(align_features(&f, &self.projection)?);
        }
        let targets: Vec<f64> = batch.iter().map(|c| c.mos).collect();
        total_loss(&tp, &sp, &targets, &tf, &sf, weights)
    }

    /// Pre-update loss and the analytic gradient of its weighted total.
    ///
    /// The smooth-L1 term reaches the teacher's trainable groups as well as
    /// the student and projection. A zero weight skips its term's backward
    /// pass entirely, so the corresponding gradients are exactly zero.
    pub fn gradients(
        &mut self,
        batch: &[&LabeledClip],
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, Gradients)> {
        check_batch(batch)?;
        let b = batch.len();
        let mut grads = self.zero_gradients();
        let mut tp = Vec::with_capacity(b);
        let mut sp = Vec::with_capacity(b);
        let mut tf = Vec::with_capacity(b);
        let mut sf = Vec::with_capacity(b);
        let teacher_reach = self.teacher.reach();
        for item in batch {
            let t_trace = trace_for(&self.teacher, &self.cache, &item.clip)?;
            let s_trace = self.student.trace(&item.clip)?;
            let z = align_features(&s_trace.feature, &self.projection)?;
            let y = item.mos;
            let (p_t, p_s) = (t_trace.prediction.score, s_trace.prediction.score);

            let d_teacher_score = if weights.teacher == 0.0 {
                0.0
            } else {
                weights.teacher * mse_grad(p_t, y, b)
            };
            let d_student_score = weights.student * mse_grad(p_s, y, b);
            let dim = t_trace.feature.dim();
            let (d_teacher_feat, d_student_feat) = if weights.feature == 0.0 {
                (Array1::zeros(dim), Array1::zeros(s_trace.feature.dim()))
            } else {
                let scale = weights.feature / (b * dim) as f64;
                let g: Array1<f64> = ndarray::Zip::from(&t_trace.feature.0)
                    .and(&z.0)
                    .map_collect(|&a, &c| scale * huber_grad(a - c));
                let dz = -&g;
                let ds = self.projection.backward(
                    s_trace.feature.0.view(),
                    dz.view(),
                    &mut grads.projection,
                );
                (g, ds)
            };
            self.student.backward(
                &s_trace,
                d_student_feat.view(),
                d_student_score,
                &mut grads.student,
                GradReach::FULL,
            );
            if weights.teacher != 0.0 || weights.feature != 0.0 {
                self.teacher.model.backward(
                    &t_trace,
                    d_teacher_feat.view(),
                    d_teacher_score,
                    &mut grads.teacher,
                    teacher_reach,
                );
            }
            tp.push(p_t);
            sp.push(p_s);
            tf.push(t_trace.feature);
            sf.push(z);
        }
        let targets: Vec<f64> = batch.iter().map(|c| c.mos).collect();
        let breakdown = total_loss(&tp, &sp, &targets, &tf, &sf, weights)?;
        Ok((breakdown, grads))
    }

    fn apply(&mut self, grads: &Gradients, lr: f64) {
        self.optimizer.begin_step();
        let policy = self.teacher.policy().clone();
        self.optimizer.update(
            "teacher",
            self.teacher.model.params_mut(),
            grads.teacher.params(),
            |g| policy.is_trainable(g),
            lr,
        );
        self.optimizer.update(
            "student",
            self.student.params_mut(),
            grads.student.params(),
            |_| true,
            lr,
        );
        self.optimizer.update(
            "projection",
            self.projection.params_mut(),
            grads.projection.params(),
            |g| g == PROJECTION_GROUP,
            lr,
        );
    }
}

/// One joint update. Returns the loss measured before the update.
pub fn distill_step(
    state: &mut DistillState,
    batch: &[&LabeledClip],
    config: &DistillationConfig,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = state.gradients(batch, &config.loss_weights)?;
    if !breakdown.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            breakdown,
        });
    }
    let lr = config.lr_at(state.step);
    state.apply(&grads, lr);
    state.step += 1;
    Ok(breakdown)
}

/// A single model trained on the student L2 term alone.
#[derive(Debug, Clone)]
pub struct SupervisedState {
    pub learner: Learner,
    pub optimizer: AdamW,
    pub step: usize,
    cache: PrefixCache,
}

impl SupervisedState {
    pub fn new(learner: Learner, weight_decay: f64) -> Self {
        Self {
            learner,
            optimizer: AdamW::new(weight_decay),
            step: 0,
            cache: PrefixCache::default(),
        }
    }
}

/// One update on `mean((score - mos)^2)`. The breakdown reports it as
/// `student_l2` with the other terms zero.
pub fn supervised_step(
    state: &mut SupervisedState,
    batch: &[&LabeledClip],
    config: &DistillationConfig,
) -> Result<LossBreakdown> {
    check_batch(batch)?;
    let b = batch.len();
    let model = &state.learner.model;
    let reach = state.learner.reach();
    let mut grads = model.zeros_like();
    let mut preds = Vec::with_capacity(b);
    let zero = Array1::zeros(model.embed_dim());
    for item in batch {
        let trace = trace_for(&state.learner, &state.cache, &item.clip)?;
        let p = trace.prediction.score;
        model.backward(
            &trace,
            zero.view(),
            mse_grad(p, item.mos, b),
            &mut grads,
            reach,
        );
        preds.push(p);
    }
    let targets: Vec<f64> = batch.iter().map(|c| c.mos).collect();
    let breakdown = weighted(
        0.0,
        mse_loss(&preds, &targets)?,
        0.0,
        &LossWeights::new(0.0, 1.0, 0.0),
    );
    if !breakdown.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            breakdown,
        });
    }
    let lr = config.lr_at(state.step);
    state.optimizer.begin_step();
    let policy = state.learner.policy().clone();
    state.optimizer.update(
        "model",
        state.learner.model.params_mut(),
        grads.params(),
        |g| policy.is_trainable(g),
        lr,
    );
    state.step += 1;
    Ok(breakdown)
}

/// Scores for every clip, in order.
pub fn predict_all(model: &Model, clips: &[LabeledClip]) -> Result<Vec<f64>> {
    clips
        .iter()
        .map(|c| model.forward(&c.clip).map(|(_, p)| p.score))
        .collect()
}
