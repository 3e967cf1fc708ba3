//! Tiny models and data shared by the integration tests.
#![allow(dead_code)]

use cvqd_core::distillation::{
    apply_freeze_policy, DistillState, DistillationConfig, FreezePolicy, LossWeights, LrSchedule,
    ProjectionMap,
};
use cvqd_core::harness::ExperimentConfig;
use cvqd_core::model_zoo::{build_encoder, Model, ModelConfig};
use cvqd_core::synth_data::{build_dataset, DataConfig, DatasetSplit, Geometry};
use sha2::{Digest, Sha256};

pub fn tiny_vit() -> ModelConfig {
    ModelConfig::vit(8, 2, 2)
        .with_geometry(2, 8, 8)
        .with_tubelet(1, 4, 4)
}

pub fn tiny_cnn() -> ModelConfig {
    ModelConfig::cnn3d(8, 2).with_geometry(2, 8, 8)
}

pub fn tiny_data_config() -> DataConfig {
    DataConfig {
        num_contents: 5,
        strengths_per_family: 2,
        source: Geometry::new(4, 16, 16),
        crop: Geometry::new(2, 8, 8),
        block_size: 4,
        ..DataConfig::default()
    }
}

pub fn tiny_data() -> DatasetSplit {
    build_dataset(&tiny_data_config()).unwrap()
}

/// A whole experiment at tiny scale.
pub fn tiny_experiment(steps: usize) -> ExperimentConfig {
    let training = DistillationConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        steps,
        seed: 0,
        loss_weights: LossWeights::new(1.0, 1.0, 1.0),
        weight_decay: 0.01,
        schedule: LrSchedule::Cosine { warmup_steps: 2 },
        augment: true,
    };
    ExperimentConfig {
        data: tiny_data_config(),
        teacher: ModelConfig::vit(16, 3, 2)
            .with_geometry(2, 8, 8)
            .with_tubelet(1, 4, 4),
        student: tiny_vit(),
        heterogeneous_student: tiny_cnn(),
        teacher_training: DistillationConfig {
            loss_weights: LossWeights::new(0.0, 1.0, 0.0),
            ..training.clone()
        },
        distill: training,
        freeze: None,
        eval_every: 2,
        output_dir: "unused".into(),
    }
}

/// Teacher under the last-block-and-head policy, student and projection.
pub fn tiny_state(student: &ModelConfig, seed: u64) -> DistillState {
    let teacher_cfg = ModelConfig::vit(16, 3, 2)
        .with_geometry(2, 8, 8)
        .with_tubelet(1, 4, 4);
    let teacher = build_encoder(&teacher_cfg, seed).unwrap();
    let learner =
        apply_freeze_policy(teacher, FreezePolicy::homologous_teacher(&teacher_cfg)).unwrap();
    let s = build_encoder(student, seed + 1).unwrap();
    let projection = ProjectionMap::new(student.embed_dim, teacher_cfg.embed_dim, seed + 2);
    DistillState::new(learner, s, projection, 0.01).unwrap()
}

/// SHA-256 of each parameter group's values, in parameter order.
pub fn group_hashes(model: &Model) -> std::collections::BTreeMap<String, String> {
    let mut hashers: std::collections::BTreeMap<String, Sha256> = Default::default();
    for p in model.params() {
        let h = hashers.entry(p.group.clone()).or_default();
        h.update(p.name.as_bytes());
        for v in p.param.data() {
            h.update(v.to_le_bytes());
        }
    }
    hashers
        .into_iter()
        .map(|(g, h)| (g, h.finalize().iter().map(|b| format!("{b:02x}")).collect()))
        .collect()
}

pub fn flat(model: &Model) -> Vec<f64> {
    model
        .params()
        .iter()
        .flat_map(|p| p.param.data().to_vec())
        .collect()
}

/// Neumaier-compensated sum.
fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() {
            (s - t) + v
        } else {
            (v - t) + s
        };
        s = t;
    }
    s + c
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = sum(x.iter().copied()) / n;
    let my = sum(y.iter().copied()) / n;
    let sxy = sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = sum(y.iter().map(|b| (b - my) * (b - my)));
    sxy / sxx.sqrt() / syy.sqrt()
}

/// Rank by counting: smaller values plus half the tied block, O(n^2).
pub fn ranks_oracle(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    pearson_oracle(&ranks_oracle(x), &ranks_oracle(y))
}
