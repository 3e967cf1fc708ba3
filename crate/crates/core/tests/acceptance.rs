//! The acceptance criteria, one test each. Every test writes a single
//! `criterion N ...: PASS|FAIL` line straight to stderr (so it shows up even
//! when output is captured) before asserting.

mod common;

use std::io::Write as _;
use std::time::Instant;

use common::{group_hashes, pearson_oracle, ranks_oracle, spearman_oracle};
use cvqd_core::distillation::{total_loss, LossWeights};
use cvqd_core::harness::{
    distill, distillation_study, grad_check, load_dataset, train_baseline, train_teacher,
    Checkpoint, ExperimentConfig, GradCheckConfig, Mode, RunRequest, LOSS_LOG,
};
use cvqd_core::metrics::{average_ranks, plcc, srcc, ScorePairs};
use cvqd_core::model_zoo::{ModelConfig, PooledFeature};
use cvqd_core::synth_data::{
    apply_distortion, build_dataset, generate_pristine, manifest, mos_proxy, CodecSim, DataConfig,
    DatasetSplit, DistortionRecipe, Pattern, PristineClipSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} {name} failed: {detail}");
}

fn request(config: &ExperimentConfig, root: &std::path::Path, seed: u64) -> RunRequest {
    RunRequest::new(config.clone(), root.to_path_buf(), seed).unwrap()
}

/// Default desk config with short runs and evaluation only at the end.
fn short_default(steps: usize) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.set_steps(steps);
    config.eval_every = 0;
    config
}

#[test]
fn criterion_1_parameter_counts() {
    let clock = Instant::now();
    let cases = [
        ("small", ModelConfig::full_scale_small(), 23.05e6),
        ("base", ModelConfig::full_scale_base(), 89.44e6),
        ("teacher", ModelConfig::full_scale_teacher(), 1020.71e6),
    ];
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (name, config, target) in cases {
        let total = config.parameter_stats().total as f64;
        let rel = (total - target).abs() / target;
        worst = worst.max(rel);
        detail.push(format!(
            "{name} {:.2}M ({:+.1}%)",
            total / 1e6,
            100.0 * (total - target) / target
        ));
    }
    let seconds = clock.elapsed().as_secs_f64();
    detail.push(format!("{seconds:.3} s"));
    verdict(
        1,
        "parameter counts",
        worst <= 0.10 && seconds < 1.0,
        &detail.join(", "),
    );
}

#[test]
fn criterion_2_metric_oracles() {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut compared = 0;
    let mut ties_ok = true;
    while compared < 100 {
        let n = rng.random_range(3..=1000);
        let tied = compared % 3 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if tied {
                f64::from(rng.random_range(0..6u8))
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + draw(&mut rng)).collect();
        let pairs = ScorePairs::new(x.clone(), y.clone()).unwrap();
        let (Ok(p), Ok(s)) = (plcc(&pairs), srcc(&pairs)) else {
            continue;
        };
        ties_ok &= average_ranks(&x) == ranks_oracle(&x);
        worst = worst
            .max((p - pearson_oracle(&x, &y)).abs())
            .max((s - spearman_oracle(&x, &y)).abs());
        compared += 1;
    }
    let hand = ScorePairs::new(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
    let (hp, hs) = (plcc(&hand).unwrap(), srcc(&hand).unwrap());
    let seconds = clock.elapsed().as_secs_f64();
    verdict(
        2,
        "metric oracles",
        worst <= 1e-12 && ties_ok && hp == 0.8 && hs == 0.8 && seconds < 5.0,
        &format!("max deviation {worst:.1e} over {compared} vectors, hand case plcc {hp} srcc {hs}, {seconds:.2} s"),
    );
}

#[test]
fn criterion_3_gradient_check() {
    let clock = Instant::now();
    let summary = grad_check(&GradCheckConfig::default(), &[0, 1, 2]).unwrap();
    let seconds = clock.elapsed().as_secs_f64();
    verdict(
        3,
        "gradient check",
        summary.passed
            && summary.max_rel_error <= 1e-4
            && summary.cases.len() >= 3
            && seconds < 120.0,
        &format!(
            "max relative error {:.2e} over {} seed/student cases, {seconds:.1} s",
            summary.max_rel_error,
            summary.cases.len()
        ),
    );
}

#[test]
fn criterion_4_freeze_exactness() {
    let clock = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut config = short_default(50);
    config.teacher_training.steps = 0;
    let data = load_dataset(&config.data, dir.path()).unwrap();
    let req = request(&config, dir.path(), 0);
    let teacher = train_teacher(&req, &data).unwrap();
    let before = group_hashes(&teacher.checkpoint.model("teacher").unwrap().model);
    let out = distill(&req, Mode::Homologous, &teacher.checkpoint, None, &data).unwrap();
    assert_eq!(out.checkpoint.step, 50);
    let after = group_hashes(&out.checkpoint.model("teacher").unwrap().model);
    let policy = config.freeze_policy();
    let (mut frozen, mut kept, mut moved) = (0, 0, 0);
    for (group, hash) in &before {
        if policy.is_trainable(group) {
            moved += usize::from(hash != &after[group]);
        } else {
            frozen += 1;
            kept += usize::from(hash == &after[group]);
        }
    }
    let trainable = before.len() - frozen;
    let seconds = clock.elapsed().as_secs_f64();
    verdict(
        4,
        "freeze exactness",
        kept == frozen && moved == trainable && seconds < 120.0,
        &format!("{kept}/{frozen} frozen groups unchanged, {moved}/{trainable} trainable groups moved, {seconds:.1} s"),
    );
}

#[test]
fn criterion_5_loss_degeneracies() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = short_default(20);
    config.teacher_training.steps = 10;
    config.distill.loss_weights = LossWeights::new(0.0, 1.0, 0.0);
    let data = load_dataset(&config.data, dir.path()).unwrap();
    let req = request(&config, dir.path(), 4);
    let teacher = train_teacher(&req, &data).unwrap();
    let mut identical = true;
    for mode in Mode::ALL {
        let base = train_baseline(&req, mode, &data).unwrap();
        let dist = distill(
            &req,
            mode,
            &teacher.checkpoint,
            Some(&base.manifest.report),
            &data,
        )
        .unwrap();
        let student = |c: &Checkpoint| c.model("student").unwrap().model.clone();
        let curve = |m: &cvqd_core::harness::RunManifest| -> Vec<u64> {
            m.losses
                .iter()
                .map(|r| r.breakdown.student_l2.to_bits())
                .collect()
        };
        identical &= student(&dist.checkpoint) == student(&base.checkpoint)
            && curve(&dist.manifest) == curve(&base.manifest)
            && dist.manifest.report.srcc == base.manifest.report.srcc;
    }

    let targets = [0.2, 0.5, 0.9];
    let features: Vec<PooledFeature> = (0..3)
        .map(|i| {
            PooledFeature(ndarray::Array1::from_iter(
                (0..8).map(|k| f64::from(i * 8 + k) * 0.37 - 2.0),
            ))
        })
        .collect();
    let zero = total_loss(
        &targets,
        &targets,
        &targets,
        &features,
        &features,
        &LossWeights::new(1.0, 1.0, 1.0),
    )
    .unwrap();
    let all_zero = [
        zero.teacher_l2,
        zero.student_l2,
        zero.feature_smooth_l1,
        zero.total,
    ] == [0.0; 4];
    verdict(
        5,
        "loss degeneracies",
        identical && all_zero,
        &format!("weights (0,1,0) bit-identical to baseline in both modes: {identical}, perfect-match breakdown {zero:?}"),
    );
}

#[test]
fn criterion_6_distillation_gain_and_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::default();
    let study = distillation_study(&config, dir.path(), 0, &[1, 2, 3, 4, 5]).unwrap();
    let _ = std::io::stderr().write_all(study.text().as_bytes());
    let teacher_ok = study.teacher_srcc >= 0.85;
    let time_ok = study.wall_seconds <= 15.0 * 60.0;
    let pass = teacher_ok && study.gain_holds() && study.ordering_holds() && time_ok;
    verdict(
        6,
        "distillation gain and ordering",
        pass,
        &format!(
            "teacher srcc {:.4} (>= 0.85: {teacher_ok}), median gain {:+.4} (>= 0: {}), median homologous {:.4} vs heterogeneous {:.4} (ordering: {}), {:.0} s (<= 900: {time_ok})",
            study.teacher_srcc,
            study.median_gain,
            study.gain_holds(),
            study.median_homologous,
            study.median_heterogeneous,
            study.ordering_holds(),
            study.wall_seconds
        ),
    );
}

fn mse(a: &cvqd_core::model_zoo::VideoClip, b: &cvqd_core::model_zoo::VideoClip) -> f64 {
    (a.data() - b.data()).mapv(|v| v * v).mean().unwrap()
}

#[test]
fn criterion_7_data_pipeline() {
    let clock = Instant::now();
    let spec = PristineClipSpec {
        content_id: 1,
        pattern: Pattern::MovingGradient,
        frames: 8,
        height: 32,
        width: 32,
        motion_px_per_frame: 2.0,
    };
    let clip = generate_pristine(&spec, 3);
    let mut identity = true;
    let mut monotone = true;
    for family in CodecSim::ALL {
        let mut last = -1.0;
        for k in 0..10 {
            let out = apply_distortion(&clip, &DistortionRecipe::new(family, f64::from(k) / 9.0))
                .unwrap();
            if k == 0 {
                identity &= out == clip;
            }
            let e = mse(&out, &clip);
            monotone &= e >= last;
            last = e;
        }
    }
    let mut mos_decreasing = true;
    for family in CodecSim::ALL {
        let grid: Vec<f64> = (0..=100)
            .map(|k| mos_proxy(&DistortionRecipe::new(family, f64::from(k) / 100.0)))
            .collect();
        mos_decreasing &= grid.windows(2).all(|w| w[1] < w[0]);
    }
    let config = DataConfig::default();
    let a = build_dataset(&config).unwrap();
    let disjoint =
        DatasetSplit::content_ids(&a.train).is_disjoint(&DatasetSplit::content_ids(&a.test));
    let deterministic = a == build_dataset(&config).unwrap()
        && manifest(&config).unwrap() == manifest(&config).unwrap();
    let seconds = clock.elapsed().as_secs_f64();
    verdict(
        7,
        "data pipeline",
        identity && monotone && mos_decreasing && disjoint && deterministic && seconds < 60.0,
        &format!(
            "identity {identity}, mse monotone {monotone}, mos decreasing {mos_decreasing}, disjoint {disjoint}, deterministic {deterministic}, {seconds:.1} s"
        ),
    );
}

#[test]
fn criterion_8_distill_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = short_default(20);
    config.teacher_training.steps = 10;
    let data = load_dataset(&config.data, dir.path()).unwrap();
    let teacher = train_teacher(&request(&config, &dir.path().join("t"), 0), &data).unwrap();
    let mut same = true;
    for mode in Mode::ALL {
        let logs: Vec<Vec<u8>> = ["a", "b"]
            .iter()
            .map(|run| {
                let out = distill(
                    &request(&config, &dir.path().join(run), 9),
                    mode,
                    &teacher.checkpoint,
                    None,
                    &data,
                )
                .unwrap();
                std::fs::read(out.dir.join(LOSS_LOG)).unwrap()
            })
            .collect();
        same &= !logs[0].is_empty() && logs[0] == logs[1];
    }
    verdict(
        8,
        "distill determinism",
        same,
        "loss logs of two seeded runs per mode are byte-identical",
    );
}
