//! The experiment commands behind the CLI.
//!
//! Every training command writes into `<root>/<run name>/`: the resolved
//! `config.toml`, `checkpoint.bin`, the step-wise `losses.jsonl`, periodic
//! test evaluations in `evals.jsonl`, and `report.txt` / `report.json` at the
//! end. A run directory that already holds a checkpoint is resumed; the
//! checkpoint must come from the same settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, RoleModel};
use super::config::{ExperimentConfig, Mode, RunKind};
use super::run::{
    append_jsonl, read_jsonl, validate_loss_log, write_jsonl, EvalRecord, LossRecord, RunManifest,
    WallClock, CHECKPOINT_FILE, CONFIG_FILE, EVAL_LOG, LOSS_LOG,
};
use crate::distillation::{
    apply_freeze_policy, check_gradients, distill_step, randomize_for_probe, supervised_step,
    BatchSampler, DistillState, DistillationConfig, FreezePolicy, GradCheckOptions,
    GradCheckReport, Learner, LossBreakdown, LossWeights, PrefixCache, ProjectionMap,
    SupervisedState,
};
use crate::error::{Error, Result};
use crate::metrics::{
    comparison_table, evaluate_model, ComparisonTable, CorrelationReport, EvalLabel,
};
use crate::model_zoo::{build_encoder, count_parameters, Model, ModelConfig};
use crate::seeding::derive;
use crate::synth_data::{
    build_dataset, manifest, read_manifest, write_manifest, DataConfig, DatasetSplit, Geometry,
    LabeledClip,
};

/// Environment variable that overrides the configured output root.
pub const OUTPUT_ROOT_ENV: &str = "CVQD_OUTPUT_ROOT";
/// Dataset name attached to test-split reports.
pub const TEST_DATASET: &str = "synthetic-test";
pub const DATA_DIR: &str = "data";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Largest model pair `grad_check` accepts.
pub const GRAD_CHECK_MAX_PARAMS: usize = 50_000;

const TEACHER_INIT: u64 = 0x5445_4143;
const STUDENT_INIT: u64 = 0x5354_5544;
const PROJECTION_INIT: u64 = 0x5052_4f4a;
const PROBE: u64 = 0x5052_4f42;

/// `explicit` (the `--output` flag), else `$CVQD_OUTPUT_ROOT`, else the
/// config's `output_dir`.
pub fn resolve_output_root(explicit: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => config.output_dir.clone(),
    }
}

/// Initialization seeds of the three components for a training seed.
/// Baseline and distilled students with the same seed start identical.
pub fn init_seeds(seed: u64) -> (u64, u64, u64) {
    (
        derive(seed, &[TEACHER_INIT]),
        derive(seed, &[STUDENT_INIT]),
        derive(seed, &[PROJECTION_INIT]),
    )
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Summary of `generate_data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub manifest_path: PathBuf,
    pub records: usize,
    pub train_records: usize,
    pub test_records: usize,
}

/// Writes `<root>/data/manifest.jsonl` and the resolved config beside it.
pub fn generate_data(config: &DataConfig, root: &Path) -> Result<DataSummary> {
    config.validate()?;
    let records = manifest(config)?;
    let dir = root.join(DATA_DIR);
    create_dir(&dir)?;
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&path, &records)?;
    let config_path = dir.join(CONFIG_FILE);
    let text = toml::to_string_pretty(config).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;
    let train = records
        .iter()
        .filter(|r| r.split == crate::synth_data::Split::Train)
        .count();
    Ok(DataSummary {
        manifest_path: path,
        records: records.len(),
        train_records: train,
        test_records: records.len() - train,
    })
}

/// Builds the clips for `config`. When a manifest was generated under
/// `root`, it must describe the same dataset.
pub fn load_dataset(config: &DataConfig, root: &Path) -> Result<DatasetSplit> {
    let path = root.join(DATA_DIR).join(MANIFEST_FILE);
    if path.exists() {
        let on_disk = read_manifest(&path)?;
        if on_disk != manifest(config)? {
            return Err(Error::Config(format!(
                "{} was generated from different data settings; rerun generate-data",
                path.display()
            )));
        }
    }
    build_dataset(config)
}

/// A training command's settings after flags are applied.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    pub seed: u64,
}

impl RunRequest {
    /// Applies the seed to both training sections.
    pub fn new(mut config: ExperimentConfig, root: PathBuf, seed: u64) -> Result<Self> {
        config.teacher_training.seed = seed;
        config.distill.seed = seed;
        config.validate()?;
        Ok(Self { config, root, seed })
    }

    pub fn run_dir(&self, kind: RunKind) -> PathBuf {
        self.root.join(kind.dir_name(self.seed))
    }

    fn training(&self, kind: RunKind) -> &DistillationConfig {
        match kind {
            RunKind::Teacher => &self.config.teacher_training,
            _ => &self.config.distill,
        }
    }
}

/// What a training command produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub checkpoint: Checkpoint,
    pub manifest: RunManifest,
}

/// Either training state, so one loop drives every command.
enum TrainState {
    Supervised(Box<SupervisedState>),
    Distill(Box<DistillState>),
}

impl TrainState {
    fn step(&mut self) -> usize {
        match self {
            TrainState::Supervised(s) => s.step,
            TrainState::Distill(s) => s.step,
        }
    }

    fn update(
        &mut self,
        batch: &[&LabeledClip],
        config: &DistillationConfig,
    ) -> Result<LossBreakdown> {
        match self {
            TrainState::Supervised(s) => supervised_step(s, batch, config),
            TrainState::Distill(s) => distill_step(s, batch, config),
        }
    }

    /// The model being evaluated: the trained model or the student.
    fn evaluated(&self) -> &Model {
        match self {
            TrainState::Supervised(s) => &s.learner.model,
            TrainState::Distill(s) => &s.student,
        }
    }

    fn checkpoint(&self, kind: RunKind, config_hash: &str, seed: u64) -> Checkpoint {
        let (models, projection, optimizer, step) = match self {
            TrainState::Supervised(s) => {
                let role = if kind == RunKind::Teacher {
                    "teacher"
                } else {
                    "student"
                };
                let models = vec![RoleModel {
                    role: role.into(),
                    model: s.learner.model.clone(),
                    policy: s.learner.policy().clone(),
                }];
                (models, None, s.optimizer.clone(), s.step)
            }
            TrainState::Distill(s) => {
                let models = vec![
                    RoleModel {
                        role: "teacher".into(),
                        model: s.teacher.model.clone(),
                        policy: s.teacher.policy().clone(),
                    },
                    RoleModel {
                        role: "student".into(),
                        policy: FreezePolicy::all(s.student.config()),
                        model: s.student.clone(),
                    },
                ];
                (
                    models,
                    Some(s.projection.clone()),
                    s.optimizer.clone(),
                    s.step,
                )
            }
        };
        Checkpoint {
            kind,
            config_hash: config_hash.into(),
            step,
            seed,
            models,
            projection,
            optimizer,
        }
    }

    fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        let mismatch =
            || Error::Checkpoint("checkpoint does not hold the models this run trains".into());
        match self {
            TrainState::Supervised(s) => {
                let m = ckpt.models.into_iter().next().ok_or_else(mismatch)?;
                if m.model.config() != s.learner.model.config() {
                    return Err(mismatch());
                }
                s.learner.model = m.model;
                s.optimizer = ckpt.optimizer;
                s.step = ckpt.step;
            }
            TrainState::Distill(s) => {
                let mut models = ckpt.models.into_iter();
                let (Some(t), Some(st), Some(p)) = (models.next(), models.next(), ckpt.projection)
                else {
                    return Err(mismatch());
                };
                if t.model.config() != s.teacher.model.config()
                    || st.model.config() != s.student.config()
                {
                    return Err(mismatch());
                }
                s.teacher.model = t.model;
                s.student = st.model;
                s.projection = p;
                s.optimizer = ckpt.optimizer;
                s.step = ckpt.step;
                s.clear_cache();
            }
        }
        Ok(())
    }
}

struct RunSpec<'a> {
    request: &'a RunRequest,
    kind: RunKind,
    config_hash: String,
    data: &'a DatasetSplit,
    baseline: Option<&'a CorrelationReport>,
}

fn evaluate(model: &Model, spec: &RunSpec<'_>) -> Result<CorrelationReport> {
    let label = EvalLabel::new(spec.kind.model_name(), TEST_DATASET, spec.request.seed);
    evaluate_model(model, &spec.data.test, &label)
}

/// Runs (or resumes) `state` to the configured step count and writes every
/// artifact of the run.
fn run_training(spec: RunSpec<'_>, mut state: TrainState) -> Result<RunOutcome> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let dir = spec.request.run_dir(spec.kind);
    create_dir(&dir)?;
    spec.request.config.save(&dir.join(CONFIG_FILE))?;
    let training = spec.request.training(spec.kind).clone();
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let loss_path = dir.join(LOSS_LOG);
    let eval_path = dir.join(EVAL_LOG);

    if ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        ckpt.check_resumable(spec.kind, &spec.config_hash)?;
        state.restore(ckpt)?;
        let done = state.step();
        log::info!("resuming {} at step {done}", dir.display());
        let mut losses: Vec<LossRecord> = read_jsonl(&loss_path)?;
        losses.retain(|r| r.step < done);
        validate_loss_log(&losses)?;
        if losses.len() != done {
            return Err(Error::Checkpoint(format!(
                "{} holds {} steps but the checkpoint is at step {done}",
                loss_path.display(),
                losses.len()
            )));
        }
        write_jsonl(&loss_path, &losses)?;
        let mut evals: Vec<EvalRecord> = read_jsonl(&eval_path)?;
        evals.retain(|e| e.step <= done);
        write_jsonl(&eval_path, &evals)?;
    } else {
        write_jsonl::<LossRecord>(&loss_path, &[])?;
        write_jsonl::<EvalRecord>(&eval_path, &[])?;
    }

    let start = state.step();
    let sampler = BatchSampler::new(spec.data.train.len(), training.batch_size, training.seed)?;
    let every = spec.request.config.eval_every;
    for step in start..training.steps {
        let batch = sampler.training_batch(&spec.data.train, step, training.augment);
        let refs: Vec<&LabeledClip> = batch.iter().collect();
        let breakdown = state.update(&refs, &training)?;
        append_jsonl(
            &loss_path,
            &LossRecord {
                step,
                lr: training.lr_at(step),
                breakdown,
            },
        )?;
        let done = step + 1;
        if every > 0 && done % every == 0 && done < training.steps {
            let report = evaluate(state.evaluated(), &spec)?;
            log::info!(
                "{} step {done}: test srcc {:?}",
                spec.kind.dir_name(spec.request.seed),
                report.srcc
            );
            append_jsonl(&eval_path, &EvalRecord { step: done, report })?;
            state
                .checkpoint(spec.kind, &spec.config_hash, spec.request.seed)
                .save(&ckpt_path)?;
        }
    }

    let checkpoint = state.checkpoint(spec.kind, &spec.config_hash, spec.request.seed);
    checkpoint.save(&ckpt_path)?;
    let mut report = evaluate(state.evaluated(), &spec)?;
    let mut evals: Vec<EvalRecord> = read_jsonl(&eval_path)?;
    evals.retain(|e| e.step < checkpoint.step);
    evals.push(EvalRecord {
        step: checkpoint.step,
        report: report.clone(),
    });
    write_jsonl(&eval_path, &evals)?;
    if let Some(base) = spec.baseline {
        report = report.with_baseline(base);
    }
    let losses: Vec<LossRecord> = read_jsonl(&loss_path)?;
    validate_loss_log(&losses)?;
    let manifest = RunManifest {
        kind: spec.kind,
        seed: spec.request.seed,
        config_hash: spec.config_hash,
        steps: checkpoint.step,
        losses,
        evals,
        report,
        wall_clock: WallClock {
            started_unix_s: started,
            seconds: clock.elapsed().as_secs_f64(),
            steps_this_invocation: checkpoint.step - start,
        },
    };
    manifest.write(&dir)?;
    Ok(RunOutcome {
        dir,
        checkpoint,
        manifest,
    })
}

/// Trains the teacher on the score term alone, every group trainable.
pub fn train_teacher(request: &RunRequest, data: &DatasetSplit) -> Result<RunOutcome> {
    let config = &request.config;
    let (teacher_seed, _, _) = init_seeds(request.seed);
    let model = build_encoder(&config.teacher, teacher_seed)?;
    let state = SupervisedState::new(
        Learner::fully_trainable(model),
        config.teacher_training.weight_decay,
    );
    let kind = RunKind::Teacher;
    let spec = RunSpec {
        request,
        kind,
        config_hash: config.config_hash(kind)?,
        data,
        baseline: None,
    };
    run_training(spec, TrainState::Supervised(Box::new(state)))
}

/// Trains the `mode` student on the score term alone: the no-distillation
/// reference for `distill`.
pub fn train_baseline(request: &RunRequest, mode: Mode, data: &DatasetSplit) -> Result<RunOutcome> {
    let config = &request.config;
    config.check_mode(mode)?;
    let (_, student_seed, _) = init_seeds(request.seed);
    let model = build_encoder(config.student_for(mode), student_seed)?;
    let state = SupervisedState::new(Learner::fully_trainable(model), config.distill.weight_decay);
    let kind = RunKind::Baseline(mode);
    let spec = RunSpec {
        request,
        kind,
        config_hash: config.config_hash(kind)?,
        data,
        baseline: None,
    };
    run_training(spec, TrainState::Supervised(Box::new(state)))
}

/// Distills `teacher` into the `mode` student. The teacher trains only the
/// groups of the freeze policy. `baseline` adds deltas to the final report.
pub fn distill(
    request: &RunRequest,
    mode: Mode,
    teacher: &Checkpoint,
    baseline: Option<&CorrelationReport>,
    data: &DatasetSplit,
) -> Result<RunOutcome> {
    distill_with_cache(
        request,
        mode,
        teacher,
        baseline,
        data,
        PrefixCache::default(),
    )
}

/// [`distill`] drawing frozen-teacher activations from `cache`, which other
/// runs over the same teacher checkpoint may share. Results do not depend on
/// what the cache already holds.
pub fn distill_with_cache(
    request: &RunRequest,
    mode: Mode,
    teacher: &Checkpoint,
    baseline: Option<&CorrelationReport>,
    data: &DatasetSplit,
    cache: PrefixCache,
) -> Result<RunOutcome> {
    let config = &request.config;
    config.check_mode(mode)?;
    if teacher.kind != RunKind::Teacher {
        return Err(Error::Config(format!(
            "distill needs a teacher checkpoint, got a {:?} run",
            teacher.kind
        )));
    }
    let teacher_model = teacher
        .model("teacher")
        .ok_or_else(|| Error::Checkpoint("teacher checkpoint holds no teacher".into()))?
        .model
        .clone();
    if teacher_model.config() != &config.teacher {
        return Err(Error::Config(
            "teacher checkpoint architecture differs from the config's teacher".into(),
        ));
    }
    let (_, student_seed, projection_seed) = init_seeds(request.seed);
    let student_config = config.student_for(mode);
    let student = build_encoder(student_config, student_seed)?;
    let projection = ProjectionMap::new(
        student_config.embed_dim,
        config.teacher.embed_dim,
        projection_seed,
    );
    let learner = apply_freeze_policy(teacher_model, config.freeze_policy())?;
    let mut state = DistillState::new(learner, student, projection, config.distill.weight_decay)?;
    state.share_prefix_cache(cache)?;

    let kind = RunKind::Distill(mode);
    let mut hasher = Sha256::new();
    hasher.update(config.config_hash(kind)?);
    hasher.update(&teacher.config_hash);
    hasher.update(teacher.step.to_le_bytes());
    hasher.update(teacher.seed.to_le_bytes());
    let spec = RunSpec {
        request,
        kind,
        config_hash: hex(&hasher.finalize()),
        data,
        baseline,
    };
    run_training(spec, TrainState::Distill(Box::new(state)))
}

/// Reads a final report from a `report.json` run manifest or from a bare
/// correlation report.
pub fn read_report(path: &Path) -> Result<CorrelationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
        return Ok(m.report);
    }
    serde_json::from_str::<CorrelationReport>(&text).map_err(|e| {
        Error::Serde(format!(
            "{}: neither a run manifest nor a report: {e}",
            path.display()
        ))
    })
}

/// Evaluates the checkpoint's student (or its teacher, when it has no
/// student, or the model of `role`) on the test split.
pub fn eval_checkpoint(
    checkpoint_path: &Path,
    role: Option<&str>,
    data: &DatasetSplit,
) -> Result<CorrelationReport> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let chosen = match role {
        Some(r) => ckpt
            .model(r)
            .ok_or_else(|| Error::Argument(format!("checkpoint has no {r:?} model")))?,
        None => ckpt.primary(),
    };
    let name = if chosen.role == "teacher" {
        "teacher".to_string()
    } else {
        ckpt.kind.model_name()
    };
    let report = evaluate_model(
        &chosen.model,
        &data.test,
        &EvalLabel::new(name, TEST_DATASET, ckpt.seed),
    )?;
    debug_assert_eq!(report.params, count_parameters(&chosen.model).total);
    Ok(report)
}

/// Settings of the finite-difference check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub teacher: ModelConfig,
    pub students: Vec<ModelConfig>,
    pub data: DataConfig,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub options: GradCheckOptions,
    /// Standard deviation of the random probe point.
    pub probe_std: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        let geometry = |c: ModelConfig| c.with_geometry(2, 8, 8);
        Self {
            teacher: geometry(ModelConfig::vit(8, 2, 2)).with_tubelet(1, 4, 4),
            students: vec![
                geometry(ModelConfig::vit(8, 2, 2)).with_tubelet(1, 4, 4),
                geometry(ModelConfig::cnn3d(8, 2)),
            ],
            data: DataConfig {
                num_contents: 2,
                strengths_per_family: 1,
                source: Geometry::new(4, 16, 16),
                crop: Geometry::new(2, 8, 8),
                block_size: 4,
                train_fraction: 0.5,
                ..DataConfig::default()
            },
            batch_size: 3,
            weights: LossWeights::new(1.0, 1.0, 1.0),
            options: GradCheckOptions::default(),
            probe_std: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub seed: u64,
    pub student: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub cases: Vec<GradCheckCase>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckSummary {
    pub fn text(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            out.push_str(&format!(
                "seed {} student {}\n{}\n",
                c.seed,
                c.student,
                c.report.text()
            ));
        }
        out.push_str(&format!(
            "{}: max relative error {:.3e} over {} cases (tolerance {:.1e})\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.cases.len(),
            self.tolerance
        ));
        out
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            Ok(self)
        } else {
            Err(Error::GradCheck {
                max_rel_error: self.max_rel_error,
                tolerance: self.tolerance,
            })
        }
    }
}

/// A teacher/student/projection state for the check, probe point applied.
pub fn grad_check_state(
    config: &GradCheckConfig,
    student: &ModelConfig,
    seed: u64,
) -> Result<DistillState> {
    let teacher = build_encoder(&config.teacher, derive(seed, &[TEACHER_INIT]))?;
    let s = build_encoder(student, derive(seed, &[STUDENT_INIT]))?;
    let total = count_parameters(&teacher).total
        + count_parameters(&s).total
        + student.embed_dim * config.teacher.embed_dim
        + config.teacher.embed_dim;
    if total > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradient check needs a tiny config: {total} parameters exceed {GRAD_CHECK_MAX_PARAMS}"
        )));
    }
    let projection = ProjectionMap::zeros(student.embed_dim, config.teacher.embed_dim);
    let learner = apply_freeze_policy(teacher, FreezePolicy::homologous_teacher(&config.teacher))?;
    let mut state = DistillState::new(learner, s, projection, 0.0)?;
    randomize_for_probe(&mut state, config.probe_std, derive(seed, &[PROBE]));
    Ok(state)
}

/// Finite differences against the analytic gradient of the full three-term
/// loss, for every student and every seed in `seeds`.
pub fn grad_check(config: &GradCheckConfig, seeds: &[u64]) -> Result<GradCheckSummary> {
    if seeds.is_empty() {
        return Err(Error::Argument("grad check needs at least one seed".into()));
    }
    let data = build_dataset(&config.data)?;
    let batch: Vec<&LabeledClip> = data.train.iter().take(config.batch_size).collect();
    let mut cases = Vec::new();
    for &seed in seeds {
        for student in &config.students {
            let mut state = grad_check_state(config, student, seed)?;
            let (_, grads) = state.gradients(&batch, &config.weights)?;
            let report =
                check_gradients(&mut state, &batch, &config.weights, &grads, &config.options)?;
            cases.push(GradCheckCase {
                seed,
                student: student.family.to_string(),
                report,
            });
        }
    }
    let max_rel_error = cases
        .iter()
        .map(|c| c.report.max_rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckSummary {
        passed: cases.iter().all(|c| c.report.passed),
        max_rel_error,
        tolerance: config.options.tolerance,
        cases,
    })
}

/// Comparison table over saved reports. `baselines` maps a model name to
/// the model name of its baseline row.
pub fn compare(
    reports: &[CorrelationReport],
    baselines: &BTreeMap<String, String>,
) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Argument("compare needs at least one report".into()));
    }
    comparison_table(reports, baselines)
}
