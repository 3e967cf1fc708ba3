use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distillation::{DistillationConfig, FreezePolicy, LossWeights, LrSchedule};
use crate::error::{Error, Result};
use crate::model_zoo::{Family, ModelConfig};
use crate::synth_data::DataConfig;

/// Which student is distilled: a narrower ViT like the teacher, or a 3D-CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Homologous,
    Heterogeneous,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Homologous, Mode::Heterogeneous];

    pub fn student_family(self) -> Family {
        match self {
            Mode::Homologous => Family::Vit,
            Mode::Heterogeneous => Family::Cnn3d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Homologous => "homologous",
            Mode::Heterogeneous => "heterogeneous",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homologous" => Ok(Mode::Homologous),
            "heterogeneous" => Ok(Mode::Heterogeneous),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected homologous or heterogeneous"
            ))),
        }
    }
}

/// Everything one experiment needs, loaded from a single TOML file.
///
/// `teacher_training` drives `train-teacher` (its loss weights are not used:
/// the teacher always trains on the score term alone); `distill` drives both
/// `train-baseline` and `distill`, so a baseline and a distilled student with
/// the same seed start from the same weights and see the same batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub teacher: ModelConfig,
    /// Student for homologous mode (ViT family).
    pub student: ModelConfig,
    /// Student for heterogeneous mode (cnn3d family).
    pub heterogeneous_student: ModelConfig,
    pub teacher_training: DistillationConfig,
    pub distill: DistillationConfig,
    /// Trainable teacher groups during distillation; defaults to the last
    /// block and the head.
    pub freeze: Option<FreezePolicy>,
    /// Test-split evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let tubelet = |c: ModelConfig| c.with_tubelet(2, 8, 8);
        let schedule = LrSchedule::Cosine { warmup_steps: 20 };
        Self {
            data: DataConfig::default(),
            teacher: tubelet(ModelConfig::vit(128, 8, 8)),
            student: tubelet(ModelConfig::vit(32, 4, 4)),
            heterogeneous_student: ModelConfig::cnn3d(32, 4),
            teacher_training: DistillationConfig {
                steps: 800,
                learning_rate: 1e-3,
                loss_weights: LossWeights::new(0.0, 1.0, 0.0),
                schedule,
                ..DistillationConfig::default()
            },
            distill: DistillationConfig {
                steps: 400,
                learning_rate: 1e-3,
                schedule,
                ..DistillationConfig::default()
            },
            freeze: None,
            eval_every: 100,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let crop = self.data.crop;
        let models = [
            ("teacher", &self.teacher),
            ("student", &self.student),
            ("heterogeneous_student", &self.heterogeneous_student),
        ];
        for (name, m) in models {
            m.validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
            if (m.frames, m.height, m.width) != (crop.frames, crop.height, crop.width) {
                return Err(Error::Config(format!(
                    "{name} geometry {}x{}x{} differs from the data crop {}x{}x{}; teacher and students share crops",
                    m.frames, m.height, m.width, crop.frames, crop.height, crop.width
                )));
            }
        }
        if self.teacher.family != Family::Vit {
            return Err(Error::Config("the teacher must be a vit".into()));
        }
        for mode in Mode::ALL {
            self.check_mode(mode)?;
        }
        self.freeze_policy().validate_for(&self.teacher)?;
        self.teacher_training.validate()?;
        self.distill.validate()
    }

    /// The student trained in `mode`.
    pub fn student_for(&self, mode: Mode) -> &ModelConfig {
        match mode {
            Mode::Homologous => &self.student,
            Mode::Heterogeneous => &self.heterogeneous_student,
        }
    }

    /// Errors when the configured student does not belong to `mode`'s family.
    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        let family = self.student_for(mode).family;
        if family != mode.student_family() {
            return Err(Error::Config(format!(
                "{mode} mode needs a {} student, the config has {family}",
                mode.student_family()
            )));
        }
        Ok(())
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        self.freeze
            .clone()
            .unwrap_or_else(|| FreezePolicy::homologous_teacher(&self.teacher))
    }

    /// Sets the step count of every training section.
    pub fn set_steps(&mut self, steps: usize) {
        self.teacher_training.steps = steps;
        self.distill.steps = steps;
    }

    /// Hex SHA-256 over the settings that determine a run of `kind`.
    ///
    /// Step counts and output locations are excluded, so a run may be resumed
    /// with a larger budget or from another directory.
    pub fn config_hash(&self, kind: RunKind) -> Result<String> {
        let strip = |c: &DistillationConfig| DistillationConfig {
            steps: 0,
            ..c.clone()
        };
        let value = match kind {
            RunKind::Teacher => serde_json::json!({
                "kind": kind,
                "data": self.data,
                "teacher": self.teacher,
                "training": strip(&self.teacher_training),
            }),
            RunKind::Baseline(mode) => serde_json::json!({
                "kind": kind,
                "data": self.data,
                "student": self.student_for(mode),
                "training": strip(&self.distill),
            }),
            RunKind::Distill(mode) => serde_json::json!({
                "kind": kind,
                "data": self.data,
                "teacher": self.teacher,
                "student": self.student_for(mode),
                "training": strip(&self.distill),
                "freeze": self.freeze_policy(),
            }),
        };
        let bytes = serde_json::to_vec(&value)?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

/// What a run trains; names its output directory and its checkpoint kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "mode", rename_all = "lowercase")]
pub enum RunKind {
    Teacher,
    Baseline(Mode),
    Distill(Mode),
}

impl RunKind {
    /// Directory name under the output root.
    pub fn dir_name(self, seed: u64) -> String {
        match self {
            RunKind::Teacher => format!("teacher-seed{seed}"),
            RunKind::Baseline(m) => format!("baseline-{m}-seed{seed}"),
            RunKind::Distill(m) => format!("distill-{m}-seed{seed}"),
        }
    }

    /// Model name used in reports.
    pub fn model_name(self) -> String {
        match self {
            RunKind::Teacher => "teacher".into(),
            RunKind::Baseline(m) => format!("{}-student", m.student_family()),
            RunKind::Distill(m) => format!("{}-student-distilled-{m}", m.student_family()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults_and_unknown_keys_fail() {
        let c = ExperimentConfig::from_toml_str("eval_every = 7\n[distill]\nsteps = 3\n").unwrap();
        assert_eq!(c.eval_every, 7);
        assert_eq!(c.distill.steps, 3);
        assert_eq!(c.teacher, ExperimentConfig::default().teacher);
        assert!(matches!(
            ExperimentConfig::from_toml_str("bogus = 1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn family_mode_mismatch_is_a_config_error() {
        let c = ExperimentConfig {
            student: ModelConfig::cnn3d(32, 4),
            ..ExperimentConfig::default()
        };
        assert!(matches!(
            c.check_mode(Mode::Homologous),
            Err(Error::Config(_))
        ));
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn geometry_and_freeze_names_are_checked() {
        let mut c = ExperimentConfig::default();
        c.student = c.student.clone().with_geometry(4, 32, 32);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ExperimentConfig {
            freeze: Some(FreezePolicy::of(["blocks[99]"])),
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_steps_and_output_but_not_seed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.set_steps(5);
        b.output_dir = "elsewhere".into();
        for kind in [
            RunKind::Teacher,
            RunKind::Baseline(Mode::Homologous),
            RunKind::Distill(Mode::Heterogeneous),
        ] {
            assert_eq!(a.config_hash(kind).unwrap(), b.config_hash(kind).unwrap());
        }
        b.teacher_training.seed = 9;
        assert_ne!(
            a.config_hash(RunKind::Teacher).unwrap(),
            b.config_hash(RunKind::Teacher).unwrap()
        );
        assert_ne!(
            a.config_hash(RunKind::Distill(Mode::Homologous)).unwrap(),
            a.config_hash(RunKind::Distill(Mode::Heterogeneous))
                .unwrap()
        );
    }

    #[test]
    fn mode_parses() {
        assert_eq!(
            "heterogeneous".parse::<Mode>().unwrap(),
            Mode::Heterogeneous
        );
        assert!("both".parse::<Mode>().is_err());
    }
}
