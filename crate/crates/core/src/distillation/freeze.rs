use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{block_group, GradReach, Model, ModelConfig, HEAD_GROUP};

/// Parameter groups that receive gradient updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable_groups: BTreeSet<String>,
}

impl FreezePolicy {
    /// Last block plus head; everything else in the teacher stays fixed.
    pub fn homologous_teacher(config: &ModelConfig) -> Self {
        Self::of([
            block_group(config.depth.saturating_sub(1)),
            HEAD_GROUP.to_string(),
        ])
    }

    /// Every group of `config` is trainable.
    pub fn all(config: &ModelConfig) -> Self {
        Self::of(config.parameter_stats().by_group.into_keys())
    }

    pub fn of(groups: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            trainable_groups: groups.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.trainable_groups.contains(group)
    }

    /// Every named group must exist in a model built from `config`.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        let known = config.parameter_stats().by_group;
        let unknown: Vec<&str> = self
            .trainable_groups
            .iter()
            .filter(|g| !known.contains_key(*g))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "freeze policy names unknown groups {unknown:?}; model has {:?}",
                known.keys().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

/// A model paired with the groups an optimizer may touch.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub model: Model,
    policy: FreezePolicy,
}

pub fn apply_freeze_policy(model: Model, policy: FreezePolicy) -> Result<Learner> {
    policy.validate_for(model.config())?;
    Ok(Learner { model, policy })
}

impl Learner {
    pub fn fully_trainable(model: Model) -> Self {
        let policy = FreezePolicy::all(model.config());
        Self { model, policy }
    }

    pub fn policy(&self) -> &FreezePolicy {
        &self.policy
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.policy.is_trainable(group)
    }

    pub fn reach(&self) -> GradReach {
        self.model.reach_for(|g| self.policy.is_trainable(g))
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::build_encoder;

    #[test]
    fn homologous_teacher_trains_last_block_and_head() {
        let cfg = ModelConfig::vit(16, 12, 2);
        let p = FreezePolicy::homologous_teacher(&cfg);
        assert_eq!(p, FreezePolicy::of(["blocks[11]", "head"]));
        let learner = apply_freeze_policy(build_encoder(&cfg, 0).unwrap(), p).unwrap();
        assert_eq!(
            learner.reach(),
            GradReach {
                stem: false,
                lowest_stage: 11
            }
        );
    }

    #[test]
    fn all_groups_reach_the_stem() {
        let cfg = ModelConfig::vit(8, 2, 2);
        let learner = Learner::fully_trainable(build_encoder(&cfg, 0).unwrap());
        assert_eq!(learner.reach(), GradReach::FULL);
        assert_eq!(learner.policy().trainable_groups.len(), 5);
    }

    #[test]
    fn unknown_group_is_a_config_error() {
        let model = build_encoder(&ModelConfig::vit(8, 2, 2), 0).unwrap();
        let err = apply_freeze_policy(model, FreezePolicy::of(["blocks[2]"])).unwrap_err();
        assert!(
            matches!(err, Error::Config(ref m) if m.contains("blocks[2]")),
            "{err}"
        );
    }
}
