//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `CVQDCKPT`, a little-endian `u32` format version,
//! a `u64` header length, the JSON header, then every tensor value as a
//! little-endian `f64` in header order: model tensors, projection tensors,
//! then each optimizer slot's first and second moments.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Mode, RunKind};
use crate::distillation::{AdamW, FreezePolicy, Moments, ProjectionMap};
use crate::error::{Error, Result};
use crate::model_zoo::{build_encoder, Model, ModelConfig, NamedParam, NamedParamMut};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVQDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with the role it plays in the run.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleModel {
    /// `teacher` or `student`.
    pub role: String,
    pub model: Model,
    /// Trainable groups while the checkpoint was written.
    pub policy: FreezePolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: RunKind,
    pub config_hash: String,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub models: Vec<RoleModel>,
    pub projection: Option<ProjectionMap>,
    pub optimizer: AdamW,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelEntry {
    role: String,
    config: ModelConfig,
    policy: FreezePolicy,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct ProjectionEntry {
    student_dim: usize,
    teacher_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    /// `(key, length)` of each moment slot, in body order.
    slots: Vec<(String, usize)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: RunKind,
    config_hash: String,
    step: usize,
    seed: u64,
    models: Vec<ModelEntry>,
    projection: Option<ProjectionEntry>,
    optimizer: OptimizerEntry,
}

fn entries(params: &[NamedParam<'_>]) -> Vec<TensorEntry> {
    params
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.param.shape().to_vec(),
        })
        .collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn model(&self, role: &str) -> Option<&RoleModel> {
        self.models.iter().find(|m| m.role == role)
    }

    /// The distilled or baseline student if present, else the teacher.
    pub fn primary(&self) -> &RoleModel {
        self.model("student").unwrap_or(&self.models[0])
    }

    pub fn mode(&self) -> Option<Mode> {
        match self.kind {
            RunKind::Teacher => None,
            RunKind::Baseline(m) | RunKind::Distill(m) => Some(m),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            config_hash: self.config_hash.clone(),
            step: self.step,
            seed: self.seed,
            models: self
                .models
                .iter()
                .map(|m| ModelEntry {
                    role: m.role.clone(),
                    config: m.model.config().clone(),
                    policy: m.policy.clone(),
                    tensors: entries(&m.model.params()),
                })
                .collect(),
            projection: self.projection.as_ref().map(|p| ProjectionEntry {
                student_dim: p.student_dim(),
                teacher_dim: p.teacher_dim(),
            }),
            optimizer: OptimizerEntry {
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                weight_decay: self.optimizer.weight_decay,
                step: self.optimizer.step,
                slots: self
                    .optimizer
                    .moments
                    .iter()
                    .map(|(k, m)| (k.clone(), m.m.len()))
                    .collect(),
            },
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |values: &[f64]| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for m in &self.models {
            for p in m.model.params() {
                push(p.param.data());
            }
        }
        if let Some(p) = &self.projection {
            for t in p.params() {
                push(t.param.data());
            }
        }
        for slot in self.optimizer.moments.values() {
            push(&slot.m);
            push(&slot.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Reader { bytes, pos: 0 };
        if cursor.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(cursor.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(cursor.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(cursor.take(header_len)?)
            .map_err(|e| corrupt(format!("header: {e}")))?;

        let mut models = Vec::with_capacity(header.models.len());
        for entry in header.models {
            let mut model = build_encoder(&entry.config, 0)
                .map_err(|e| corrupt(format!("{}: {e}", entry.role)))?;
            fill(
                &mut model.params_mut(),
                &entry.tensors,
                &mut cursor,
                &entry.role,
            )?;
            models.push(RoleModel {
                role: entry.role,
                model,
                policy: entry.policy,
            });
        }
        if models.is_empty() {
            return Err(corrupt("checkpoint holds no model"));
        }
        let projection = match header.projection {
            Some(p) => {
                let mut map = ProjectionMap::zeros(p.student_dim, p.teacher_dim);
                let expected = entries(&map.params());
                fill(&mut map.params_mut(), &expected, &mut cursor, "projection")?;
                Some(map)
            }
            None => None,
        };
        let o = header.optimizer;
        let mut optimizer = AdamW {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            step: o.step,
            moments: Default::default(),
        };
        for (key, len) in o.slots {
            let m = cursor.f64s(len)?;
            let v = cursor.f64s(len)?;
            optimizer.moments.insert(key, Moments { m, v });
        }
        if cursor.pos != bytes.len() {
            return Err(corrupt(format!(
                "{} trailing bytes",
                bytes.len() - cursor.pos
            )));
        }
        Ok(Self {
            kind: header.kind,
            config_hash: header.config_hash,
            step: header.step,
            seed: header.seed,
            models,
            projection,
            optimizer,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses to continue a run whose settings changed.
    pub fn check_resumable(&self, kind: RunKind, config_hash: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint is a {:?} run, cannot resume it as {kind:?}",
                self.kind
            )));
        }
        if self.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {config_hash}; refusing to resume",
                self.config_hash
            )));
        }
        Ok(())
    }
}

fn fill(
    params: &mut [NamedParamMut<'_>],
    expected: &[TensorEntry],
    cursor: &mut Reader<'_>,
    role: &str,
) -> Result<()> {
    if params.len() != expected.len() {
        return Err(corrupt(format!(
            "{role}: header lists {} tensors, architecture has {}",
            expected.len(),
            params.len()
        )));
    }
    for (p, e) in params.iter_mut().zip(expected) {
        if p.name != e.name || p.param.shape() != e.shape.as_slice() {
            return Err(corrupt(format!(
                "{role}: tensor {} {:?} does not match architecture tensor {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.param.shape()
            )));
        }
        let values = cursor.f64s(p.param.len())?;
        p.param.data_mut().copy_from_slice(&values);
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| corrupt("tensor size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::ModelConfig;

    fn sample() -> Checkpoint {
        let t = build_encoder(
            &ModelConfig::vit(8, 2, 2)
                .with_geometry(2, 8, 8)
                .with_tubelet(1, 4, 4),
            1,
        )
        .unwrap();
        let s = build_encoder(&ModelConfig::cnn3d(4, 2).with_geometry(2, 8, 8), 2).unwrap();
        let mut optimizer = AdamW::new(0.01);
        optimizer.step = 3;
        optimizer.moments.insert(
            "student/x".into(),
            Moments {
                m: vec![0.1, -0.0, f64::MIN_POSITIVE],
                v: vec![1e-300, 2.0, 3.5],
            },
        );
        Checkpoint {
            kind: RunKind::Distill(Mode::Heterogeneous),
            config_hash: "abc".into(),
            step: 3,
            seed: 7,
            models: vec![
                RoleModel {
                    role: "teacher".into(),
                    policy: FreezePolicy::homologous_teacher(t.config()),
                    model: t,
                },
                RoleModel {
                    role: "student".into(),
                    policy: FreezePolicy::all(s.config()),
                    model: s,
                },
            ],
            projection: Some(ProjectionMap::new(4, 8, 3)),
            optimizer,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&extra),
            Err(Error::Checkpoint(_))
        ));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&magic),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn resume_checks_kind_and_hash() {
        let c = sample();
        c.check_resumable(RunKind::Distill(Mode::Heterogeneous), "abc")
            .unwrap();
        assert!(c
            .check_resumable(RunKind::Distill(Mode::Heterogeneous), "abd")
            .is_err());
        assert!(c.check_resumable(RunKind::Teacher, "abc").is_err());
    }
}
