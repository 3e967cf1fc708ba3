use ndarray::{Array1, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model_zoo::layers::Linear;
use crate::model_zoo::{NamedParam, NamedParamMut, Param, PooledFeature};

pub const PROJECTION_GROUP: &str = "projection";

/// Learnable affine map from the student feature space to the teacher's.
///
/// Applied even when the two widths agree, so every student goes through the
/// same code path.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMap {
    pub linear: Linear,
}

impl ProjectionMap {
    pub fn new(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            linear: Linear::new(student_dim, teacher_dim, &mut rng),
        }
    }

    pub fn zeros(student_dim: usize, teacher_dim: usize) -> Self {
        Self {
            linear: Linear {
                weight: Param::zeros(&[student_dim, teacher_dim]),
                bias: Param::zeros(&[teacher_dim]),
            },
        }
    }

    /// `[I | 0]` on the leading block with zero bias.
    pub fn identity_extended(student_dim: usize, teacher_dim: usize) -> Self {
        let mut p = Self::zeros(student_dim, teacher_dim);
        let mut w = p.linear.weight.mat_mut();
        for i in 0..student_dim.min(teacher_dim) {
            w[[i, i]] = 1.0;
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            linear: self.linear.zeros_like(),
        }
    }

    pub fn student_dim(&self) -> usize {
        self.linear.inputs()
    }

    pub fn teacher_dim(&self) -> usize {
        self.linear.outputs()
    }

    pub fn params(&self) -> Vec<NamedParam<'_>> {
        self.linear
            .tensors()
            .into_iter()
            .map(|(n, p)| NamedParam {
                group: PROJECTION_GROUP.into(),
                name: format!("{PROJECTION_GROUP}.{n}"),
                param: p,
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<NamedParamMut<'_>> {
        self.linear
            .tensors_mut()
            .into_iter()
            .map(|(n, p)| NamedParamMut {
                group: PROJECTION_GROUP.into(),
                name: format!("{PROJECTION_GROUP}.{n}"),
                param: p,
            })
            .collect()
    }

    /// Accumulates parameter gradients for upstream gradient `dz` at the
    /// projected feature and returns the gradient at the student feature.
    pub(crate) fn backward(
        &self,
        x: ArrayView1<f64>,
        dz: ArrayView1<f64>,
        grad: &mut ProjectionMap,
    ) -> Array1<f64> {
        let x2 = x.insert_axis(Axis(0));
        let dz2 = dz.insert_axis(Axis(0));
        let dx = self
            .linear
            .backward(x2, dz2, &mut grad.linear, true)
            .expect("dx requested");
        dx.row(0).to_owned()
    }
}

pub fn align_features(student_feat: &PooledFeature, proj: &ProjectionMap) -> Result<PooledFeature> {
    if student_feat.dim() != proj.student_dim() {
        return Err(Error::Argument(format!(
            "student feature has dim {}, projection expects {}",
            student_feat.dim(),
            proj.student_dim()
        )));
    }
    let out = proj
        .linear
        .forward(student_feat.0.view().insert_axis(Axis(0)));
    Ok(PooledFeature(out.row(0).to_owned()))
}
