use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::layers::{gelu_backward, gelu_map, LayerNorm, Linear, LnCache};
use super::param::Param;

/// Mean-pool plus a one-hidden-layer regressor to a scalar score.
///
/// The ViT family normalizes tokens before pooling; the pooled vector is the
/// feature used for distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub norm: Option<LayerNorm>,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    norm: Option<LnCache>,
    rows: usize,
    feature: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(dim: usize, with_norm: bool, rng: &mut R) -> Self {
        Self {
            norm: with_norm.then(|| LayerNorm::new(dim)),
            // fan-in scaled: with the small body init the score would
            // otherwise start nearly input-independent
            hidden: Linear::fan_in(dim, dim, rng),
            out: Linear::fan_in(dim, 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            norm: self.norm.as_ref().map(LayerNorm::zeros_like),
            hidden: self.hidden.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array1<f64>, f64, HeadCache) {
        let (pooled, norm) = match &self.norm {
            Some(ln) => {
                let (xn, cache) = ln.forward_train(x);
                (xn.mean_axis(Axis(0)).expect("non-empty"), Some(cache))
            }
            None => (x.mean_axis(Axis(0)).expect("non-empty"), None),
        };
        let feature = pooled.insert_axis(Axis(0));
        let pre = self.hidden.forward(feature.view());
        let act = gelu_map(&pre);
        let score = self.out.forward(act.view())[[0, 0]];
        let cache = HeadCache {
            norm,
            rows: x.nrows(),
            feature,
            pre,
            act,
        };
        (cache.feature.row(0).to_owned(), score, cache)
    }

    /// `d_feature` is the loss gradient arriving directly at the pooled
    /// feature; `d_score` the gradient at the scalar output.
    pub fn backward(
        &self,
        cache: &HeadCache,
        d_feature: ArrayView1<f64>,
        d_score: f64,
        grad: &mut Head,
    ) -> Array2<f64> {
        let d_out = Array2::from_elem((1, 1), d_score);
        let d_act = self
            .out
            .backward(cache.act.view(), d_out.view(), &mut grad.out, true)
            .expect("dx requested");
        let d_pre = gelu_backward(&cache.pre, d_act.view());
        let mut d_feat = self
            .hidden
            .backward(cache.feature.view(), d_pre.view(), &mut grad.hidden, true)
            .expect("dx requested");
        d_feat.row_mut(0).scaled_add(1.0, &d_feature);

        let inv = 1.0 / cache.rows as f64;
        let d_rows = d_feat
            .row(0)
            .mapv(|v| v * inv)
            .insert_axis(Axis(0))
            .broadcast((cache.rows, d_feat.ncols()))
            .expect("broadcast")
            .to_owned();
        match (&self.norm, &cache.norm, grad.norm.as_mut()) {
            (Some(ln), Some(ln_cache), Some(g)) => ln.backward(ln_cache, d_rows.view(), g),
            _ => d_rows,
        }
    }

    /// Hidden and output layers; the optional pre-pool norm is exposed
    /// separately because it belongs to the last stage's parameter group.
    pub fn tensors(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::with_capacity(4);
        out.extend(
            self.hidden
                .tensors()
                .into_iter()
                .map(|(n, p)| (format!("hidden.{n}"), p)),
        );
        out.extend(
            self.out
                .tensors()
                .into_iter()
                .map(|(n, p)| (format!("out.{n}"), p)),
        );
        out
    }

    pub fn norm_tensors(&self) -> Vec<(&'static str, &Param)> {
        self.norm.iter().flat_map(|ln| ln.tensors()).collect()
    }
}
