//! Video encoders: a ViT-style family (homologous path) and a factorized
//! 3D-CNN family (heterogeneous path), both ending in a pooled feature and a
//! scalar quality score.
//!
//! A model is a stem, a stack of stages, and a head. Stages are the unit of
//! freezing and of the frozen-prefix shortcut used during distillation.

mod clip;
mod cnn3d;
mod config;
mod head;
pub mod layers;
mod param;
mod vit;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use clip::{normalize_pixel, PooledFeature, QualityPrediction, TokenSequence, VideoClip};
pub use config::{block_group, Family, ModelConfig, ParameterStats};
pub use param::{NamedParam, NamedParamMut, Param, INIT_STD};
pub use vit::patchify;

use crate::error::{Error, Result};
use cnn3d::{ConvStage, ConvStageCache, Geom};
use head::{Head, HeadCache};
use vit::{TubeletEmbed, VitBlock, VitBlockCache};

pub const EMBEDDING_GROUP: &str = "embedding";
pub const POSITIONAL_GROUP: &str = "positional";
pub const HEAD_GROUP: &str = "head";

#[derive(Debug, Clone, PartialEq)]
enum Stem {
    Tubelet(TubeletEmbed),
    /// Each `h x w` pixel block becomes one channels-last row; no parameters.
    Unshuffle {
        h: usize,
        w: usize,
    },
}

// a model holds a handful of stages, so the size gap costs nothing
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Vit(VitBlock),
    Conv(ConvStage),
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum StageCache {
    Vit(VitBlockCache),
    Conv(ConvStageCache),
}

/// A video encoder with a scalar regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    stem: Stem,
    stages: Vec<Stage>,
    head: Head,
}

/// Forward activations kept for a backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    start: usize,
    patches: Option<Array2<f64>>,
    caches: Vec<StageCache>,
    head: HeadCache,
    pub feature: PooledFeature,
    pub prediction: QualityPrediction,
}

/// How far back a backward pass has to go.
///
/// Stages with index `>= lowest_stage` receive gradients; `stem` additionally
/// requests embedding/positional gradients and implies `lowest_stage == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradReach {
    pub stem: bool,
    pub lowest_stage: usize,
}

impl GradReach {
    pub const FULL: GradReach = GradReach {
        stem: true,
        lowest_stage: 0,
    };
}

/// Builds an encoder with parameters drawn deterministically from `seed`.
pub fn build_encoder(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let (stem, stages, head) = match config.family {
        Family::Vit => {
            let stem = Stem::Tubelet(TubeletEmbed::new(config, &mut rng));
            let stages = (0..config.depth)
                .map(|_| Stage::Vit(VitBlock::new(config, &mut rng)))
                .collect();
            (stem, stages, Head::new(d, true, &mut rng))
        }
        Family::Cnn3d => {
            let mut geom = Geom {
                t: config.frames,
                h: config.height / config.tubelet_h,
                w: config.width / config.tubelet_w,
            };
            let mut stages = Vec::with_capacity(config.depth);
            for i in 0..config.depth {
                let cin = if i == 0 { config.patch_dim() } else { d };
                let stage = ConvStage::new(geom, cin, d, config.downsamples_after(i), &mut rng);
                geom = stage.output_geom();
                stages.push(Stage::Conv(stage));
            }
            let stem = Stem::Unshuffle {
                h: config.tubelet_h,
                w: config.tubelet_w,
            };
            (stem, stages, Head::new(d, false, &mut rng))
        }
    };
    Ok(Model {
        config: config.clone(),
        stem,
        stages,
        head,
    })
}

/// Exact learnable-scalar count of a built model, grouped.
pub fn count_parameters(model: &Model) -> ParameterStats {
    let mut by_group = BTreeMap::new();
    for p in model.params() {
        *by_group.entry(p.group).or_insert(0) += p.param.len();
    }
    ParameterStats::from_groups(by_group)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// A structurally identical model with every parameter zero.
    pub fn zeros_like(&self) -> Model {
        Model {
            config: self.config.clone(),
            stem: match &self.stem {
                Stem::Tubelet(t) => Stem::Tubelet(t.zeros_like()),
                Stem::Unshuffle { h, w } => Stem::Unshuffle { h: *h, w: *w },
            },
            stages: self
                .stages
                .iter()
                .map(|s| match s {
                    Stage::Vit(b) => Stage::Vit(b.zeros_like()),
                    Stage::Conv(c) => Stage::Conv(c.zeros_like()),
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Parameter groups in forward order.
    pub fn group_order(&self) -> Vec<String> {
        let mut groups = Vec::with_capacity(self.stages.len() + 3);
        if matches!(self.stem, Stem::Tubelet(_)) {
            groups.push(EMBEDDING_GROUP.to_string());
            groups.push(POSITIONAL_GROUP.to_string());
        }
        groups.extend((0..self.stages.len()).map(block_group));
        groups.push(HEAD_GROUP.to_string());
        groups
    }

    /// All parameters in a fixed canonical order.
    pub fn params(&self) -> Vec<NamedParam<'_>> {
        let mut out = Vec::new();
        if let Stem::Tubelet(t) = &self.stem {
            for (n, p) in t.proj.tensors() {
                out.push(NamedParam {
                    group: EMBEDDING_GROUP.into(),
                    name: format!("{EMBEDDING_GROUP}.proj.{n}"),
                    param: p,
                });
            }
            out.push(NamedParam {
                group: POSITIONAL_GROUP.into(),
                name: format!("{POSITIONAL_GROUP}.pos"),
                param: &t.pos,
            });
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let group = block_group(i);
            let tensors = match stage {
                Stage::Vit(b) => b.tensors(),
                Stage::Conv(c) => c.tensors(),
            };
            for (n, p) in tensors {
                out.push(NamedParam {
                    group: group.clone(),
                    name: format!("{group}.{n}"),
                    param: p,
                });
            }
        }
        let last = block_group(self.stages.len() - 1);
        for (n, p) in self.head.norm_tensors() {
            out.push(NamedParam {
                group: last.clone(),
                name: format!("{last}.norm.{n}"),
                param: p,
            });
        }
        for (n, p) in self.head.tensors() {
            out.push(NamedParam {
                group: HEAD_GROUP.into(),
                name: format!("{HEAD_GROUP}.{n}"),
                param: p,
            });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<NamedParamMut<'_>> {
        let mut out = Vec::new();
        let last = block_group(self.stages.len() - 1);
        if let Stem::Tubelet(t) = &mut self.stem {
            for (n, p) in t.proj.tensors_mut() {
                out.push(NamedParamMut {
                    group: EMBEDDING_GROUP.into(),
                    name: format!("{EMBEDDING_GROUP}.proj.{n}"),
                    param: p,
                });
            }
            out.push(NamedParamMut {
                group: POSITIONAL_GROUP.into(),
                name: format!("{POSITIONAL_GROUP}.pos"),
                param: &mut t.pos,
            });
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let group = block_group(i);
            let tensors = match stage {
                Stage::Vit(b) => b.tensors_mut(),
                Stage::Conv(c) => c.tensors_mut(),
            };
            for (n, p) in tensors {
                out.push(NamedParamMut {
                    group: group.clone(),
                    name: format!("{group}.{n}"),
                    param: p,
                });
            }
        }
        let Head {
            norm,
            hidden,
            out: score_out,
        } = &mut self.head;
        for ln in norm.iter_mut() {
            for (n, p) in ln.tensors_mut() {
                out.push(NamedParamMut {
                    group: last.clone(),
                    name: format!("{last}.norm.{n}"),
                    param: p,
                });
            }
        }
        for (prefix, layer) in [("hidden", hidden), ("out", score_out)] {
            for (n, p) in layer.tensors_mut() {
                out.push(NamedParamMut {
                    group: HEAD_GROUP.into(),
                    name: format!("{HEAD_GROUP}.{prefix}.{n}"),
                    param: p,
                });
            }
        }
        out
    }

    /// Smallest backward pass that still reaches every trainable group.
    pub fn reach_for(&self, is_trainable: impl Fn(&str) -> bool) -> GradReach {
        if is_trainable(EMBEDDING_GROUP) || is_trainable(POSITIONAL_GROUP) {
            return GradReach::FULL;
        }
        let lowest_stage = (0..self.stages.len())
            .find(|&i| is_trainable(&block_group(i)))
            .unwrap_or(self.stages.len());
        GradReach {
            stem: false,
            lowest_stage,
        }
    }

    pub fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let c = &self.config;
        let expected = (c.frames, c.height, c.width);
        if clip.geometry() != expected {
            return Err(Error::Shape {
                expected: vec![c.frames, 3, c.height, c.width],
                actual: clip.data().shape().to_vec(),
            });
        }
        Ok(())
    }

    fn stem_forward(&self, clip: &VideoClip) -> (Option<Array2<f64>>, Array2<f64>) {
        match &self.stem {
            Stem::Tubelet(t) => {
                let patches = patchify(clip, &self.config);
                let x = t.forward(patches.view());
                (Some(patches), x)
            }
            Stem::Unshuffle { h, w } => (None, unshuffle(clip, *h, *w)),
        }
    }

    /// Activation entering stage `upto` (the output of the stem and stages
    /// `0..upto`). Depends only on the stem and those stages.
    pub fn prefix(&self, clip: &VideoClip, upto: usize) -> Result<Array2<f64>> {
        self.check_clip(clip)?;
        if upto > self.stages.len() {
            return Err(Error::Argument(format!(
                "prefix of {upto} stages requested from a {}-stage model",
                self.stages.len()
            )));
        }
        let (_, mut x) = self.stem_forward(clip);
        for stage in &self.stages[..upto] {
            x = self.stage_forward(stage, &x).0;
        }
        Ok(x)
    }

    fn stage_forward(&self, stage: &Stage, x: &Array2<f64>) -> (Array2<f64>, StageCache) {
        match stage {
            Stage::Vit(b) => {
                let (y, c) = b.forward(x.view());
                (y, StageCache::Vit(c))
            }
            Stage::Conv(s) => {
                let (y, c) = s.forward(x.view());
                (y, StageCache::Conv(c))
            }
        }
    }

    /// Final-layer pooled feature and score. Pure in `(self, clip)`.
    pub fn forward(&self, clip: &VideoClip) -> Result<(PooledFeature, QualityPrediction)> {
        let trace = self.trace(clip)?;
        Ok((trace.feature, trace.prediction))
    }

    pub fn trace(&self, clip: &VideoClip) -> Result<Trace> {
        self.check_clip(clip)?;
        let (patches, x) = self.stem_forward(clip);
        let mut trace = self.trace_from(x, 0);
        trace.patches = patches;
        Ok(trace)
    }

    /// Runs stages `start..` and the head on an activation produced by
    /// [`Model::prefix`]. The result cannot propagate into the stem.
    pub fn trace_from(&self, mut x: Array2<f64>, start: usize) -> Trace {
        let mut caches = Vec::with_capacity(self.stages.len() - start);
        for stage in &self.stages[start..] {
            let (y, c) = self.stage_forward(stage, &x);
            caches.push(c);
            x = y;
        }
        let (feature, score, head) = self.head.forward(x.view());
        Trace {
            start,
            patches: None,
            caches,
            head,
            feature: PooledFeature(feature),
            prediction: QualityPrediction { score },
        }
    }

    /// Accumulates into `grads` the gradient of a loss whose partials at the
    /// pooled feature and at the score are `d_feature` and `d_score`.
    pub fn backward(
        &self,
        trace: &Trace,
        d_feature: ArrayView1<f64>,
        d_score: f64,
        grads: &mut Model,
        reach: GradReach,
    ) {
        let mut dx = self
            .head
            .backward(&trace.head, d_feature, d_score, &mut grads.head);
        let lowest = if reach.stem { 0 } else { reach.lowest_stage };
        assert!(
            lowest >= trace.start || lowest == self.stages.len(),
            "trace starting at stage {} cannot reach stage {lowest}",
            trace.start
        );
        for k in (lowest..self.stages.len()).rev() {
            let cache = &trace.caches[k - trace.start];
            let need_dx = k > lowest || reach.stem;
            match (&self.stages[k], cache, &mut grads.stages[k]) {
                (Stage::Vit(b), StageCache::Vit(c), Stage::Vit(g)) => {
                    dx = b.backward(c, dx.view(), g);
                }
                (Stage::Conv(s), StageCache::Conv(c), Stage::Conv(g)) => {
                    match s.backward(c, dx.view(), g, need_dx) {
                        Some(d) => dx = d,
                        None => break,
                    }
                }
                _ => unreachable!("gradient buffer does not mirror the model"),
            }
        }
        if reach.stem {
            if let (Stem::Tubelet(t), Stem::Tubelet(g)) = (&self.stem, &mut grads.stem) {
                let patches = trace
                    .patches
                    .as_ref()
                    .expect("stem gradients need a trace started at the input");
                t.backward(patches.view(), dx.view(), g);
            }
        }
    }
}

/// Normalized pixels as `[t * (h / bh) * (w / bw), 3 * bh * bw]` rows in
/// `(t, y, x)` order; columns run over `(channel, dy, dx)`.
fn unshuffle(clip: &VideoClip, bh: usize, bw: usize) -> Array2<f64> {
    let (t, h, w) = clip.geometry();
    let (gh, gw) = (h / bh, w / bw);
    let data = clip.data();
    Array2::from_shape_fn((t * gh * gw, 3 * bh * bw), |(row, col)| {
        let (ti, rem) = (row / (gh * gw), row % (gh * gw));
        let (c, within) = (col / (bh * bw), col % (bh * bw));
        let y = (rem / gw) * bh + within / bw;
        let x = (rem % gw) * bw + within % bw;
        normalize_pixel(data[[ti, c, y, x]])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn tiny_vit() -> ModelConfig {
        ModelConfig::vit(8, 2, 2)
            .with_geometry(2, 8, 8)
            .with_tubelet(1, 4, 4)
    }

    fn tiny_cnn() -> ModelConfig {
        ModelConfig::cnn3d(4, 3).with_geometry(2, 8, 8)
    }

    fn ramp_clip(t: usize, h: usize, w: usize) -> VideoClip {
        let n = (t * 3 * h * w) as f64;
        let data = Array4::from_shape_fn((t, 3, h, w), |(a, b, c, d)| {
            (((a * 3 + b) * h + c) * w + d) as f64 / n
        });
        VideoClip::new(data).unwrap()
    }

    #[test]
    fn unshuffle_packs_pixel_blocks_into_channels() {
        let clip = ramp_clip(2, 4, 6);
        let x = unshuffle(&clip, 2, 3);
        assert_eq!(x.dim(), (2 * 2 * 2, 3 * 6));
        // frame 1, block (1, 0); channel 2, offset (dy 1, dx 2)
        let row = 4 + 2;
        let col = 2 * 6 + 3 + 2;
        assert_eq!(x[[row, col]], normalize_pixel(clip.data()[[1, 2, 3, 2]]));
        let mut got: Vec<f64> = x.iter().copied().collect();
        let mut want: Vec<f64> = clip.data().iter().map(|&v| normalize_pixel(v)).collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);
    }

    #[test]
    fn closed_form_count_matches_built_models() {
        for cfg in [
            tiny_vit(),
            tiny_cnn(),
            ModelConfig::vit(32, 4, 4),
            ModelConfig::cnn3d(32, 4),
        ] {
            let model = build_encoder(&cfg, 0).unwrap();
            assert_eq!(count_parameters(&model), cfg.parameter_stats(), "{cfg:?}");
        }
    }

    #[test]
    fn one_block_dim_two_vit_count_by_hand() {
        let cfg = ModelConfig::vit(2, 1, 1)
            .with_geometry(1, 1, 1)
            .with_tubelet(1, 1, 1);
        let stats = count_parameters(&build_encoder(&cfg, 0).unwrap());
        // embedding 3x2 + 2, positional 1x2
        assert_eq!(stats.by_group["embedding"], 8);
        assert_eq!(stats.by_group["positional"], 2);
        // norms 2*(2+2); qkv 2*6+6; proj 2*2+2; fc1 2*8+8; fc2 8*2+2,
        // plus the final norm (4), which trains with the last block
        assert_eq!(stats.by_group["blocks[0]"], 8 + 18 + 6 + 24 + 18 + 4);
        // hidden 2*2+2, out 2+1
        assert_eq!(stats.by_group["head"], 6 + 3);
        assert_eq!(stats.total, 8 + 2 + 78 + 9);
    }

    #[test]
    fn forward_shapes_and_purity() {
        for cfg in [tiny_vit(), tiny_cnn()] {
            let model = build_encoder(&cfg, 5).unwrap();
            let clip = ramp_clip(2, 8, 8);
            let (f1, s1) = model.forward(&clip).unwrap();
            let (f2, s2) = model.forward(&clip).unwrap();
            assert_eq!(f1.dim(), cfg.embed_dim);
            assert_eq!(f1, f2);
            assert_eq!(s1.score.to_bits(), s2.score.to_bits());
        }
    }

    #[test]
    fn zero_clip_gives_finite_outputs() {
        for cfg in [tiny_vit(), tiny_cnn(), ModelConfig::vit(32, 4, 4)] {
            let model = build_encoder(&cfg, 1).unwrap();
            let clip = VideoClip::zeros(cfg.frames, cfg.height, cfg.width);
            let (f, s) = model.forward(&clip).unwrap();
            assert!(f.0.iter().all(|v| v.is_finite()));
            assert!(s.score.is_finite());
        }
    }

    #[test]
    fn geometry_mismatch_reports_dims() {
        let model = build_encoder(&tiny_vit(), 0).unwrap();
        let err = model.forward(&VideoClip::zeros(2, 8, 12)).unwrap_err();
        match err {
            Error::Shape { expected, actual } => {
                assert_eq!(expected, vec![2, 3, 8, 8]);
                assert_eq!(actual, vec![2, 3, 8, 12]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seeds_control_initialization() {
        let a = build_encoder(&tiny_vit(), 9).unwrap();
        let b = build_encoder(&tiny_vit(), 9).unwrap();
        let c = build_encoder(&tiny_vit(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_then_trace_from_matches_full_forward() {
        let model = build_encoder(&tiny_vit(), 2).unwrap();
        let clip = ramp_clip(2, 8, 8);
        let full = model.trace(&clip).unwrap();
        for k in 0..=model.num_stages() {
            let x = model.prefix(&clip, k).unwrap();
            let partial = model.trace_from(x, k);
            assert_eq!(partial.feature, full.feature);
            assert_eq!(partial.prediction, full.prediction);
        }
    }

    #[test]
    fn group_order_and_reach() {
        let model = build_encoder(&tiny_vit(), 0).unwrap();
        assert_eq!(
            model.group_order(),
            vec!["embedding", "positional", "blocks[0]", "blocks[1]", "head"]
        );
        let reach = model.reach_for(|g| g == "blocks[1]" || g == "head");
        assert_eq!(
            reach,
            GradReach {
                stem: false,
                lowest_stage: 1
            }
        );
        assert_eq!(model.reach_for(|g| g == "positional"), GradReach::FULL);
    }
}
