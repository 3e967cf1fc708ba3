use std::collections::BTreeSet;

use ndarray::s;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distort::{apply_distortion, mos_proxy, CodecSim, DistortionRecipe};
use super::pristine::{generate_pristine, Pattern, PristineClipSpec};
use crate::error::{Error, Result};
use crate::model_zoo::VideoClip;
use crate::seeding::derive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_contents: usize,
    pub strengths_per_family: usize,
    pub source: Geometry,
    pub crop: Geometry,
    pub block_size: usize,
    pub train_fraction: f64,
    pub min_motion: f64,
    pub max_motion: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_contents: 20,
            strengths_per_family: 4,
            source: Geometry::new(16, 64, 64),
            crop: Geometry::new(8, 32, 32),
            block_size: 8,
            train_fraction: 0.8,
            min_motion: 0.75,
            max_motion: 2.5,
            seed: 0,
        }
    }
}

impl DataConfig {
    /// Strength grid `k / n` for `k = 1..=n`.
    pub fn strengths(&self) -> Vec<f64> {
        let n = self.strengths_per_family;
        (1..=n).map(|k| k as f64 / n as f64).collect()
    }

    pub fn content_spec(&self, content_id: u64) -> PristineClipSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.seed, &[content_id, 0x4d4f54]));
        let motion = if self.max_motion > self.min_motion {
            rng.random_range(self.min_motion..self.max_motion)
        } else {
            self.min_motion
        };
        PristineClipSpec {
            content_id,
            pattern: Pattern::ALL[content_id as usize % Pattern::ALL.len()],
            frames: self.source.frames,
            height: self.source.height,
            width: self.source.width,
            motion_px_per_frame: motion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_contents < 2 {
            return Err(Error::Argument(format!(
                "num_contents = {} cannot form a content-disjoint train/test split (need >= 2)",
                self.num_contents
            )));
        }
        if self.strengths_per_family == 0 {
            return Err(Error::Argument(
                "strengths_per_family must be positive".into(),
            ));
        }
        let (src, crop) = (self.source, self.crop);
        if crop.frames > src.frames || crop.height > src.height || crop.width > src.width {
            return Err(Error::Argument(format!(
                "crop {crop:?} exceeds source {src:?}"
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip: VideoClip,
    pub mos: f64,
    pub content_id: u64,
    pub recipe: DistortionRecipe,
    pub crop_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledClip>,
    pub test: Vec<LabeledClip>,
}

impl DatasetSplit {
    pub fn content_ids(clips: &[LabeledClip]) -> BTreeSet<u64> {
        clips.iter().map(|c| c.content_id).collect()
    }
}

/// Deterministic contiguous spatiotemporal crop.
pub fn sample_crop(
    clip: &VideoClip,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<VideoClip> {
    let (t, h, w) = clip.geometry();
    if frames == 0 || height == 0 || width == 0 || frames > t || height > h || width > w {
        return Err(Error::Argument(format!(
            "crop {frames}x{height}x{width} does not fit in clip {t}x{h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = rng.random_range(0..=t - frames);
    let y0 = rng.random_range(0..=h - height);
    let x0 = rng.random_range(0..=w - width);
    let data = clip
        .data()
        .slice(s![t0..t0 + frames, .., y0..y0 + height, x0..x0 + width])
        .to_owned();
    Ok(VideoClip::from_array_unchecked(data))
}

/// Content ids in the training split; the rest are test.
pub fn train_contents(config: &DataConfig) -> Result<BTreeSet<u64>> {
    config.validate()?;
    let n = config.num_contents;
    let n_train = ((n as f64 * config.train_fraction).floor() as usize).clamp(1, n - 1);
    let mut ids: Vec<u64> = (0..n as u64).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(
        config.seed,
        &[0x53504c],
    )));
    Ok(ids[..n_train].iter().copied().collect())
}

fn crop_seed(config: &DataConfig, content_id: u64, family: CodecSim, level: usize) -> u64 {
    derive(
        config.seed,
        &[content_id, family as u64, level as u64, 0x43524f50],
    )
}

/// One record per clip, enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub content_id: u64,
    pub family: CodecSim,
    pub strength: f64,
    pub mos: f64,
    pub seed: u64,
    pub crop_seed: u64,
    pub shape: [usize; 4],
    pub split: Split,
    pub pattern: Pattern,
    pub motion_px_per_frame: f64,
}

/// Every (content, family, strength) combination, ordered by those keys.
pub fn manifest(config: &DataConfig) -> Result<Vec<ManifestRecord>> {
    let train = train_contents(config)?;
    let strengths = config.strengths();
    let mut out = Vec::with_capacity(config.num_contents * CodecSim::ALL.len() * strengths.len());
    for content_id in 0..config.num_contents as u64 {
        let spec = config.content_spec(content_id);
        for family in CodecSim::ALL {
            for (level, &strength) in strengths.iter().enumerate() {
                let recipe = DistortionRecipe {
                    codec_sim: family,
                    strength,
                    block_size: config.block_size,
                };
                out.push(ManifestRecord {
                    content_id,
                    family,
                    strength,
                    mos: mos_proxy(&recipe),
                    seed: config.seed,
                    crop_seed: crop_seed(config, content_id, family, level),
                    shape: [config.crop.frames, 3, config.crop.height, config.crop.width],
                    split: if train.contains(&content_id) {
                        Split::Train
                    } else {
                        Split::Test
                    },
                    pattern: spec.pattern,
                    motion_px_per_frame: spec.motion_px_per_frame,
                });
            }
        }
    }
    Ok(out)
}

/// Generates the pristine source, distorts it and crops it for each record
/// of one content.
fn materialize_content(
    config: &DataConfig,
    records: &[&ManifestRecord],
) -> Result<Vec<LabeledClip>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let pristine = generate_pristine(&config.content_spec(first.content_id), config.seed);
    records
        .iter()
        .map(|r| {
            let recipe = DistortionRecipe {
                codec_sim: r.family,
                strength: r.strength,
                block_size: config.block_size,
            };
            let distorted = apply_distortion(&pristine, &recipe)?;
            let c = config.crop;
            let clip = sample_crop(&distorted, c.frames, c.height, c.width, r.crop_seed)?;
            Ok(LabeledClip {
                clip,
                mos: mos_proxy(&recipe),
                content_id: r.content_id,
                recipe,
                crop_seed: r.crop_seed,
            })
        })
        .collect()
}

/// Builds every clip of the dataset and splits by content.
pub fn build_dataset(config: &DataConfig) -> Result<DatasetSplit> {
    let records = manifest(config)?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
    };
    for content_id in 0..config.num_contents as u64 {
        let group: Vec<&ManifestRecord> = records
            .iter()
            .filter(|r| r.content_id == content_id)
            .collect();
        let target = match group.first().map(|r| r.split) {
            Some(Split::Train) => &mut split.train,
            _ => &mut split.test,
        };
        target.extend(materialize_content(config, &group)?);
    }
    Ok(split)
}

/// Pristine crops of the given contents, cropped like the dataset's first
/// strength level of the first family. Used as the reference population for
/// no-reference baselines.
pub fn pristine_crops(config: &DataConfig, contents: &BTreeSet<u64>) -> Result<Vec<VideoClip>> {
    contents
        .iter()
        .map(|&id| {
            let clip = generate_pristine(&config.content_spec(id), config.seed);
            let c = config.crop;
            sample_crop(
                &clip,
                c.frames,
                c.height,
                c.width,
                crop_seed(config, id, CodecSim::ALL[0], 0),
            )
        })
        .collect()
}
