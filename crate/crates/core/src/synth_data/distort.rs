//! Compression-like degradations with a single strength knob in `[0, 1]`.

use ndarray::{s, Array2, Array4, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::VideoClip;

/// Quantizer step for the DC coefficient at strength 1.
const DCT_BASE_STEP: f64 = 0.4;
/// DC step relative to the base; small so block means stay close and
/// blocking edges remain mild next to the detail loss.
const DCT_DC_FACTOR: f64 = 0.25;
/// Extra step per unit of `u + v` frequency index, relative to the base.
const DCT_FREQ_SLOPE: f64 = 0.25;
/// Blur sigma in pixels at strength 1.
const MAX_BLUR_SIGMA: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecSim {
    BlockDctQuant,
    GaussianBlur,
    TemporalDrop,
}

impl CodecSim {
    pub const ALL: [CodecSim; 3] = [
        CodecSim::BlockDctQuant,
        CodecSim::GaussianBlur,
        CodecSim::TemporalDrop,
    ];

    /// Fixed per-family weight of strength in the score label.
    pub fn severity(self) -> f64 {
        match self {
            CodecSim::BlockDctQuant => 1.0,
            CodecSim::GaussianBlur => 0.85,
            CodecSim::TemporalDrop => 0.7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CodecSim::BlockDctQuant => "block_dct_quant",
            CodecSim::GaussianBlur => "gaussian_blur",
            CodecSim::TemporalDrop => "temporal_drop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionRecipe {
    pub codec_sim: CodecSim,
    pub strength: f64,
    pub block_size: usize,
}

impl DistortionRecipe {
    pub fn new(codec_sim: CodecSim, strength: f64) -> Self {
        Self {
            codec_sim,
            strength,
            block_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Argument(format!(
                "distortion strength {} outside [0, 1]",
                self.strength
            )));
        }
        if self.block_size == 0 {
            return Err(Error::Argument("block_size must be positive".into()));
        }
        Ok(())
    }
}

/// Label for a distorted clip: `1 - strength * severity`.
pub fn mos_proxy(recipe: &DistortionRecipe) -> f64 {
    1.0 - recipe.strength * recipe.codec_sim.severity()
}

pub fn apply_distortion(clip: &VideoClip, recipe: &DistortionRecipe) -> Result<VideoClip> {
    recipe.validate()?;
    let (_, h, w) = clip.geometry();
    if recipe.codec_sim == CodecSim::BlockDctQuant
        && (h % recipe.block_size != 0 || w % recipe.block_size != 0)
    {
        return Err(Error::Argument(format!(
            "block_size {} does not divide frame size {h}x{w}",
            recipe.block_size
        )));
    }
    if recipe.strength == 0.0 {
        return Ok(clip.clone());
    }
    let mut data = clip.data().clone();
    match recipe.codec_sim {
        CodecSim::BlockDctQuant => block_dct_quant(&mut data, recipe.block_size, recipe.strength),
        CodecSim::GaussianBlur => gaussian_blur(&mut data, recipe.strength * MAX_BLUR_SIGMA),
        CodecSim::TemporalDrop => temporal_drop(&mut data, recipe.strength),
    }
    data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(VideoClip::from_array_unchecked(data))
}

/// Orthonormal DCT-II basis, rows are frequencies.
fn dct_matrix(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
    })
}

fn block_dct_quant(data: &mut Array4<f64>, n: usize, strength: f64) {
    let basis = dct_matrix(n);
    let steps = Array2::from_shape_fn((n, n), |(u, v)| {
        let shape = if u + v == 0 {
            DCT_DC_FACTOR
        } else {
            1.0 + DCT_FREQ_SLOPE * (u + v) as f64
        };
        strength * DCT_BASE_STEP * shape
    });
    let (frames, _, h, w) = data.dim();
    for t in 0..frames {
        for c in 0..3 {
            let mut plane = data.slice_mut(s![t, c, .., ..]);
            for by in (0..h).step_by(n) {
                for bx in (0..w).step_by(n) {
                    let mut block = plane.slice_mut(s![by..by + n, bx..bx + n]);
                    quantize_block(&mut block, &basis, &steps);
                }
            }
        }
    }
}

fn quantize_block(block: &mut ArrayViewMut2<f64>, basis: &Array2<f64>, steps: &Array2<f64>) {
    let mut coef = basis.dot(&block.view()).dot(&basis.t());
    ndarray::Zip::from(&mut coef)
        .and(steps)
        .for_each(|c, &q| *c = (*c / q).round() * q);
    block.assign(&basis.t().dot(&coef).dot(basis));
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|v| v / sum).collect()
}

/// Separable blur per frame and channel; borders replicate the edge pixel.
fn gaussian_blur(data: &mut Array4<f64>, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (_, _, h, w) = data.dim();
    for mut frame in data.axis_iter_mut(Axis(0)) {
        for mut plane in frame.axis_iter_mut(Axis(0)) {
            let src = plane.to_owned();
            let mut tmp = Array2::<f64>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    tmp[[y, x]] = kernel
                        .iter()
                        .enumerate()
                        .map(|(k, &wgt)| {
                            let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1)
                                as usize;
                            wgt * src[[y, sx]]
                        })
                        .sum::<f64>();
                }
            }
            for y in 0..h {
                for x in 0..w {
                    plane[[y, x]] = kernel
                        .iter()
                        .enumerate()
                        .map(|(k, &wgt)| {
                            let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1)
                                as usize;
                            wgt * tmp[[sy, x]]
                        })
                        .sum();
                }
            }
        }
    }
}

/// Radical-inverse (base 2) of `i`; spreads drop positions over the clip.
fn van_der_corput(mut i: usize) -> f64 {
    let (mut out, mut denom) = (0.0, 1.0);
    while i > 0 {
        denom *= 2.0;
        out += (i & 1) as f64 / denom;
        i >>= 1;
    }
    out
}

/// Frames (excluding frame 0) replaced by their predecessor at `strength`.
///
/// `ceil(strength * (frames - 1))` frames are dropped. The drop sets are
/// nested as strength grows, and strength 1 drops every frame after the
/// first, freezing the clip on frame 0.
pub fn dropped_frames(frames: usize, strength: f64) -> Vec<usize> {
    if frames < 2 {
        return Vec::new();
    }
    let count = ((strength * (frames - 1) as f64).ceil() as usize).min(frames - 1);
    let mut order: Vec<usize> = (1..frames).collect();
    order.sort_by(|&a, &b| {
        van_der_corput(a)
            .total_cmp(&van_der_corput(b))
            .then(a.cmp(&b))
    });
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

fn temporal_drop(data: &mut Array4<f64>, strength: f64) {
    for t in dropped_frames(data.dim().0, strength) {
        let prev = data.index_axis(Axis(0), t - 1).to_owned();
        data.index_axis_mut(Axis(0), t).assign(&prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::pristine::{generate_pristine, Pattern, PristineClipSpec};

    fn clip() -> VideoClip {
        generate_pristine(
            &PristineClipSpec {
                content_id: 2,
                pattern: Pattern::TexturedNoiseField,
                frames: 6,
                height: 16,
                width: 16,
                motion_px_per_frame: 1.3,
            },
            5,
        )
    }

    fn mse(a: &VideoClip, b: &VideoClip) -> f64 {
        (a.data() - b.data()).mapv(|v| v * v).mean().unwrap()
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let m = dct_matrix(8);
        let eye = m.dot(&m.t());
        for ((i, j), v) in eye.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_strength_is_bit_identity() {
        let c = clip();
        for family in CodecSim::ALL {
            let out = apply_distortion(&c, &DistortionRecipe::new(family, 0.0)).unwrap();
            assert_eq!(out, c);
        }
    }

    #[test]
    fn stronger_quantization_deviates_more() {
        let c = clip();
        let weak =
            apply_distortion(&c, &DistortionRecipe::new(CodecSim::BlockDctQuant, 0.2)).unwrap();
        let strong =
            apply_distortion(&c, &DistortionRecipe::new(CodecSim::BlockDctQuant, 0.8)).unwrap();
        assert!(mse(&strong, &c) > mse(&weak, &c));
    }

    #[test]
    fn full_temporal_drop_freezes_on_first_frame() {
        let c = clip();
        let out =
            apply_distortion(&c, &DistortionRecipe::new(CodecSim::TemporalDrop, 1.0)).unwrap();
        let first = out.data().index_axis(Axis(0), 0).to_owned();
        for t in 1..out.frames() {
            assert_eq!(out.data().index_axis(Axis(0), t), first);
        }
    }

    #[test]
    fn drop_sets_are_nested_and_ceil_sized() {
        let mut prev: Vec<usize> = Vec::new();
        for k in 0..=10 {
            let s = k as f64 / 10.0;
            let cur = dropped_frames(16, s);
            assert_eq!(cur.len(), (s * 15.0).ceil() as usize);
            assert!(prev.iter().all(|f| cur.contains(f)));
            prev = cur;
        }
    }

    #[test]
    fn rejects_bad_block_size_and_strength() {
        let c = clip();
        let mut r = DistortionRecipe::new(CodecSim::BlockDctQuant, 0.5);
        r.block_size = 5;
        assert!(matches!(apply_distortion(&c, &r), Err(Error::Argument(_))));
        let r = DistortionRecipe::new(CodecSim::GaussianBlur, 1.5);
        assert!(matches!(apply_distortion(&c, &r), Err(Error::Argument(_))));
    }

    #[test]
    fn mos_proxy_boundaries_and_order() {
        for family in CodecSim::ALL {
            assert_eq!(mos_proxy(&DistortionRecipe::new(family, 0.0)), 1.0);
            assert!(
                mos_proxy(&DistortionRecipe::new(family, 0.3))
                    > mos_proxy(&DistortionRecipe::new(family, 0.7))
            );
        }
        assert_eq!(
            mos_proxy(&DistortionRecipe::new(CodecSim::BlockDctQuant, 1.0)),
            0.0
        );
    }
}
