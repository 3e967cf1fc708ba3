//! Procedural reference clips.
//!
//! Every pattern is a continuous function of the plane sampled at
//! `(x - vx * t, y - vy * t)`, so motion is a pure translation and a zero
//! velocity yields identical frames.
//!
//! Every pattern also carries a white luminance grain of fixed amplitude that
//! moves with the content (one value per integer lattice cell, sampled
//! nearest-neighbor). It gives all contents the same fine detail, so
//! detail-removing distortions are visible whatever the pattern.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model_zoo::VideoClip;
use crate::seeding::{derive, mix64, unit};

/// Pattern contrast around mid-gray, applied before the grain.
const CONTENT_CONTRAST: f64 = 0.15;
/// Peak amplitude of the grain layer (uniform in `[-a, a]`).
const GRAIN_AMPLITUDE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    MovingGradient,
    TexturedNoiseField,
    TranslatingShapes,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [
        Pattern::MovingGradient,
        Pattern::TexturedNoiseField,
        Pattern::TranslatingShapes,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PristineClipSpec {
    pub content_id: u64,
    pub pattern: Pattern,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub motion_px_per_frame: f64,
}

/// Smooth value noise on an unbounded integer lattice.
struct ValueNoise {
    salt: u64,
    spacing: f64,
}

impl ValueNoise {
    fn lattice(&self, ix: i64, iy: i64) -> f64 {
        unit(mix64(self.salt ^ mix64((ix as u64) ^ mix64(iy as u64)))) * 2.0 - 1.0
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.spacing, y / self.spacing);
        let (x0, y0) = (fx.floor(), fy.floor());
        let smooth = |u: f64| u * u * (3.0 - 2.0 * u);
        let (u, v) = (smooth(fx - x0), smooth(fy - y0));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let top = self.lattice(ix, iy) * (1.0 - u) + self.lattice(ix + 1, iy) * u;
        let bottom = self.lattice(ix, iy + 1) * (1.0 - u) + self.lattice(ix + 1, iy + 1) * u;
        top * (1.0 - v) + bottom * v
    }
}

enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

struct ShapeSprite {
    shape: Shape,
    color: [f64; 3],
    velocity: (f64, f64),
}

impl ShapeSprite {
    fn covers(&self, x: f64, y: f64, t: f64, period: (f64, f64)) -> bool {
        let wrap = |v: f64, p: f64| v.rem_euclid(p);
        let dx0 = |cx: f64| {
            wrap(x - self.velocity.0 * t - cx + period.0 / 2.0, period.0) - period.0 / 2.0
        };
        let dy0 = |cy: f64| {
            wrap(y - self.velocity.1 * t - cy + period.1 / 2.0, period.1) - period.1 / 2.0
        };
        match self.shape {
            Shape::Rect { cx, cy, hw, hh } => dx0(cx).abs() <= hw && dy0(cy).abs() <= hh,
            Shape::Disc { cx, cy, r } => {
                let (dx, dy) = (dx0(cx), dy0(cy));
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

/// Renders the reference clip for `spec`; identical `(spec, seed)` give
/// bit-identical output.
pub fn generate_pristine(spec: &PristineClipSpec, seed: u64) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[spec.content_id, 0x5052]));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (vx, vy) = (
        spec.motion_px_per_frame * angle.cos(),
        spec.motion_px_per_frame * angle.sin(),
    );
    let (t_n, h_n, w_n) = (spec.frames, spec.height, spec.width);
    let mut data = Array4::zeros((t_n, 3, h_n, w_n));

    match spec.pattern {
        Pattern::MovingGradient => {
            let tilt = rng.random_range(0.0..std::f64::consts::TAU);
            let period = rng.random_range(9.0..23.0);
            let wave_dir = rng.random_range(0.0..std::f64::consts::TAU);
            let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.55));
            let slope: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
            let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.25));
            let phase: [f64; 3] =
                std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
            let span = h_n.max(w_n) as f64;
            for t in 0..t_n {
                for y in 0..h_n {
                    for x in 0..w_n {
                        let px = x as f64 - vx * t as f64;
                        let py = y as f64 - vy * t as f64;
                        let along = (px * tilt.cos() + py * tilt.sin()) / span;
                        let wave = (px * wave_dir.cos() + py * wave_dir.sin()) / period;
                        for c in 0..3 {
                            let v = base[c]
                                + slope[c] * along
                                + amp[c] * (std::f64::consts::TAU * wave + phase[c]).sin();
                            data[[t, c, y, x]] = v.clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        Pattern::TexturedNoiseField => {
            let coarse: Vec<ValueNoise> = (0..3)
                .map(|c| ValueNoise {
                    salt: derive(seed, &[spec.content_id, 1, c]),
                    spacing: 9.0,
                })
                .collect();
            let fine = ValueNoise {
                salt: derive(seed, &[spec.content_id, 2]),
                spacing: rng.random_range(2.5..4.0),
            };
            let contrast = rng.random_range(0.15..0.3);
            let mean: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
            for t in 0..t_n {
                for y in 0..h_n {
                    for x in 0..w_n {
                        let px = x as f64 - vx * t as f64;
                        let py = y as f64 - vy * t as f64;
                        let detail = fine.sample(px, py);
                        for c in 0..3 {
                            let v = mean[c] + 0.25 * coarse[c].sample(px, py) + contrast * detail;
                            data[[t, c, y, x]] = v.clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        Pattern::TranslatingShapes => {
            let background = ValueNoise {
                salt: derive(seed, &[spec.content_id, 3]),
                spacing: 14.0,
            };
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
            let count = rng.random_range(5..9);
            let period = (w_n as f64 + 16.0, h_n as f64 + 16.0);
            let sprites: Vec<ShapeSprite> = (0..count)
                .map(|_| {
                    let cx = rng.random_range(0.0..period.0);
                    let cy = rng.random_range(0.0..period.1);
                    let shape = if rng.random_bool(0.5) {
                        Shape::Rect {
                            cx,
                            cy,
                            hw: rng.random_range(3.0..10.0),
                            hh: rng.random_range(3.0..10.0),
                        }
                    } else {
                        Shape::Disc {
                            cx,
                            cy,
                            r: rng.random_range(3.0..9.0),
                        }
                    };
                    let speed = rng.random_range(0.5..1.5);
                    ShapeSprite {
                        shape,
                        color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                        velocity: (vx * speed, vy * speed),
                    }
                })
                .collect();
            for t in 0..t_n {
                for y in 0..h_n {
                    for x in 0..w_n {
                        let (fx, fy) = (x as f64, y as f64);
                        let top = sprites
                            .iter()
                            .rev()
                            .find(|s| s.covers(fx, fy, t as f64, period));
                        for c in 0..3 {
                            let v = match top {
                                Some(s) => s.color[c],
                                None => {
                                    bg[c]
                                        + 0.15
                                            * background
                                                .sample(fx - vx * t as f64, fy - vy * t as f64)
                                }
                            };
                            data[[t, c, y, x]] = v.clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }

    data.mapv_inplace(|v| 0.5 + CONTENT_CONTRAST * (v - 0.5));
    let grain = ValueNoise {
        salt: derive(seed, &[spec.content_id, 4]),
        spacing: 1.0,
    };
    for t in 0..t_n {
        for y in 0..h_n {
            for x in 0..w_n {
                let (gx, gy) = (x as f64 - vx * t as f64, y as f64 - vy * t as f64);
                let g = GRAIN_AMPLITUDE * grain.lattice(gx.round() as i64, gy.round() as i64);
                for c in 0..3 {
                    let v = &mut data[[t, c, y, x]];
                    *v = (*v + g).clamp(0.0, 1.0);
                }
            }
        }
    }
    VideoClip::from_array_unchecked(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Axis};

    fn spec(pattern: Pattern, motion: f64) -> PristineClipSpec {
        PristineClipSpec {
            content_id: 4,
            pattern,
            frames: 4,
            height: 24,
            width: 24,
            motion_px_per_frame: motion,
        }
    }

    #[test]
    fn static_content_repeats_frames() {
        for pattern in Pattern::ALL {
            let clip = generate_pristine(&spec(pattern, 0.0), 1);
            let d = clip.data();
            for t in 1..4 {
                assert_eq!(
                    d.index_axis(Axis(0), t),
                    d.index_axis(Axis(0), 0),
                    "{pattern:?}"
                );
            }
        }
    }

    #[test]
    fn moving_content_changes_between_frames() {
        for pattern in Pattern::ALL {
            let clip = generate_pristine(&spec(pattern, 1.5), 1);
            let d = clip.data();
            for t in 1..4 {
                assert_ne!(
                    d.index_axis(Axis(0), t),
                    d.index_axis(Axis(0), t - 1),
                    "{pattern:?}"
                );
            }
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        for pattern in Pattern::ALL {
            let a = generate_pristine(&spec(pattern, 1.0), 7);
            let b = generate_pristine(&spec(pattern, 1.0), 7);
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn noise_field_frames_have_variance() {
        let clip = generate_pristine(&spec(Pattern::TexturedNoiseField, 1.0), 3);
        for t in 0..4 {
            let frame = clip.data().slice(s![t, .., .., ..]);
            let mean = frame.mean().unwrap();
            let var = frame.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(var > 0.0);
        }
    }
}
