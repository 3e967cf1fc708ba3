use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Vit,
    Cnn3d,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Vit => "vit",
            Family::Cnn3d => "cnn3d",
        })
    }
}

/// Architecture hyperparameters for one encoder.
///
/// For the `cnn3d` family `num_heads`, `mlp_ratio` and `tubelet_t` are
/// unused. `tubelet_h x tubelet_w` is the pixel-unshuffle factor of its stem
/// (each block of pixels becomes one position with `3 * h * w` channels), and
/// the unshuffled frame must survive one 2x downsample per pair of stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tubelet_t: usize,
    pub tubelet_h: usize,
    pub tubelet_w: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

impl ModelConfig {
    pub fn vit(embed_dim: usize, depth: usize, num_heads: usize) -> Self {
        Self {
            family: Family::Vit,
            embed_dim,
            depth,
            num_heads,
            frames: 8,
            height: 32,
            width: 32,
            tubelet_t: 1,
            tubelet_h: 8,
            tubelet_w: 8,
            mlp_ratio: 4.0,
        }
    }

    /// A 3D-CNN with a 2x2 pixel-unshuffle stem.
    pub fn cnn3d(embed_dim: usize, depth: usize) -> Self {
        Self {
            family: Family::Cnn3d,
            num_heads: 1,
            tubelet_h: 2,
            tubelet_w: 2,
            ..Self::vit(embed_dim, depth, 1)
        }
    }

    pub fn with_geometry(mut self, frames: usize, height: usize, width: usize) -> Self {
        self.frames = frames;
        self.height = height;
        self.width = width;
        self
    }

    pub fn with_tubelet(mut self, t: usize, h: usize, w: usize) -> Self {
        self.tubelet_t = t;
        self.tubelet_h = h;
        self.tubelet_w = w;
        self
    }

    /// ViT-Small sized student at 8x224x224 with 1x14x14 tubelets.
    pub fn full_scale_small() -> Self {
        Self::vit(384, 12, 6)
            .with_geometry(8, 224, 224)
            .with_tubelet(1, 14, 14)
    }

    /// ViT-Base sized student at 8x224x224.
    pub fn full_scale_base() -> Self {
        Self::vit(768, 12, 12)
            .with_geometry(8, 224, 224)
            .with_tubelet(1, 14, 14)
    }

    /// 1408-wide, 40-block teacher at 8x224x224.
    pub fn full_scale_teacher() -> Self {
        Self::vit(1408, 40, 16)
            .with_geometry(8, 224, 224)
            .with_tubelet(1, 14, 14)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!(
                "mlp_ratio must be positive (got {})",
                self.mlp_ratio
            )));
        }
        match self.family {
            Family::Vit => {
                for (name, v) in [
                    ("num_heads", self.num_heads),
                    ("tubelet_t", self.tubelet_t),
                    ("tubelet_h", self.tubelet_h),
                    ("tubelet_w", self.tubelet_w),
                ] {
                    if v == 0 {
                        return Err(Error::Config(format!("{name} must be positive")));
                    }
                }
                let checks = [
                    ("height % tubelet_h == 0", self.height, self.tubelet_h),
                    ("width % tubelet_w == 0", self.width, self.tubelet_w),
                    ("frames % tubelet_t == 0", self.frames, self.tubelet_t),
                    ("embed_dim % num_heads == 0", self.embed_dim, self.num_heads),
                ];
                for (rule, a, b) in checks {
                    if a % b != 0 {
                        return Err(Error::Config(format!(
                            "{rule} violated ({a} % {b} = {})",
                            a % b
                        )));
                    }
                }
            }
            Family::Cnn3d => {
                let pools = 1usize << self.num_downsamples();
                for (rule, v, unshuffle) in [
                    ("height", self.height, self.tubelet_h),
                    ("width", self.width, self.tubelet_w),
                ] {
                    if unshuffle == 0 {
                        return Err(Error::Config(format!(
                            "unshuffle factor for {rule} must be positive"
                        )));
                    }
                    let factor = unshuffle * pools;
                    if v % factor != 0 {
                        return Err(Error::Config(format!(
                            "{rule} % {factor} == 0 violated: a {unshuffle}x stem and {} downsample stages need it ({v} % {factor} = {})",
                            self.num_downsamples(),
                            v % factor
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Input width of the first layer: one ViT tubelet, or one unshuffled
    /// CNN position.
    pub fn patch_dim(&self) -> usize {
        match self.family {
            Family::Vit => 3 * self.tubelet_t * self.tubelet_h * self.tubelet_w,
            Family::Cnn3d => 3 * self.tubelet_h * self.tubelet_w,
        }
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (
            self.frames / self.tubelet_t,
            self.height / self.tubelet_h,
            self.width / self.tubelet_w,
        )
    }

    /// Number of ViT tokens per clip.
    pub fn num_tokens(&self) -> usize {
        let (t, h, w) = self.grid();
        t * h * w
    }

    /// CNN stages downsample after every even-indexed stage that is not last.
    pub fn downsamples_after(&self, stage: usize) -> bool {
        self.family == Family::Cnn3d && stage.is_multiple_of(2) && stage + 1 < self.depth
    }

    pub fn num_downsamples(&self) -> usize {
        (0..self.depth)
            .filter(|&s| self.downsamples_after(s))
            .count()
    }

    /// Closed-form parameter count; matches [`super::count_parameters`] on a
    /// built model without allocating one.
    pub fn parameter_stats(&self) -> ParameterStats {
        let d = self.embed_dim;
        let mut by_group = BTreeMap::new();
        let linear = |i: usize, o: usize| i * o + o;
        let norm = |n: usize| 2 * n;
        match self.family {
            Family::Vit => {
                let hidden = self.mlp_hidden();
                by_group.insert("embedding".to_string(), linear(self.patch_dim(), d));
                by_group.insert("positional".to_string(), self.num_tokens() * d);
                let block = norm(d)
                    + linear(d, 3 * d)
                    + linear(d, d)
                    + norm(d)
                    + linear(d, hidden)
                    + linear(hidden, d);
                for i in 0..self.depth {
                    by_group.insert(block_group(i), block);
                }
                // the pre-pool norm trains with the last block
                *by_group
                    .get_mut(&block_group(self.depth - 1))
                    .expect("depth > 0") += norm(d);
                by_group.insert("head".to_string(), linear(d, d) + linear(d, 1));
            }
            Family::Cnn3d => {
                for i in 0..self.depth {
                    let cin = if i == 0 { self.patch_dim() } else { d };
                    by_group.insert(
                        block_group(i),
                        linear(9 * cin, d) + linear(3 * d, d) + norm(d),
                    );
                }
                by_group.insert("head".to_string(), linear(d, d) + linear(d, 1));
            }
        }
        ParameterStats::from_groups(by_group)
    }
}

pub fn block_group(i: usize) -> String {
    format!("blocks[{i}]")
}

/// Learnable-scalar counts, total and per parameter group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterStats {
    pub total: usize,
    pub by_group: BTreeMap<String, usize>,
}

impl ParameterStats {
    pub fn from_groups(by_group: BTreeMap<String, usize>) -> Self {
        Self {
            total: by_group.values().sum(),
            by_group,
        }
    }

    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_geometry() {
        let cfg = ModelConfig::vit(8, 1, 2).with_geometry(8, 30, 32);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("height % tubelet_h == 0"), "{err}");
    }

    #[test]
    fn rejects_heads_not_dividing_width() {
        let err = ModelConfig::vit(10, 1, 3)
            .validate()
            .unwrap_err()
            .to_string();
        assert!(err.contains("embed_dim % num_heads == 0"), "{err}");
    }

    #[test]
    fn cnn_checks_unshuffle_and_downsampling() {
        let mut cfg = ModelConfig::cnn3d(8, 4).with_tubelet(3, 2, 4);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.num_downsamples(), 2);
        assert_eq!(cfg.patch_dim(), 24);
        cfg.width = 24;
        assert!(cfg.validate().is_err());
        cfg.width = 32;
        cfg.height = 28;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_geometry_token_count() {
        assert_eq!(ModelConfig::vit(32, 4, 4).num_tokens(), 8 * 4 * 4);
        assert_eq!(ModelConfig::full_scale_small().num_tokens(), 8 * 16 * 16);
    }
}
