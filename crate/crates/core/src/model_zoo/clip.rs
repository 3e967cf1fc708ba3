use ndarray::{Array1, Array2, Array4};

use crate::error::{Error, Result};

/// A clip of RGB frames laid out `[frames, 3, height, width]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    data: Array4<f64>,
}

impl VideoClip {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let shape = data.shape();
        if shape[1] != 3 {
            return Err(Error::Shape {
                expected: vec![shape[0], 3, shape[2], shape[3]],
                actual: shape.to_vec(),
            });
        }
        if shape.contains(&0) {
            return Err(Error::Argument(format!("empty clip of shape {shape:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("clip contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((frames, 3, height, width)),
        }
    }

    /// Wraps data already known to be well formed.
    pub(crate) fn from_array_unchecked(data: Array4<f64>) -> Self {
        debug_assert_eq!(data.shape()[1], 3);
        Self { data }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.frames(), self.height(), self.width())
    }
}

/// Maps a pixel in `[0, 1]` to the encoder input scale: centered on
/// mid-gray and stretched so the fine detail distortions remove is not
/// dwarfed by the embedding initialization.
pub fn normalize_pixel(v: f64) -> f64 {
    (v - 0.5) * 4.0
}

/// Token activations `[num_tokens, embed_dim]` inside a ViT.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence(pub Array2<f64>);

/// Final-layer feature, mean-pooled over positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature(pub Array1<f64>);

impl PooledFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityPrediction {
    pub score: f64,
}
