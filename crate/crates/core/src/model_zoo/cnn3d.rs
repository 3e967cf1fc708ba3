//! Factorized 3D convolution stages for the heterogeneous student.
//!
//! A stage is a 1x3x3 spatial convolution followed by a 3x1x1 temporal
//! convolution (together a 3x3x3 receptive field), channel layer-norm, GELU,
//! and an optional 2x2 spatial average pool. Activations are channels-last
//! `[t * h * w, channels]` with rows ordered `(t, y, x)`; convolutions are
//! zero-padded and run as im2col followed by a matrix product.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::layers::{gelu_backward, gelu_map, LayerNorm, Linear, LnCache};
use super::param::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Geom {
    pub fn positions(&self) -> usize {
        self.t * self.h * self.w
    }

    fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }

    pub fn pooled(&self) -> Geom {
        Geom {
            t: self.t,
            h: self.h / 2,
            w: self.w / 2,
        }
    }
}

fn im2col_spatial(x: ArrayView2<f64>, g: Geom) -> Array2<f64> {
    let cin = x.ncols();
    let mut cols = Array2::zeros((g.positions(), 9 * cin));
    for t in 0..g.t {
        for y in 0..g.h {
            for xx in 0..g.w {
                let mut row = cols.row_mut(g.index(t, y, xx));
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy == 0 || sy > g.h {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx + kx;
                        if sx == 0 || sx > g.w {
                            continue;
                        }
                        let src = x.row(g.index(t, sy - 1, sx - 1));
                        let off = (ky * 3 + kx) * cin;
                        for c in 0..cin {
                            row[off + c] = src[c];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_spatial(cols: ArrayView2<f64>, g: Geom) -> Array2<f64> {
    let cin = cols.ncols() / 9;
    let mut x = Array2::zeros((g.positions(), cin));
    for t in 0..g.t {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = cols.row(g.index(t, y, xx));
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy == 0 || sy > g.h {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx + kx;
                        if sx == 0 || sx > g.w {
                            continue;
                        }
                        let mut dst = x.row_mut(g.index(t, sy - 1, sx - 1));
                        let off = (ky * 3 + kx) * cin;
                        for c in 0..cin {
                            dst[c] += row[off + c];
                        }
                    }
                }
            }
        }
    }
    x
}

fn im2col_temporal(x: ArrayView2<f64>, g: Geom) -> Array2<f64> {
    let c = x.ncols();
    let plane = g.h * g.w;
    let mut cols = Array2::zeros((g.positions(), 3 * c));
    for t in 0..g.t {
        for kt in 0..3 {
            let st = t + kt;
            if st == 0 || st > g.t {
                continue;
            }
            for p in 0..plane {
                let src = x.row((st - 1) * plane + p);
                let mut dst = cols.row_mut(t * plane + p);
                for ch in 0..c {
                    dst[kt * c + ch] = src[ch];
                }
            }
        }
    }
    cols
}

fn col2im_temporal(cols: ArrayView2<f64>, g: Geom) -> Array2<f64> {
    let c = cols.ncols() / 3;
    let plane = g.h * g.w;
    let mut x = Array2::zeros((g.positions(), c));
    for t in 0..g.t {
        for kt in 0..3 {
            let st = t + kt;
            if st == 0 || st > g.t {
                continue;
            }
            for p in 0..plane {
                let src = cols.row(t * plane + p);
                let mut dst = x.row_mut((st - 1) * plane + p);
                for ch in 0..c {
                    dst[ch] += src[kt * c + ch];
                }
            }
        }
    }
    x
}

fn avg_pool2(x: ArrayView2<f64>, g: Geom) -> Array2<f64> {
    let out_g = g.pooled();
    let mut out = Array2::zeros((out_g.positions(), x.ncols()));
    for t in 0..g.t {
        for y in 0..g.h {
            for xx in 0..g.w {
                let mut dst = out.row_mut(out_g.index(t, y / 2, xx / 2));
                dst.scaled_add(0.25, &x.row(g.index(t, y, xx)));
            }
        }
    }
    out
}

fn avg_pool2_backward(dy: ArrayView2<f64>, g: Geom) -> Array2<f64> {
    let out_g = g.pooled();
    let mut dx = Array2::zeros((g.positions(), dy.ncols()));
    for t in 0..g.t {
        for y in 0..g.h {
            for xx in 0..g.w {
                let mut dst = dx.row_mut(g.index(t, y, xx));
                dst.scaled_add(0.25, &dy.row(out_g.index(t, y / 2, xx / 2)));
            }
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub geom: Geom,
    pub downsample: bool,
    pub spatial: Linear,
    pub temporal: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct ConvStageCache {
    spatial_cols: Array2<f64>,
    temporal_cols: Array2<f64>,
    norm: LnCache,
    pre: Array2<f64>,
}

impl ConvStage {
    pub fn new<R: Rng + ?Sized>(
        geom: Geom,
        cin: usize,
        cout: usize,
        downsample: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            geom,
            downsample,
            spatial: Linear::new(9 * cin, cout, rng),
            temporal: Linear::new(3 * cout, cout, rng),
            norm: LayerNorm::new(cout),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            geom: self.geom,
            downsample: self.downsample,
            spatial: self.spatial.zeros_like(),
            temporal: self.temporal.zeros_like(),
            norm: self.norm.zeros_like(),
        }
    }

    pub fn output_geom(&self) -> Geom {
        if self.downsample {
            self.geom.pooled()
        } else {
            self.geom
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, ConvStageCache) {
        let spatial_cols = im2col_spatial(x, self.geom);
        let a = self.spatial.forward(spatial_cols.view());
        let temporal_cols = im2col_temporal(a.view(), self.geom);
        let b = self.temporal.forward(temporal_cols.view());
        let (pre, norm) = self.norm.forward_train(b.view());
        let act = gelu_map(&pre);
        let y = if self.downsample {
            avg_pool2(act.view(), self.geom)
        } else {
            act
        };
        let cache = ConvStageCache {
            spatial_cols,
            temporal_cols,
            norm,
            pre,
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &ConvStageCache,
        dy: ArrayView2<f64>,
        grad: &mut ConvStage,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        let d_act = if self.downsample {
            avg_pool2_backward(dy, self.geom)
        } else {
            dy.to_owned()
        };
        let d_pre = gelu_backward(&cache.pre, d_act.view());
        let d_b = self
            .norm
            .backward(&cache.norm, d_pre.view(), &mut grad.norm);
        let d_tcols = self
            .temporal
            .backward(
                cache.temporal_cols.view(),
                d_b.view(),
                &mut grad.temporal,
                true,
            )
            .expect("dx requested");
        let d_a = col2im_temporal(d_tcols.view(), self.geom);
        self.spatial
            .backward(
                cache.spatial_cols.view(),
                d_a.view(),
                &mut grad.spatial,
                need_dx,
            )
            .map(|d_scols| col2im_spatial(d_scols.view(), self.geom))
    }

    pub fn tensors(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::with_capacity(6);
        for (layer, ts) in [
            ("conv_spatial", self.spatial.tensors()),
            ("conv_temporal", self.temporal.tensors()),
        ] {
            out.extend(ts.into_iter().map(|(n, p)| (format!("{layer}.{n}"), p)));
        }
        out.extend(
            self.norm
                .tensors()
                .into_iter()
                .map(|(n, p)| (format!("norm.{n}"), p)),
        );
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::with_capacity(6);
        for (layer, ts) in [
            ("conv_spatial", self.spatial.tensors_mut()),
            ("conv_temporal", self.temporal.tensors_mut()),
        ] {
            out.extend(ts.into_iter().map(|(n, p)| (format!("{layer}.{n}"), p)));
        }
        out.extend(
            self.norm
                .tensors_mut()
                .into_iter()
                .map(|(n, p)| (format!("norm.{n}"), p)),
        );
        out
    }
}
