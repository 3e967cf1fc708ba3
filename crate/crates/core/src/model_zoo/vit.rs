//! Tubelet embedding and pre-norm transformer blocks.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use super::clip::{normalize_pixel, VideoClip};
use super::config::ModelConfig;
use super::layers::{
    gelu_backward, gelu_map, softmax_rows, softmax_rows_backward, LayerNorm, Linear, LnCache,
};
use super::param::Param;

/// Flattens a clip into one row per tubelet.
///
/// Tokens are ordered `(t, y, x)` over the tubelet grid; each row holds the
/// tubelet's normalized pixels ordered `(dt, channel, dy, dx)`.
pub fn patchify(clip: &VideoClip, cfg: &ModelConfig) -> Array2<f64> {
    let (gt, gh, gw) = cfg.grid();
    let (tt, th, tw) = (cfg.tubelet_t, cfg.tubelet_h, cfg.tubelet_w);
    let data = clip.data();
    let mut out = Array2::zeros((gt * gh * gw, cfg.patch_dim()));
    for ti in 0..gt {
        for yi in 0..gh {
            for xi in 0..gw {
                let token = (ti * gh + yi) * gw + xi;
                let mut row = out.row_mut(token);
                let mut k = 0;
                for dt in 0..tt {
                    for c in 0..3 {
                        for dy in 0..th {
                            for dx in 0..tw {
                                row[k] = normalize_pixel(
                                    data[[ti * tt + dt, c, yi * th + dy, xi * tw + dx]],
                                );
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeletEmbed {
    pub proj: Linear,
    pub pos: Param,
}

impl TubeletEmbed {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let proj = Linear::new(cfg.patch_dim(), cfg.embed_dim, rng);
        let pos = Param::trunc_normal(
            &[cfg.num_tokens(), cfg.embed_dim],
            super::param::INIT_STD,
            rng,
        );
        Self { proj, pos }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            proj: self.proj.zeros_like(),
            pos: Param::zeros(self.pos.shape()),
        }
    }

    pub fn forward(&self, patches: ArrayView2<f64>) -> Array2<f64> {
        let mut x = self.proj.forward(patches);
        x += &self.pos.mat();
        x
    }

    pub fn backward(&self, patches: ArrayView2<f64>, dx: ArrayView2<f64>, grad: &mut TubeletEmbed) {
        let mut gp = grad.pos.mat_mut();
        gp += &dx;
        self.proj.backward(patches, dx, &mut grad.proj, false);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct VitBlockCache {
    ln1: LnCache,
    xn1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    xn2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl VitBlock {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        Self {
            heads: cfg.num_heads,
            ln1: LayerNorm::new(d),
            qkv: Linear::new(d, 3 * d, rng),
            proj: Linear::new(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, hidden, rng),
            fc2: Linear::new(hidden, d, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            ln1: self.ln1.zeros_like(),
            qkv: self.qkv.zeros_like(),
            proj: self.proj.zeros_like(),
            ln2: self.ln2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    fn dim(&self) -> usize {
        self.proj.outputs()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, VitBlockCache) {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (xn1, ln1) = self.ln1.forward_train(x);
        let qkv = self.qkv.forward(xn1.view());
        let mut attn = Array2::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            p *= scale;
            softmax_rows(&mut p);
            attn.slice_mut(s![.., h * dh..(h + 1) * dh])
                .assign(&p.dot(&v));
            probs.push(p);
        }
        let mut hid = self.proj.forward(attn.view());
        hid += &x;

        let (xn2, ln2) = self.ln2.forward_train(hid.view());
        let pre = self.fc1.forward(xn2.view());
        let act = gelu_map(&pre);
        let mut y = self.fc2.forward(act.view());
        y += &hid;

        let cache = VitBlockCache {
            ln1,
            xn1,
            qkv,
            probs,
            attn,
            ln2,
            xn2,
            pre,
            act,
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &VitBlockCache,
        dy: ArrayView2<f64>,
        grad: &mut VitBlock,
    ) -> Array2<f64> {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let d_act = self
            .fc2
            .backward(cache.act.view(), dy, &mut grad.fc2, true)
            .expect("dx requested");
        let d_pre = gelu_backward(&cache.pre, d_act.view());
        let d_xn2 = self
            .fc1
            .backward(cache.xn2.view(), d_pre.view(), &mut grad.fc1, true)
            .expect("dx requested");
        let mut d_hid = self.ln2.backward(&cache.ln2, d_xn2.view(), &mut grad.ln2);
        d_hid += &dy;

        let d_attn = self
            .proj
            .backward(cache.attn.view(), d_hid.view(), &mut grad.proj, true)
            .expect("dx requested");
        let mut d_qkv = Array2::zeros(cache.qkv.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = cache.qkv.slice(s![.., qs..qs + dh]);
            let k = cache.qkv.slice(s![.., ks..ks + dh]);
            let v = cache.qkv.slice(s![.., vs..vs + dh]);
            let d_out = d_attn.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = d_out.dot(&v.t());
            d_qkv
                .slice_mut(s![.., vs..vs + dh])
                .assign(&p.t().dot(&d_out));
            let mut ds = softmax_rows_backward(p, &dp);
            ds *= scale;
            d_qkv.slice_mut(s![.., qs..qs + dh]).assign(&ds.dot(&k));
            d_qkv.slice_mut(s![.., ks..ks + dh]).assign(&ds.t().dot(&q));
        }
        let d_xn1 = self
            .qkv
            .backward(cache.xn1.view(), d_qkv.view(), &mut grad.qkv, true)
            .expect("dx requested");
        let mut dx = self.ln1.backward(&cache.ln1, d_xn1.view(), &mut grad.ln1);
        dx += &d_hid;
        dx
    }

    pub fn tensors(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::with_capacity(12);
        for (layer, ts) in [
            ("norm1", self.ln1.tensors()),
            ("attn.qkv", self.qkv.tensors()),
            ("attn.proj", self.proj.tensors()),
            ("norm2", self.ln2.tensors()),
            ("mlp.fc1", self.fc1.tensors()),
            ("mlp.fc2", self.fc2.tensors()),
        ] {
            out.extend(ts.into_iter().map(|(n, p)| (format!("{layer}.{n}"), p)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::with_capacity(12);
        for (layer, ts) in [
            ("norm1", self.ln1.tensors_mut()),
            ("attn.qkv", self.qkv.tensors_mut()),
            ("attn.proj", self.proj.tensors_mut()),
            ("norm2", self.ln2.tensors_mut()),
            ("mlp.fc1", self.fc1.tensors_mut()),
            ("mlp.fc2", self.fc2.tensors_mut()),
        ] {
            out.extend(ts.into_iter().map(|(n, p)| (format!("{layer}.{n}"), p)));
        }
        out
    }
}
