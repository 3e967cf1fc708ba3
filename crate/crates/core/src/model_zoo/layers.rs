//! Dense building blocks with hand-written backward passes.
//!
//! Activations are `[rows, features]` matrices. Every `backward` accumulates
//! into a gradient twin of the layer (same type, same shapes) so a whole model
//! can serve as its own gradient buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::param::{Param, INIT_STD};

pub const LN_EPS: f64 = 1e-6;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::with_std(inputs, outputs, INIT_STD, rng)
    }

    /// Weights drawn with standard deviation `1/sqrt(inputs)`, so the output
    /// keeps the scale of the input.
    pub fn fan_in<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::with_std(inputs, outputs, 1.0 / (inputs as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::trunc_normal(&[inputs, outputs], std, rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Param::zeros(self.weight.shape()),
            bias: Param::zeros(self.bias.shape()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.mat());
        y += &self.bias.vec();
        y
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when `need_dx` is set.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut Linear,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.weight.mat_mut());
        let mut gb = grad.bias.vec_mut();
        gb += &dy.sum_axis(Axis(0));
        need_dx.then(|| dy.dot(&self.weight.mat().t()))
    }

    pub fn tensors(&self) -> [(&'static str, &Param); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Param); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Layer normalization over the feature axis of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(&[dim], 1.0),
            beta: Param::zeros(&[dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Param::zeros(self.gamma.shape()),
            beta: Param::zeros(self.beta.shape()),
        }
    }

    fn normalize(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let dim = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / dim;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        (xhat, rstd)
    }

    fn affine(&self, xhat: &Array2<f64>) -> Array2<f64> {
        let mut y = xhat * &self.gamma.vec();
        y += &self.beta.vec();
        y
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let (xhat, _) = Self::normalize(x);
        self.affine(&xhat)
    }

    pub fn forward_train(&self, x: ArrayView2<f64>) -> (Array2<f64>, LnCache) {
        let (xhat, rstd) = Self::normalize(x);
        let y = self.affine(&xhat);
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &LnCache,
        dy: ArrayView2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let dim = dy.ncols() as f64;
        let mut gg = grad.gamma.vec_mut();
        gg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        let mut gb = grad.beta.vec_mut();
        gb += &dy.sum_axis(Axis(0));

        let mut dx = &dy * &self.gamma.vec();
        for ((mut row, xhat), &rstd) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let mean_d = row.sum() / dim;
            let mean_dx = row.dot(&xhat) / dim;
            Zip::from(&mut row)
                .and(&xhat)
                .for_each(|d, &xh| *d = rstd * (*d - mean_d - xh * mean_dx));
        }
        dx
    }

    pub fn tensors(&self) -> [(&'static str, &Param); 2] {
        [("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Param); 2] {
        [("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn gelu_map(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// `dy * gelu'(pre)`
pub fn gelu_backward(pre: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx)
        .and(pre)
        .for_each(|d, &p| *d *= gelu_grad(p));
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Backward of row-wise softmax given its output `p`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = dp.clone();
    for ((mut d, p_row), dp_row) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = p_row.dot(&dp_row);
        Zip::from(&mut d)
            .and(&p_row)
            .for_each(|d, &p| *d = p * (*d - dot));
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1.0, 2.0, 3.0], [-1000.0, 0.0, 1000.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::new(4);
        let x = array![[1.0, 2.0, 3.0, 4.0], [10.0, -10.0, 0.0, 5.0]];
        let y = ln.forward(x.view());
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::new(3, 2, &mut rng);
        let x = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        // loss = sum(y * c)
        let c = array![[1.0, -2.0], [0.5, 3.0]];
        let loss = |l: &Linear, x: &Array2<f64>| (l.forward(x.view()) * &c).sum();
        let mut grad = lin.zeros_like();
        let dx = lin.backward(x.view(), c.view(), &mut grad, true).unwrap();
        let h = 1e-6;
        for i in 0..lin.weight.len() {
            let mut p = lin.clone();
            p.weight.data_mut()[i] += h;
            let mut m = lin.clone();
            m.weight.data_mut()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grad.weight.data()[i]).abs() < 1e-8);
        }
        for ((r, col), &g) in ndarray::indices((2, 3)).into_iter().zip(dx.iter()) {
            let mut xp = x.clone();
            xp[[r, col]] += h;
            let mut xm = x.clone();
            xm[[r, col]] -= h;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-8);
        }
    }
}
