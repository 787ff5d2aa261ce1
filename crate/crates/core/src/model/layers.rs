//! Dense layer primitives with hand-written backward passes: affine maps,
//! layer normalization, and the tanh-form GELU. Forward calls cache what
//! their backward needs; backward accumulates into the layer's gradient
//! buffers and returns the input gradient.

use super::ParamView;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Standard deviation used for every learned tensor.
pub(crate) const INIT_STD: f64 = 0.02;

const LN_EPS: f64 = 1e-5;

/// Normal sample clipped by redrawing until it lands within two standard
/// deviations, keeping initial weights small and bounded.
pub(crate) fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

pub(crate) fn init_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| truncated_normal(rng, INIT_STD))
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`] with respect to its input.
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Affine map `y = x W + b` with `W: (in, out)`.
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    dw: Array2<f64>,
    db: Array1<f64>,
    cache_x: Option<Array2<f64>>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: init_matrix(rng, in_dim, out_dim),
            b: Array1::zeros(out_dim),
            dw: Array2::zeros((in_dim, out_dim)),
            db: Array1::zeros(out_dim),
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.forward_inference(x);
        self.cache_x = Some(x.clone());
        y
    }

    pub fn forward_inference(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates `dW`/`db` from the cached input and returns `dX`.
    pub fn backward(&mut self, dout: &Array2<f64>) -> Array2<f64> {
        let x = self
            .cache_x
            .take()
            .expect("backward requires a prior forward");
        self.dw += &x.t().dot(dout);
        self.db += &dout.sum_axis(Axis(0));
        dout.dot(&self.w.t())
    }

    pub fn visit<F: FnMut(ParamView)>(&mut self, prefix: &str, f: &mut F) {
        f(ParamView {
            name: format!("{prefix}.w"),
            shape: vec![self.w.nrows(), self.w.ncols()],
            value: self.w.as_slice_mut().unwrap(),
            grad: self.dw.as_slice_mut().unwrap(),
            decay: true,
        });
        f(ParamView {
            name: format!("{prefix}.b"),
            shape: vec![self.b.len()],
            value: self.b.as_slice_mut().unwrap(),
            grad: self.db.as_slice_mut().unwrap(),
            decay: false,
        });
    }
}

/// Layer normalization over the feature axis, learnable gain and bias.
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
    dgain: Array1<f64>,
    dbias: Array1<f64>,
    cache: Option<LnCache>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
            dgain: Array1::zeros(dim),
            dbias: Array1::zeros(dim),
            cache: None,
        }
    }

    fn normalize(&self, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * *inv);
        }
        (xhat, inv_std)
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (xhat, inv_std) = self.normalize(x);
        let y = &xhat * &self.gain + &self.bias;
        self.cache = Some(LnCache { xhat, inv_std });
        y
    }

    pub fn forward_inference(&self, x: &Array2<f64>) -> Array2<f64> {
        let (xhat, _) = self.normalize(x);
        &xhat * &self.gain + &self.bias
    }

    /// Accumulates gain/bias gradients and returns `dX`:
    /// `dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))` per row,
    /// where `g = dout * gain`.
    pub fn backward(&mut self, dout: &Array2<f64>) -> Array2<f64> {
        let cache = self
            .cache
            .take()
            .expect("backward requires a prior forward");
        let d = dout.ncols() as f64;
        for (dy_row, xhat_row) in dout.rows().into_iter().zip(cache.xhat.rows()) {
            for c in 0..dout.ncols() {
                self.dgain[c] += dy_row[c] * xhat_row[c];
                self.dbias[c] += dy_row[c];
            }
        }
        let mut dx = Array2::zeros(dout.dim());
        for i in 0..dout.nrows() {
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for c in 0..dout.ncols() {
                let g = dout[[i, c]] * self.gain[c];
                mean_g += g;
                mean_gx += g * cache.xhat[[i, c]];
            }
            mean_g /= d;
            mean_gx /= d;
            for c in 0..dout.ncols() {
                let g = dout[[i, c]] * self.gain[c];
                dx[[i, c]] = cache.inv_std[i] * (g - mean_g - cache.xhat[[i, c]] * mean_gx);
            }
        }
        dx
    }

    pub fn visit<F: FnMut(ParamView)>(&mut self, prefix: &str, f: &mut F) {
        f(ParamView {
            name: format!("{prefix}.gain"),
            shape: vec![self.gain.len()],
            value: self.gain.as_slice_mut().unwrap(),
            grad: self.dgain.as_slice_mut().unwrap(),
            decay: false,
        });
        f(ParamView {
            name: format!("{prefix}.bias"),
            shape: vec![self.bias.len()],
            value: self.bias.as_slice_mut().unwrap(),
            grad: self.dbias.as_slice_mut().unwrap(),
            decay: false,
        });
    }
}
