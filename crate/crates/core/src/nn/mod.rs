//! Minimal differentiable building blocks with hand-derived gradients: dense
//! layers over f64 vectors, a Gaussian variational bottleneck, a vector
//! quantization codebook with straight-through gradients, and an action
//! prediction head conditioned on the horizon.
//!
//! Inputs are sparse multi-hot index lists (the environments render exactly
//! one hot entry per maze block), which the first layer exploits directly.

mod adam;
mod checkpoint;
mod gradcheck;
mod stack;

pub use adam::Adam;
pub use checkpoint::{load_stack, save_stack};
pub use gradcheck::{analytic_grads, fd_grad, grad_check, CheckSample};
pub use stack::{
    BackpropMode, BatchLosses, Decoder, EncodeResult, EncoderStack, PairSample, StackConfig,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite activation in layer `{layer}`")]
    NonFinite { layer: String },
    #[error("non-finite gradient in parameter `{path}`")]
    NonFiniteGrad { path: String },
    #[error("checkpoint is malformed: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Uniform init scaled by the fan-in.
    pub fn init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl DenseLayer {
    pub fn new(in_dim: usize, out_dim: usize, act: Activation, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Matrix::init(out_dim, in_dim, rng),
            b: vec![0.0; out_dim],
            act,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows, self.w.cols),
            b: vec![0.0; self.b.len()],
            act: self.act,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        let mut y = self.b.clone();
        for (i, out) in y.iter_mut().enumerate() {
            let row = self.w.row(i);
            let mut acc = 0.0;
            for (wj, xj) in row.iter().zip(x.iter()) {
                if *xj != 0.0 {
                    acc += wj * xj;
                }
            }
            *out += acc;
            if self.act == Activation::Relu && *out < 0.0 {
                *out = 0.0;
            }
        }
        y
    }

    /// Forward for a multi-hot input given as hot indices (values 1.0).
    pub fn forward_hot(&self, hot: &[u32]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, out) in y.iter_mut().enumerate() {
            let row = self.w.row(i);
            for &j in hot {
                *out += row[j as usize];
            }
            if self.act == Activation::Relu && *out < 0.0 {
                *out = 0.0;
            }
        }
        y
    }

    /// Accumulates parameter gradients given the layer input and the loss
    /// gradient at the layer output (after activation), and returns the loss
    /// gradient at the layer input unless `want_dx` is false.
    pub fn backward(
        &self,
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        grads: &mut DenseLayer,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let delta: Vec<f64> = match self.act {
            Activation::Identity => dy.to_vec(),
            Activation::Relu => dy
                .iter()
                .zip(y.iter())
                .map(|(d, out)| if *out > 0.0 { *d } else { 0.0 })
                .collect(),
        };
        for (i, &di) in delta.iter().enumerate() {
            grads.b[i] += di;
            if di == 0.0 {
                continue;
            }
            let grow = grads.w.row_mut(i);
            for (gj, xj) in grow.iter_mut().zip(x.iter()) {
                if *xj != 0.0 {
                    *gj += di * xj;
                }
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = vec![0.0; self.in_dim()];
        for (i, &di) in delta.iter().enumerate() {
            if di == 0.0 {
                continue;
            }
            let row = self.w.row(i);
            for (dxj, wj) in dx.iter_mut().zip(row.iter()) {
                *dxj += di * wj;
            }
        }
        Some(dx)
    }

    /// Backward for a multi-hot input; the input gradient is never needed.
    pub fn backward_hot(&self, hot: &[u32], y: &[f64], dy: &[f64], grads: &mut DenseLayer) {
        for i in 0..self.out_dim() {
            let di = match self.act {
                Activation::Identity => dy[i],
                Activation::Relu => {
                    if y[i] > 0.0 {
                        dy[i]
                    } else {
                        0.0
                    }
                }
            };
            grads.b[i] += di;
            if di == 0.0 {
                continue;
            }
            let grow = grads.w.row_mut(i);
            for &j in hot {
                grow[j as usize] += di;
            }
        }
    }
}

/// A stack of dense layers with a per-layer activation tag.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

/// Per-call cache of layer outputs; `outs[i]` is the output of layer `i`.
#[derive(Debug, Clone, Default)]
pub struct NetCache {
    pub outs: Vec<Vec<f64>>,
}

impl DenseNet {
    pub fn new(in_dim: usize, layers: &[(usize, Activation)], rng: &mut ChaCha8Rng) -> Self {
        let mut built = Vec::new();
        let mut prev = in_dim;
        for &(dim, act) in layers {
            built.push(DenseLayer::new(prev, dim, act, rng));
            prev = dim;
        }
        Self { layers: built }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty net").out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> (NetCache, Vec<f64>) {
        let mut cache = NetCache::default();
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward(&cur);
            cache.outs.push(cur.clone());
        }
        (cache, cur)
    }

    pub fn forward_hot(&self, hot: &[u32]) -> (NetCache, Vec<f64>) {
        let mut cache = NetCache::default();
        let mut cur = self.layers[0].forward_hot(hot);
        cache.outs.push(cur.clone());
        for layer in &self.layers[1..] {
            cur = layer.forward(&cur);
            cache.outs.push(cur.clone());
        }
        (cache, cur)
    }

    /// Backward through all layers; `x` is the original dense input.
    pub fn backward(
        &self,
        x: &[f64],
        cache: &NetCache,
        dy: &[f64],
        grads: &mut DenseNet,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let mut grad = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input: &[f64] = if i == 0 { x } else { &cache.outs[i - 1] };
            let need_dx = i > 0 || want_dx;
            match layer.backward(input, &cache.outs[i], &grad, &mut grads.layers[i], need_dx) {
                Some(dx) => grad = dx,
                None => return None,
            }
        }
        Some(grad)
    }

    /// Backward when the input was multi-hot; no input gradient.
    pub fn backward_hot(&self, hot: &[u32], cache: &NetCache, dy: &[f64], grads: &mut DenseNet) {
        let mut grad = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev().take(self.layers.len() - 1) {
            let input = &cache.outs[i - 1];
            grad = layer
                .backward(input, &cache.outs[i], &grad, &mut grads.layers[i], true)
                .expect("dx requested");
        }
        self.layers[0].backward_hot(hot, &cache.outs[0], &grad, &mut grads.layers[0]);
    }

    /// First non-finite activation, reported by layer index.
    pub fn check_finite(&self, cache: &NetCache, name: &str) -> Result<(), NnError> {
        for (i, out) in cache.outs.iter().enumerate() {
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite {
                    layer: format!("{name}.{i}"),
                });
            }
        }
        Ok(())
    }
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Softmax probabilities.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// One standard normal draw via Box-Muller (two uniforms per draw, so the
/// stream advances deterministically).
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
