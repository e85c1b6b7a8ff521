//! Central finite-difference validation of the hand-derived gradients.
//!
//! The checked loss is the fully differentiable surrogate: the inverse head
//! reads the bottleneck embedding directly (codebook bypassed), while the
//! codebook pull and commitment terms are evaluated against frozen copies of
//! their stop-gradient operands, so every term is smooth in the parameters
//! and the analytic gradients of the training backward pass must match
//! central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{BackpropMode, EncoderStack, NnError, PairSample};

/// The sample a gradient check runs on. Evaluation-mode encodings keep the
/// loss deterministic.
#[derive(Debug, Clone)]
pub struct CheckSample {
    pub obs_t: Vec<u32>,
    pub obs_tk: Vec<u32>,
    pub k: usize,
    pub action: usize,
}

impl CheckSample {
    fn pair(&self) -> PairSample<'_> {
        PairSample {
            obs_t: &self.obs_t,
            obs_tk: &self.obs_tk,
            k: self.k,
            action: self.action,
        }
    }
}

/// Surrogate loss with frozen stop-gradient operands captured at the base
/// point: the commitment term pulls the live embedding toward the frozen
/// codebook rows, and the codebook term pulls the live rows toward the
/// frozen embeddings.
fn surrogate_loss(stack: &EncoderStack, sample: &CheckSample, frozen: &Frozen) -> f64 {
    let enc_t = stack.encode(&sample.obs_t, None).expect("finite");
    let enc_tk = stack.encode(&sample.obs_tk, None).expect("finite");
    let (logits, _, _) =
        stack.inverse_logits(&enc_t, &enc_tk, sample.k, BackpropMode::SURROGATE);
    let ce = super::log_sum_exp(&logits) - logits[sample.action];

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let vq = dist(stack.codebook.row(frozen.code_t), &frozen.z_t)
        + dist(stack.codebook.row(frozen.code_tk), &frozen.z_tk);
    let commit = dist(&enc_t.z, &frozen.row_t) + dist(&enc_tk.z, &frozen.row_tk);

    ce + stack.cfg.beta * (enc_t.kl + enc_tk.kl)
        + stack.cfg.vq_weight * vq
        + stack.cfg.commit_weight * commit
}

struct Frozen {
    z_t: Vec<f64>,
    z_tk: Vec<f64>,
    code_t: usize,
    code_tk: usize,
    row_t: Vec<f64>,
    row_tk: Vec<f64>,
}

fn freeze(stack: &EncoderStack, sample: &CheckSample) -> Frozen {
    let enc_t = stack.encode(&sample.obs_t, None).expect("finite");
    let enc_tk = stack.encode(&sample.obs_tk, None).expect("finite");
    Frozen {
        row_t: stack.codebook.row(enc_t.code).to_vec(),
        row_tk: stack.codebook.row(enc_tk.code).to_vec(),
        code_t: enc_t.code,
        code_tk: enc_tk.code,
        z_t: enc_t.z,
        z_tk: enc_tk.z,
    }
}

/// Analytic gradients of the surrogate loss, flattened in tensor traversal
/// order. Returns the loss value alongside.
pub fn analytic_grads(stack: &EncoderStack, sample: &CheckSample) -> Result<(f64, Vec<f64>), NnError> {
    let mut grads = stack.zeros_like();
    let losses = stack.inverse_pair_step(sample.pair(), None, BackpropMode::SURROGATE, &mut grads)?;
    let mut flat = Vec::new();
    for (_, tensor) in grads.tensors_mut() {
        flat.extend_from_slice(tensor);
    }
    Ok((losses.total, flat))
}

/// Central finite difference of the surrogate loss along one flattened
/// parameter.
pub fn fd_grad(stack: &mut EncoderStack, sample: &CheckSample, flat_idx: usize, eps: f64) -> f64 {
    let frozen = freeze(stack, sample);
    let nudge = |stack: &mut EncoderStack, delta: f64| {
        let mut remaining = flat_idx;
        for (_, tensor) in stack.tensors_mut() {
            if remaining < tensor.len() {
                tensor[remaining] += delta;
                return;
            }
            remaining -= tensor.len();
        }
        panic!("flat index out of range");
    };
    nudge(stack, eps);
    let plus = surrogate_loss(stack, sample, &frozen);
    nudge(stack, -2.0 * eps);
    let minus = surrogate_loss(stack, sample, &frozen);
    nudge(stack, eps);
    (plus - minus) / (2.0 * eps)
}

/// Compares analytic gradients against central differences on `n_params`
/// randomly chosen parameters and returns the maximum relative error.
pub fn grad_check(
    stack: &mut EncoderStack,
    sample: &CheckSample,
    eps: f64,
    n_params: usize,
    seed: u64,
) -> Result<f64, NnError> {
    assert!((1e-7..=1e-3).contains(&eps), "step size in supported range");
    let (_, analytic) = analytic_grads(stack, sample)?;
    let total = stack.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    for _ in 0..n_params {
        let idx = rng.gen_range(0..total);
        let numeric = fd_grad(stack, sample, idx, eps);
        let denom = (numeric.abs() + analytic[idx].abs()).max(1e-8);
        max_rel = max_rel.max((numeric - analytic[idx]).abs() / denom);
    }
    Ok(max_rel)
}
