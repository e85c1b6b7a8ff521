//! Training loops: random-policy data collection, offline multi-step
//! inverse training with the bottleneck, the one-step / autoencoder /
//! temporal-contrastive baselines, and the online goal-seeking loop that
//! interleaves planning over the learned latent graph with training.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::nn::{
    Adam, BackpropMode, BatchLosses, Decoder, EncoderStack, NnError, PairSample, StackConfig,
};
use crate::planner::{findgoal, plan, LatentMdp, PlanError};

/// Hyperparameters for all training methods.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Max inverse-model horizon K; should be at least the controllable
    /// diameter of the environment.
    pub k_max: usize,
    /// Codebook size M.
    pub n_codes: usize,
    /// Bottleneck dimension d.
    pub bottleneck_dim: usize,
    /// Gaussian KL weight.
    pub beta: f64,
    pub vq_weight: f64,
    pub commit_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gradient steps N for offline training.
    pub iterations: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub head_hidden: usize,
    pub k_embed_dim: usize,
    /// Reinitialize codebook rows unused for this many iterations (0 = off).
    pub dead_code_interval: usize,
    /// Temperature of the contrastive baseline.
    pub temperature: f64,
    /// Batch size of the per-step gradient update in the planning loop.
    pub planning_batch: usize,
    /// Rebuild the latent count graph from the buffer with the current
    /// encoder every this many steps (0 = never).
    pub graph_rebuild_every: usize,
    /// Consecutive planning failures tolerated before falling back to a
    /// random action.
    pub plan_fail_limit: usize,
    /// Record training metrics every this many iterations.
    pub metrics_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_max: 10,
            n_codes: 64,
            bottleneck_dim: 16,
            beta: 1e-3,
            vq_weight: 1.0,
            commit_weight: 0.25,
            learning_rate: 1e-3,
            batch_size: 256,
            iterations: 3000,
            seed: 0,
            hidden_dim: 128,
            head_hidden: 64,
            k_embed_dim: 8,
            dead_code_interval: 200,
            temperature: 0.5,
            planning_batch: 32,
            graph_rebuild_every: 1000,
            plan_fail_limit: 5,
            metrics_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn stack_config(&self, obs_dim: usize, n_actions: usize) -> StackConfig {
        StackConfig {
            obs_dim,
            n_actions,
            hidden_dim: self.hidden_dim,
            bottleneck_dim: self.bottleneck_dim,
            n_codes: self.n_codes,
            k_max: self.k_max,
            k_embed_dim: self.k_embed_dim,
            head_hidden: self.head_hidden,
            beta: self.beta,
            vq_weight: self.vq_weight,
            commit_weight: self.commit_weight,
        }
    }
}

/// A single-trajectory log: T observations, T-1 actions, the indices whose
/// action was drawn uniformly at random, per-index horizon caps, and
/// evaluation-only ground labels that the training path never sees.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub obs_dim: usize,
    pub n_actions: usize,
    /// Hot indices of each multi-hot observation.
    pub observations: Vec<Vec<u32>>,
    pub actions: Vec<u8>,
    /// Sorted action indices whose action was uniform random.
    pub random_marks: Vec<u32>,
    /// Horizon cap per marked index, parallel to `random_marks`.
    pub horizon_caps: Vec<u32>,
    /// Evaluation-only ground controllable-state ids, one per observation.
    pub ground_labels: Option<Vec<u32>>,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) {
        assert_eq!(
            self.actions.len(),
            self.observations.len().saturating_sub(1),
            "one action per adjacent observation pair"
        );
        assert_eq!(self.random_marks.len(), self.horizon_caps.len());
        assert!(self.random_marks.windows(2).all(|w| w[0] < w[1]));
        assert!(self
            .random_marks
            .iter()
            .all(|&t| (t as usize) < self.actions.len()));
        assert!(self.horizon_caps.iter().all(|&k| k >= 1));
        if let Some(labels) = &self.ground_labels {
            assert_eq!(labels.len(), self.observations.len());
        }
    }

    /// The slice of the buffer the training path is allowed to read;
    /// ground labels are structurally absent.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            obs_dim: self.obs_dim,
            n_actions: self.n_actions,
            observations: &self.observations,
            actions: &self.actions,
            random_marks: &self.random_marks,
            horizon_caps: &self.horizon_caps,
        }
    }
}

/// Ground-label-free view of a replay buffer.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub observations: &'a [Vec<u32>],
    pub actions: &'a [u8],
    pub random_marks: &'a [u32],
    pub horizon_caps: &'a [u32],
}

impl<'a> TrainView<'a> {
    /// Samples a training pair: a marked index t and a horizon k with
    /// t + k inside the trajectory, k uniform on the admissible range.
    pub fn sample_pair(&self, k_max: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
        assert!(!self.random_marks.is_empty(), "no marked indices to sample");
        let last_obs = self.observations.len() - 1;
        loop {
            let slot = rng.gen_range(0..self.random_marks.len());
            let t = self.random_marks[slot] as usize;
            let cap = (self.horizon_caps[slot] as usize).min(k_max).min(last_obs - t);
            if cap == 0 {
                continue;
            }
            let k = rng.gen_range(1..=cap);
            debug_assert!(t + k <= last_obs);
            return (t, k);
        }
    }
}

/// Collects a single unbroken trajectory of `t_total` observations under
/// the uniform random policy. Every action index is marked with horizon cap
/// `k_cap`.
pub fn collect_random(
    env: &mut dyn Environment,
    t_total: usize,
    k_cap: usize,
    rng: &mut ChaCha8Rng,
) -> ReplayBuffer {
    assert!(t_total >= 2, "need at least one transition");
    let mut observations = Vec::with_capacity(t_total);
    let mut labels = Vec::with_capacity(t_total);
    let mut actions = Vec::with_capacity(t_total - 1);
    observations.push(env.observe());
    labels.push(env.ground_endo() as u32);
    for _ in 0..t_total - 1 {
        let a = rng.gen_range(0..env.n_actions());
        actions.push(a as u8);
        env.step(a);
        observations.push(env.observe());
        labels.push(env.ground_endo() as u32);
    }
    let buffer = ReplayBuffer {
        obs_dim: env.obs_dim(),
        n_actions: env.n_actions(),
        random_marks: (0..actions.len() as u32).collect(),
        horizon_caps: vec![k_cap as u32; actions.len()],
        observations,
        actions,
        ground_labels: Some(labels),
    };
    buffer.validate();
    buffer
}

/// One metrics record of an offline training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub iteration: usize,
    pub losses: BatchLosses,
    pub codes_used: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stack: EncoderStack,
    /// Distinct eval-mode codes over the training buffer.
    pub codes_used: usize,
    /// Set when fewer than two codes were in use at the end of training.
    pub collapse_warning: bool,
    pub history: Vec<TrainRecord>,
}

/// Distinct eval-mode codes assigned to a set of observations.
pub fn codes_used(stack: &EncoderStack, observations: &[Vec<u32>]) -> BTreeSet<usize> {
    observations.iter().map(|o| stack.code_of(o)).collect()
}

/// Seeds the codebook rows from encoder outputs on random observations, so
/// the initial assignment tracks the data manifold instead of leaving all
/// rows in a blob near the origin that one cluster captures whole.
fn init_codebook_from_data(
    stack: &mut EncoderStack,
    observations: &[Vec<u32>],
    rng: &mut ChaCha8Rng,
) {
    for code in 0..stack.cfg.n_codes {
        let obs = &observations[rng.gen_range(0..observations.len())];
        let enc = stack.encode(obs, None).expect("finite init encoding");
        let row = stack.codebook.row_mut(code);
        for (slot, v) in row.iter_mut().zip(enc.z.iter()) {
            *slot = v + 1e-3 * crate::nn::gaussian(rng);
        }
    }
}

/// One optimizer update over a batch of inverse-model pairs. Gradients are
/// averaged over the batch; the first non-finite gradient aborts with the
/// parameter path.
pub fn grad_step(
    stack: &mut EncoderStack,
    adam: &mut Adam,
    batch: &[PairSample],
    rng: &mut ChaCha8Rng,
) -> Result<BatchLosses, NnError> {
    let mut grads = stack.zeros_like();
    let mut sums = BatchLosses::default();
    for sample in batch {
        let losses = stack.inverse_pair_step(*sample, Some(rng), BackpropMode::TRAIN, &mut grads)?;
        sums.total += losses.total;
        sums.ce += losses.ce;
        sums.kl += losses.kl;
        sums.vq += losses.vq;
        sums.commit += losses.commit;
    }
    let scale = 1.0 / batch.len() as f64;
    for (_, tensor) in grads.tensors_mut() {
        tensor.iter_mut().for_each(|g| *g *= scale);
    }
    sums.total *= scale;
    sums.ce *= scale;
    sums.kl *= scale;
    sums.vq *= scale;
    sums.commit *= scale;
    adam.update(stack.tensors_mut(), read_tensors(&mut grads))?;
    Ok(sums)
}

fn read_tensors(grads: &mut EncoderStack) -> Vec<(String, &[f64])> {
    grads
        .tensors_mut()
        .into_iter()
        .map(|(name, t)| (name, &*t))
        .collect()
}

/// Tracks codebook usage and refreshes rows that went unused for a full
/// interval, resetting them to a recently seen embedding.
pub struct DeadCodeTracker {
    used: Vec<bool>,
    recent: Vec<Vec<f64>>,
    cursor: usize,
}

impl DeadCodeTracker {
    pub fn new(n_codes: usize) -> Self {
        Self {
            used: vec![false; n_codes],
            recent: Vec::new(),
            cursor: 0,
        }
    }

    fn observe(&mut self, code: usize, z: &[f64]) {
        self.used[code] = true;
        if self.recent.len() < 256 {
            self.recent.push(z.to_vec());
        } else {
            self.recent[self.cursor] = z.to_vec();
            self.cursor = (self.cursor + 1) % 256;
        }
    }

    fn refresh(&mut self, stack: &mut EncoderStack, rng: &mut ChaCha8Rng) {
        if self.recent.is_empty() {
            return;
        }
        for code in 0..self.used.len() {
            if !self.used[code] {
                let donor = &self.recent[rng.gen_range(0..self.recent.len())];
                let row = stack.codebook.row_mut(code);
                for (slot, v) in row.iter_mut().zip(donor.iter()) {
                    *slot = v + 1e-3 * crate::nn::gaussian(rng);
                }
            }
            self.used[code] = false;
        }
    }
}

fn record_history(
    history: &mut Vec<TrainRecord>,
    view: &TrainView,
    stack: &EncoderStack,
    iteration: usize,
    losses: BatchLosses,
) {
    history.push(TrainRecord {
        iteration,
        losses,
        codes_used: codes_used(stack, view.observations).len(),
    });
}

/// Which offline objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AcState,
    OneStep,
    Autoencoder,
    Contrastive,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::AcState => "acstate",
            Method::OneStep => "onestep",
            Method::Autoencoder => "autoencoder",
            Method::Contrastive => "contrastive",
        }
    }
}

/// Trains the multi-step inverse objective on a collected buffer.
pub fn train_acstate(view: TrainView, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    train_offline(view, cfg, Method::AcState)
}

/// One-step inverse baseline: identical training with K forced to 1.
pub fn train_one_step_inverse(view: TrainView, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    let mut cfg = cfg.clone();
    cfg.k_max = 1;
    train_offline(view, &cfg, Method::OneStep)
}

/// Reconstruction baseline through the same bottleneck and codebook.
pub fn train_autoencoder(
    view: TrainView,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, Decoder), NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stack = EncoderStack::new(cfg.stack_config(view.obs_dim, view.n_actions), &mut rng);
    let mut decoder = Decoder::new(&stack.cfg, &mut rng);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut dec_adam = Adam::new(cfg.learning_rate);
    let mut tracker = DeadCodeTracker::new(cfg.n_codes);
    init_codebook_from_data(&mut stack, view.observations, &mut rng);
    let mut history = Vec::new();
    for iteration in 0..cfg.iterations {
        let mut grads = stack.zeros_like();
        let mut dec_grads = decoder.net.zeros_like();
        let mut sums = BatchLosses::default();
        for _ in 0..cfg.batch_size {
            let t = rng.gen_range(0..view.observations.len());
            let (losses, enc) =
                decoder.recon_step(&stack, &view.observations[t], Some(&mut rng), &mut grads, &mut dec_grads)?;
            tracker.observe(enc.code, &enc.z);
            sums.total += losses.total;
            sums.ce += losses.ce;
            sums.kl += losses.kl;
            sums.vq += losses.vq;
            sums.commit += losses.commit;
        }
        let scale = 1.0 / cfg.batch_size as f64;
        for (_, tensor) in grads.tensors_mut() {
            tensor.iter_mut().for_each(|g| *g *= scale);
        }
        for layer in dec_grads.layers.iter_mut() {
            layer.w.data.iter_mut().for_each(|g| *g *= scale);
            layer.b.iter_mut().for_each(|g| *g *= scale);
        }
        scale_losses(&mut sums, scale);
        adam.update(stack.tensors_mut(), read_tensors(&mut grads))?;
        let mut dec_params: Vec<(String, &mut [f64])> = Vec::new();
        let mut dec_grad_refs: Vec<(String, &[f64])> = Vec::new();
        for (i, layer) in decoder.net.layers.iter_mut().enumerate() {
            dec_params.push((format!("decoder.{i}.w"), layer.w.data.as_mut_slice()));
            dec_params.push((format!("decoder.{i}.b"), layer.b.as_mut_slice()));
        }
        for (i, layer) in dec_grads.layers.iter().enumerate() {
            dec_grad_refs.push((format!("decoder.{i}.w"), layer.w.data.as_slice()));
            dec_grad_refs.push((format!("decoder.{i}.b"), layer.b.as_slice()));
        }
        dec_adam.update(dec_params, dec_grad_refs)?;
        if cfg.dead_code_interval > 0 && (iteration + 1) % cfg.dead_code_interval == 0 {
            tracker.refresh(&mut stack, &mut rng);
        }
        if (iteration + 1) % cfg.metrics_every.max(1) == 0 || iteration + 1 == cfg.iterations {
            record_history(&mut history, &view, &stack, iteration + 1, sums);
        }
    }
    let outcome = finish_outcome(stack, view, history);
    Ok((outcome, decoder))
}

/// Temporal contrastive baseline: adjacent observations are positive pairs,
/// the rest of the batch serves as negatives.
pub fn train_contrastive(view: TrainView, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stack = EncoderStack::new(cfg.stack_config(view.obs_dim, view.n_actions), &mut rng);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut tracker = DeadCodeTracker::new(cfg.n_codes);
    init_codebook_from_data(&mut stack, view.observations, &mut rng);
    let mut history = Vec::new();
    for iteration in 0..cfg.iterations {
        let mut grads = stack.zeros_like();
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..view.observations.len() - 1))
            .collect();
        let losses =
            contrastive_batch_step(&stack, view, &indices, cfg.temperature, &mut rng, &mut grads, &mut tracker)?;
        let scale = 1.0 / cfg.batch_size as f64;
        for (_, tensor) in grads.tensors_mut() {
            tensor.iter_mut().for_each(|g| *g *= scale);
        }
        adam.update(stack.tensors_mut(), read_tensors(&mut grads))?;
        if cfg.dead_code_interval > 0 && (iteration + 1) % cfg.dead_code_interval == 0 {
            tracker.refresh(&mut stack, &mut rng);
        }
        if (iteration + 1) % cfg.metrics_every.max(1) == 0 || iteration + 1 == cfg.iterations {
            record_history(&mut history, &view, &stack, iteration + 1, losses);
        }
    }
    Ok(finish_outcome(stack, view, history))
}

/// InfoNCE over one batch; returns per-sample average losses. The KL and
/// codebook terms are included so the discrete codes stay attached to the
/// embeddings the similarity acts on.
pub fn contrastive_batch_step(
    stack: &EncoderStack,
    view: TrainView,
    indices: &[usize],
    temperature: f64,
    rng: &mut ChaCha8Rng,
    grads: &mut EncoderStack,
    tracker: &mut DeadCodeTracker,
) -> Result<BatchLosses, NnError> {
    let b = indices.len();
    let mut enc_a = Vec::with_capacity(b);
    let mut enc_b = Vec::with_capacity(b);
    for &t in indices {
        let ea = stack.encode(&view.observations[t], Some(rng))?;
        let eb = stack.encode(&view.observations[t + 1], Some(rng))?;
        tracker.observe(ea.code, &ea.z);
        tracker.observe(eb.code, &eb.z);
        enc_a.push(ea);
        enc_b.push(eb);
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>();
    let mut sums = BatchLosses::default();
    let mut dzs_a = vec![vec![0.0; stack.cfg.bottleneck_dim]; b];
    let mut dzs_b = vec![vec![0.0; stack.cfg.bottleneck_dim]; b];
    for i in 0..b {
        let row: Vec<f64> = (0..b)
            .map(|j| dot(&enc_a[i].z, &enc_b[j].z) / temperature)
            .collect();
        let lse = crate::nn::log_sum_exp(&row);
        sums.ce += lse - row[i];
        let probs = crate::nn::softmax(&row);
        for j in 0..b {
            let mut coeff = probs[j];
            if j == i {
                coeff -= 1.0;
            }
            let coeff = coeff / temperature;
            for d in 0..stack.cfg.bottleneck_dim {
                dzs_a[i][d] += coeff * enc_b[j].z[d];
                dzs_b[j][d] += coeff * enc_a[i].z[d];
            }
        }
    }
    for i in 0..b {
        stack.backprop_encoder(
            &view.observations[indices[i]],
            &enc_a[i],
            &dzs_a[i],
            BackpropMode::SURROGATE,
            grads,
        );
        stack.backprop_encoder(
            &view.observations[indices[i] + 1],
            &enc_b[i],
            &dzs_b[i],
            BackpropMode::SURROGATE,
            grads,
        );
        sums.kl += stack.cfg.beta * (enc_a[i].kl + enc_b[i].kl);
        sums.vq += stack.cfg.vq_weight * (enc_a[i].vq_loss + enc_b[i].vq_loss);
        sums.commit += stack.cfg.commit_weight * (enc_a[i].commit_loss + enc_b[i].commit_loss);
    }
    sums.total = sums.ce + sums.kl + sums.vq + sums.commit;
    Ok(sums)
}

fn scale_losses(losses: &mut BatchLosses, scale: f64) {
    losses.total *= scale;
    losses.ce *= scale;
    losses.kl *= scale;
    losses.vq *= scale;
    losses.commit *= scale;
}

fn finish_outcome(stack: EncoderStack, view: TrainView, history: Vec<TrainRecord>) -> TrainOutcome {
    let used = codes_used(&stack, view.observations).len();
    let collapse_warning = used < 2;
    if collapse_warning {
        log::warn!("encoder collapse: only {used} code(s) in use over the buffer");
    }
    TrainOutcome {
        stack,
        codes_used: used,
        collapse_warning,
        history,
    }
}

fn train_offline(view: TrainView, cfg: &TrainConfig, method: Method) -> Result<TrainOutcome, NnError> {
    assert!(matches!(method, Method::AcState | Method::OneStep));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stack = EncoderStack::new(cfg.stack_config(view.obs_dim, view.n_actions), &mut rng);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut tracker = DeadCodeTracker::new(cfg.n_codes);
    init_codebook_from_data(&mut stack, view.observations, &mut rng);
    let mut history = Vec::new();
    for iteration in 0..cfg.iterations {
        let mut grads = stack.zeros_like();
        let mut sums = BatchLosses::default();
        for _ in 0..cfg.batch_size {
            let (t, k) = view.sample_pair(cfg.k_max, &mut rng);
            let sample = PairSample {
                obs_t: &view.observations[t],
                obs_tk: &view.observations[t + k],
                k,
                action: view.actions[t] as usize,
            };
            let losses =
                stack.inverse_pair_step(sample, Some(&mut rng), BackpropMode::TRAIN, &mut grads)?;
            sums.total += losses.total;
            sums.ce += losses.ce;
            sums.kl += losses.kl;
            sums.vq += losses.vq;
            sums.commit += losses.commit;
        }
        let scale = 1.0 / cfg.batch_size as f64;
        for (_, tensor) in grads.tensors_mut() {
            tensor.iter_mut().for_each(|g| *g *= scale);
        }
        scale_losses(&mut sums, scale);
        // Track training-time code usage for the dead-code refresh.
        adam.update(stack.tensors_mut(), read_tensors(&mut grads))?;
        if cfg.dead_code_interval > 0 {
            for _ in 0..4 {
                let t = rng.gen_range(0..view.observations.len());
                let enc = stack.encode(&view.observations[t], None)?;
                tracker.observe(enc.code, &enc.z);
            }
            if (iteration + 1) % cfg.dead_code_interval == 0 {
                tracker.refresh(&mut stack, &mut rng);
            }
        }
        if (iteration + 1) % cfg.metrics_every.max(1) == 0 || iteration + 1 == cfg.iterations {
            record_history(&mut history, &view, &stack, iteration + 1, sums);
        }
    }
    Ok(finish_outcome(stack, view, history))
}

/// Builds the latent count graph by re-encoding a trajectory with the
/// current encoder in eval mode.
pub fn build_latent(
    stack: &EncoderStack,
    observations: &[Vec<u32>],
    actions: &[u8],
) -> LatentMdp {
    let mut latent = LatentMdp::new(stack.cfg.n_codes, stack.cfg.n_actions);
    if observations.is_empty() {
        return latent;
    }
    let mut prev = stack.code_of(&observations[0]);
    for (i, &a) in actions.iter().enumerate() {
        let next = stack.code_of(&observations[i + 1]);
        latent.update_counts(prev, a as usize, next);
        prev = next;
    }
    latent
}

/// One record of the online planning loop.
#[derive(Debug, Clone, Copy)]
pub struct PlanRecord {
    pub step: usize,
    pub losses: BatchLosses,
    pub codes_used: usize,
    /// Distinct ground states seen so far (evaluation-only bookkeeping).
    pub ground_seen: usize,
}

#[derive(Debug, Clone)]
pub struct PlanningOutcome {
    pub stack: EncoderStack,
    pub buffer: ReplayBuffer,
    pub latent: LatentMdp,
    pub codes_used: usize,
    pub collapse_warning: bool,
    pub history: Vec<PlanRecord>,
}

/// Online goal-seeking loop: maintain a count graph over current eval-mode
/// codes, pick rarely visited reachable codes as goals, take one uniform
/// random action at each goal selection (marked for training), follow the
/// planner otherwise, and take one gradient step per environment step on
/// pairs sampled from the marked indices.
pub fn run_planning_acstate(
    env: &mut dyn Environment,
    cfg: &TrainConfig,
    total_steps: usize,
) -> Result<PlanningOutcome, NnError> {
    assert!(total_steps >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stack = EncoderStack::new(cfg.stack_config(env.obs_dim(), env.n_actions()), &mut rng);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut tracker = DeadCodeTracker::new(cfg.n_codes);
    let mut latent = LatentMdp::new(cfg.n_codes, env.n_actions());

    let mut observations = vec![env.observe()];
    init_codebook_from_data(&mut stack, &observations, &mut rng);
    let mut labels = vec![env.ground_endo() as u32];
    let mut actions: Vec<u8> = Vec::new();
    let mut marks: Vec<u32> = Vec::new();
    let mut caps: Vec<u32> = Vec::new();
    let mut history = Vec::new();

    let mut goal: Option<usize> = None;
    let mut deadline = 0usize;
    let mut consecutive_fails = 0usize;

    for t in 0..total_steps - 1 {
        let current_code = stack.code_of(&observations[t]);
        let goal_reached = goal == Some(current_code);
        let action = if goal.is_none() || t >= deadline || goal_reached {
            // Goal deadline (or the goal itself) reached: pick a new goal
            // and take one uniform random action, marked for training.
            let choice = findgoal(&latent, current_code, &mut rng);
            goal = Some(choice.goal);
            deadline = t + choice.deadline;
            consecutive_fails = 0;
            mark_random(env.n_actions(), t, deadline, &mut marks, &mut caps, &mut rng)
        } else {
            match plan(&latent, current_code, goal.expect("goal set")) {
                Ok(a) => {
                    consecutive_fails = 0;
                    a
                }
                Err(PlanError::Unreachable { .. }) => {
                    consecutive_fails += 1;
                    if consecutive_fails <= cfg.plan_fail_limit {
                        let choice = findgoal(&latent, current_code, &mut rng);
                        goal = Some(choice.goal);
                        deadline = t + choice.deadline;
                    } else {
                        goal = None;
                        deadline = t + 1;
                        consecutive_fails = 0;
                    }
                    mark_random(env.n_actions(), t, deadline, &mut marks, &mut caps, &mut rng)
                }
            }
        };

        env.step(action);
        actions.push(action as u8);
        observations.push(env.observe());
        labels.push(env.ground_endo() as u32);
        let next_code = stack.code_of(&observations[t + 1]);
        latent.update_counts(current_code, action, next_code);

        // One gradient step per environment step, sampling from the marked
        // indices collected so far.
        let view = TrainView {
            obs_dim: env.obs_dim(),
            n_actions: env.n_actions(),
            observations: &observations,
            actions: &actions,
            random_marks: &marks,
            horizon_caps: &caps,
        };
        let mut grads = stack.zeros_like();
        let mut sums = BatchLosses::default();
        for _ in 0..cfg.planning_batch {
            let (j, k) = view.sample_pair(cfg.k_max, &mut rng);
            let sample = PairSample {
                obs_t: &observations[j],
                obs_tk: &observations[j + k],
                k,
                action: actions[j] as usize,
            };
            let losses =
                stack.inverse_pair_step(sample, Some(&mut rng), BackpropMode::TRAIN, &mut grads)?;
            sums.total += losses.total;
            sums.ce += losses.ce;
            sums.kl += losses.kl;
            sums.vq += losses.vq;
            sums.commit += losses.commit;
        }
        let scale = 1.0 / cfg.planning_batch as f64;
        for (_, tensor) in grads.tensors_mut() {
            tensor.iter_mut().for_each(|g| *g *= scale);
        }
        scale_losses(&mut sums, scale);
        adam.update(stack.tensors_mut(), read_tensors(&mut grads))?;
        if cfg.dead_code_interval > 0 {
            let enc = stack.encode(&observations[t + 1], None)?;
            tracker.observe(enc.code, &enc.z);
            if (t + 1) % cfg.dead_code_interval == 0 {
                tracker.refresh(&mut stack, &mut rng);
            }
        }

        // Stale codes pollute the graph as the encoder moves; periodically
        // recount the whole trajectory with the current encoder.
        if cfg.graph_rebuild_every > 0 && (t + 1) % cfg.graph_rebuild_every == 0 {
            latent = build_latent(&stack, &observations, &actions);
        }

        if (t + 1) % cfg.metrics_every.max(1) == 0 || t + 2 == total_steps {
            let seen: BTreeSet<u32> = labels.iter().copied().collect();
            history.push(PlanRecord {
                step: t + 1,
                losses: sums,
                codes_used: codes_used(&stack, &observations).len(),
                ground_seen: seen.len(),
            });
        }
    }

    latent = build_latent(&stack, &observations, &actions);
    let buffer = ReplayBuffer {
        obs_dim: env.obs_dim(),
        n_actions: env.n_actions(),
        observations,
        actions,
        random_marks: marks,
        horizon_caps: caps,
        ground_labels: Some(labels),
    };
    buffer.validate();
    let used = codes_used(&stack, &buffer.observations).len();
    Ok(PlanningOutcome {
        collapse_warning: used < 2,
        codes_used: used,
        stack,
        buffer,
        latent,
        history,
    })
}

fn mark_random(
    n_actions: usize,
    t: usize,
    deadline: usize,
    marks: &mut Vec<u32>,
    caps: &mut Vec<u32>,
    rng: &mut ChaCha8Rng,
) -> usize {
    let action = rng.gen_range(0..n_actions);
    marks.push(t as u32);
    caps.push((deadline - t).max(1) as u32);
    action
}
