//! The encoder stack: dense trunk, Gaussian variational bottleneck, vector
//! quantization codebook, and a multi-step inverse head that predicts the
//! first action of a k-step transition from the two quantized codes and an
//! embedding of k.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian, log_sum_exp, softmax, Activation, DenseLayer, DenseNet, Matrix, NetCache, NnError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StackConfig {
    pub obs_dim: usize,
    pub n_actions: usize,
    /// Trunk hidden width.
    pub hidden_dim: usize,
    /// Bottleneck/code dimension.
    pub bottleneck_dim: usize,
    /// Codebook size.
    pub n_codes: usize,
    /// Largest supported prediction horizon.
    pub k_max: usize,
    pub k_embed_dim: usize,
    pub head_hidden: usize,
    /// Weight of the Gaussian KL term.
    pub beta: f64,
    /// Weight of the codebook pull term.
    pub vq_weight: f64,
    /// Weight of the encoder commitment term.
    pub commit_weight: f64,
}

impl StackConfig {
    pub fn validate(&self) {
        assert!(self.n_codes >= 1, "codebook must be non-empty");
        assert!(self.k_max >= 1);
        assert!(self.beta >= 0.0 && self.vq_weight >= 0.0 && self.commit_weight >= 0.0);
    }
}

/// Result of encoding one observation.
#[derive(Debug, Clone)]
pub struct EncodeResult {
    pub code: usize,
    /// Bottleneck embedding (reparameterized sample in training, mean in
    /// evaluation).
    pub z: Vec<f64>,
    /// Selected codebook vector.
    pub quantized: Vec<f64>,
    pub kl: f64,
    pub vq_loss: f64,
    pub commit_loss: f64,
    mean: Vec<f64>,
    logvar: Vec<f64>,
    /// Noise used by the reparameterized sample; `None` in eval mode.
    eps: Option<Vec<f64>>,
    trunk_cache: NetCache,
}

/// How a backward pass treats the quantization stage.
#[derive(Debug, Clone, Copy)]
pub struct BackpropMode {
    /// Feed the codebook vector to downstream consumers (true) or bypass the
    /// codebook and feed the bottleneck embedding directly (false).
    pub quantize: bool,
    /// Accumulate codebook pull and commitment gradients.
    pub vq_terms: bool,
}

impl BackpropMode {
    pub const TRAIN: Self = Self {
        quantize: true,
        vq_terms: true,
    };
    /// Codebook disabled: the encoder output is exactly the bottleneck
    /// embedding and the loss is fully differentiable, which is what the
    /// finite-difference checker exercises.
    pub const SURROGATE: Self = Self {
        quantize: false,
        vq_terms: true,
    };
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub cfg: StackConfig,
    pub trunk: DenseNet,
    pub mean_head: DenseLayer,
    pub logvar_head: DenseLayer,
    pub codebook: Matrix,
    pub k_embedding: Matrix,
    pub head: DenseNet,
}

/// Gradient buffers with the same shapes as the stack tensors.
pub type StackGrads = EncoderStack;

/// One training example for the inverse objective.
#[derive(Debug, Clone, Copy)]
pub struct PairSample<'a> {
    pub obs_t: &'a [u32],
    pub obs_tk: &'a [u32],
    pub k: usize,
    pub action: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchLosses {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub vq: f64,
    pub commit: f64,
}

impl EncoderStack {
    pub fn new(cfg: StackConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate();
        let trunk = DenseNet::new(cfg.obs_dim, &[(cfg.hidden_dim, Activation::Relu)], rng);
        let mean_head = DenseLayer::new(cfg.hidden_dim, cfg.bottleneck_dim, Activation::Identity, rng);
        let mut logvar_head =
            DenseLayer::new(cfg.hidden_dim, cfg.bottleneck_dim, Activation::Identity, rng);
        // Start the bottleneck nearly deterministic; unit-variance noise at
        // initialization would drown the mean differences the quantizer and
        // the inverse head need to latch onto.
        logvar_head.b.iter_mut().for_each(|b| *b = -6.0);
        let mut codebook = Matrix::zeros(cfg.n_codes, cfg.bottleneck_dim);
        for v in codebook.data.iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let k_embedding = Matrix::init(cfg.k_max, cfg.k_embed_dim, rng);
        let head = DenseNet::new(
            2 * cfg.bottleneck_dim + cfg.k_embed_dim,
            &[
                (cfg.head_hidden, Activation::Relu),
                (cfg.n_actions, Activation::Identity),
            ],
            rng,
        );
        Self {
            cfg,
            trunk,
            mean_head,
            logvar_head,
            codebook,
            k_embedding,
            head,
        }
    }

    pub fn zeros_like(&self) -> StackGrads {
        Self {
            cfg: self.cfg.clone(),
            trunk: self.trunk.zeros_like(),
            mean_head: self.mean_head.zeros_like(),
            logvar_head: self.logvar_head.zeros_like(),
            codebook: Matrix::zeros(self.codebook.rows, self.codebook.cols),
            k_embedding: Matrix::zeros(self.k_embedding.rows, self.k_embedding.cols),
            head: self.head.zeros_like(),
        }
    }

    /// All trainable tensors in a fixed traversal order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, layer) in self.trunk.layers.iter_mut().enumerate() {
            out.push((format!("trunk.{i}.w"), layer.w.data.as_mut_slice()));
            out.push((format!("trunk.{i}.b"), layer.b.as_mut_slice()));
        }
        out.push(("mean.w".into(), self.mean_head.w.data.as_mut_slice()));
        out.push(("mean.b".into(), self.mean_head.b.as_mut_slice()));
        out.push(("logvar.w".into(), self.logvar_head.w.data.as_mut_slice()));
        out.push(("logvar.b".into(), self.logvar_head.b.as_mut_slice()));
        out.push(("codebook".into(), self.codebook.data.as_mut_slice()));
        out.push(("k_embedding".into(), self.k_embedding.data.as_mut_slice()));
        for (i, layer) in self.head.layers.iter_mut().enumerate() {
            out.push((format!("head.{i}.w"), layer.w.data.as_mut_slice()));
            out.push((format!("head.{i}.b"), layer.b.as_mut_slice()));
        }
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.tensors_mut().iter().map(|(_, t)| t.len()).sum()
    }

    /// Nearest codebook row by Euclidean distance; ties go to the lowest
    /// index.
    pub fn nearest_code(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for r in 0..self.codebook.rows {
            let row = self.codebook.row(r);
            let d: f64 = row.iter().zip(z.iter()).map(|(c, z)| (c - z) * (c - z)).sum();
            if d < best_d {
                best_d = d;
                best = r;
            }
        }
        best
    }

    /// Encodes one observation. In training mode the bottleneck is sampled
    /// with the reparameterization trick; in eval mode the mean is used, so
    /// the induced code assignment is a deterministic function of the
    /// observation.
    pub fn encode(
        &self,
        obs: &[u32],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncodeResult, NnError> {
        let (trunk_cache, h) = self.trunk.forward_hot(obs);
        self.trunk.check_finite(&trunk_cache, "trunk")?;
        let mean = self.mean_head.forward(&h);
        let logvar = self.logvar_head.forward(&h);
        if mean.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite {
                layer: "bottleneck".into(),
            });
        }
        let (z, eps) = match rng {
            Some(rng) => {
                let eps: Vec<f64> = (0..mean.len()).map(|_| gaussian(rng)).collect();
                let z = mean
                    .iter()
                    .zip(logvar.iter())
                    .zip(eps.iter())
                    .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                    .collect();
                (z, Some(eps))
            }
            None => (mean.clone(), None),
        };
        let kl = 0.5
            * mean
                .iter()
                .zip(logvar.iter())
                .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
                .sum::<f64>();
        let code = self.nearest_code(&z);
        let quantized = self.codebook.row(code).to_vec();
        let vq_loss: f64 = quantized.iter().zip(z.iter()).map(|(c, z)| (c - z) * (c - z)).sum();
        Ok(EncodeResult {
            code,
            commit_loss: vq_loss,
            vq_loss,
            kl,
            mean,
            logvar,
            eps,
            trunk_cache,
            quantized,
            z,
        })
    }

    /// Deterministic eval-mode code assignment.
    pub fn code_of(&self, obs: &[u32]) -> usize {
        let (_, h) = self.trunk.forward_hot(obs);
        let mean = self.mean_head.forward(&h);
        self.nearest_code(&mean)
    }

    /// The embedding the downstream consumer sees for this encoding.
    pub fn embedding<'a>(&self, enc: &'a EncodeResult, mode: BackpropMode) -> &'a [f64] {
        if mode.quantize {
            &enc.quantized
        } else {
            &enc.z
        }
    }

    /// Backpropagates a gradient arriving at the consumer-facing embedding
    /// through the quantization (straight-through copy), bottleneck terms,
    /// and trunk, accumulating parameter gradients.
    pub fn backprop_encoder(
        &self,
        obs: &[u32],
        enc: &EncodeResult,
        d_embedding: &[f64],
        mode: BackpropMode,
        grads: &mut StackGrads,
    ) {
        let d = self.cfg.bottleneck_dim;
        // Straight-through: gradients at the quantized vector are copied to
        // the bottleneck embedding unchanged.
        let mut dz = d_embedding.to_vec();
        if mode.vq_terms {
            let code_row = self.codebook.row(enc.code);
            let grow = grads.codebook.row_mut(enc.code);
            for i in 0..d {
                grow[i] += self.cfg.vq_weight * 2.0 * (code_row[i] - enc.z[i]);
                dz[i] += self.cfg.commit_weight * 2.0 * (enc.z[i] - code_row[i]);
            }
        }
        // KL term gradients, plus the sample path into mean/logvar.
        let mut dmean = vec![0.0; d];
        let mut dlogvar = vec![0.0; d];
        for i in 0..d {
            dmean[i] = self.cfg.beta * enc.mean[i] + dz[i];
            dlogvar[i] = self.cfg.beta * 0.5 * (enc.logvar[i].exp() - 1.0);
            if let Some(eps) = &enc.eps {
                dlogvar[i] += dz[i] * 0.5 * (0.5 * enc.logvar[i]).exp() * eps[i];
            }
        }
        let h = enc.trunk_cache.outs.last().expect("trunk output");
        let mut dh = self
            .mean_head
            .backward(h, &enc.mean, &dmean, &mut grads.mean_head, true)
            .expect("dx requested");
        let dh2 = self
            .logvar_head
            .backward(h, &enc.logvar, &dlogvar, &mut grads.logvar_head, true)
            .expect("dx requested");
        for (a, b) in dh.iter_mut().zip(dh2.iter()) {
            *a += b;
        }
        self.trunk.backward_hot(obs, &enc.trunk_cache, &dh, &mut grads.trunk);
    }

    /// Loss contributions of one encoding under the stack's weights.
    fn bottleneck_losses(&self, enc: &EncodeResult) -> (f64, f64, f64) {
        (
            self.cfg.beta * enc.kl,
            self.cfg.vq_weight * enc.vq_loss,
            self.cfg.commit_weight * enc.commit_loss,
        )
    }

    /// Forward + backward of the multi-step inverse objective for one
    /// sample, accumulating gradients. Returns the loss components.
    pub fn inverse_pair_step(
        &self,
        sample: PairSample,
        mut rng: Option<&mut ChaCha8Rng>,
        mode: BackpropMode,
        grads: &mut StackGrads,
    ) -> Result<BatchLosses, NnError> {
        assert!(sample.k >= 1 && sample.k <= self.cfg.k_max, "horizon in range");
        assert!(sample.action < self.cfg.n_actions, "action in range");
        let enc_t = self.encode(sample.obs_t, rng.as_deref_mut())?;
        let enc_tk = self.encode(sample.obs_tk, rng.as_deref_mut())?;
        let (logits, head_cache, head_in) = self.inverse_logits(&enc_t, &enc_tk, sample.k, mode);
        self.head.check_finite(&head_cache, "head")?;
        let ce = log_sum_exp(&logits) - logits[sample.action];

        let mut dlogits = softmax(&logits);
        dlogits[sample.action] -= 1.0;
        let dhead_in = self
            .head
            .backward(&head_in, &head_cache, &dlogits, &mut grads.head, true)
            .expect("dx requested");
        let d = self.cfg.bottleneck_dim;
        let demb = &dhead_in[2 * d..];
        let grow = grads.k_embedding.row_mut(sample.k - 1);
        for (g, v) in grow.iter_mut().zip(demb.iter()) {
            *g += v;
        }
        self.backprop_encoder(sample.obs_t, &enc_t, &dhead_in[..d], mode, grads);
        self.backprop_encoder(sample.obs_tk, &enc_tk, &dhead_in[d..2 * d], mode, grads);

        let (kl_t, vq_t, cm_t) = self.bottleneck_losses(&enc_t);
        let (kl_tk, vq_tk, cm_tk) = self.bottleneck_losses(&enc_tk);
        let losses = BatchLosses {
            ce,
            kl: kl_t + kl_tk,
            vq: vq_t + vq_tk,
            commit: cm_t + cm_tk,
            total: ce + kl_t + kl_tk + vq_t + vq_tk + cm_t + cm_tk,
        };
        Ok(losses)
    }

    /// Logits of the inverse head for a pair of encodings at horizon k.
    pub fn inverse_logits(
        &self,
        enc_t: &EncodeResult,
        enc_tk: &EncodeResult,
        k: usize,
        mode: BackpropMode,
    ) -> (Vec<f64>, NetCache, Vec<f64>) {
        let mut head_in =
            Vec::with_capacity(2 * self.cfg.bottleneck_dim + self.cfg.k_embed_dim);
        head_in.extend_from_slice(self.embedding(enc_t, mode));
        head_in.extend_from_slice(self.embedding(enc_tk, mode));
        head_in.extend_from_slice(self.k_embedding.row(k - 1));
        let (cache, logits) = self.head.forward(&head_in);
        (logits, cache, head_in)
    }
}

/// Dense decoder for the reconstruction baseline.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub net: DenseNet,
}

impl Decoder {
    pub fn new(cfg: &StackConfig, rng: &mut ChaCha8Rng) -> Self {
        let net = DenseNet::new(
            cfg.bottleneck_dim,
            &[
                (cfg.hidden_dim, Activation::Relu),
                (cfg.obs_dim, Activation::Identity),
            ],
            rng,
        );
        Self { net }
    }

    /// Squared-error reconstruction of a multi-hot target, with gradients
    /// into both the decoder and (through the bottleneck) the encoder.
    pub fn recon_step(
        &self,
        stack: &EncoderStack,
        obs: &[u32],
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut StackGrads,
        dec_grads: &mut DenseNet,
    ) -> Result<(BatchLosses, EncodeResult), NnError> {
        let enc = stack.encode(obs, rng)?;
        let emb = stack.embedding(&enc, BackpropMode::TRAIN);
        let (cache, recon) = self.net.forward(emb);
        self.net.check_finite(&cache, "decoder")?;
        let mut residual = recon;
        for &j in obs {
            residual[j as usize] -= 1.0;
        }
        let mse: f64 = residual.iter().map(|r| r * r).sum();
        let drecon: Vec<f64> = residual.iter().map(|r| 2.0 * r).collect();
        let demb = self
            .net
            .backward(emb, &cache, &drecon, dec_grads, true)
            .expect("dx requested");
        stack.backprop_encoder(obs, &enc, &demb, BackpropMode::TRAIN, grads);
        let (kl, vq, cm) = stack.bottleneck_losses(&enc);
        Ok((
            BatchLosses {
                ce: mse,
                kl,
                vq,
                commit: cm,
                total: mse + kl + vq + cm,
            },
            enc,
        ))
    }
}
