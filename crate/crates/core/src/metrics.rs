//! Discovery-quality metrics against evaluation-only ground truth: the
//! dynamics difference error, state parsimony, coverage, and code purity.

use std::collections::BTreeSet;

use crate::learner::ReplayBuffer;
use crate::nn::EncoderStack;
use crate::planner::LatentMdp;

/// Joint counts of (learned code, ground state) over a trajectory.
#[derive(Debug, Clone)]
pub struct CooccurrenceTable {
    n_codes: usize,
    n_ground: usize,
    counts: Vec<u64>,
}

impl CooccurrenceTable {
    pub fn build(stack: &EncoderStack, buffer: &ReplayBuffer) -> Self {
        let labels = buffer
            .ground_labels
            .as_ref()
            .expect("ground labels required for evaluation");
        let n_ground = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        let n_codes = stack.cfg.n_codes;
        let mut counts = vec![0u64; n_codes * n_ground];
        for (obs, &g) in buffer.observations.iter().zip(labels.iter()) {
            let code = stack.code_of(obs);
            counts[code * n_ground + g as usize] += 1;
        }
        Self {
            n_codes,
            n_ground,
            counts,
        }
    }

    pub fn count(&self, code: usize, ground: usize) -> u64 {
        self.counts[code * self.n_ground + ground]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn n_ground(&self) -> usize {
        self.n_ground
    }

    /// Empirical decoding distribution P(ground | code), `None` for unused
    /// codes.
    pub fn decode_dist(&self, code: usize) -> Option<Vec<f64>> {
        let row = &self.counts[code * self.n_ground..(code + 1) * self.n_ground];
        let total: u64 = row.iter().sum();
        if total == 0 {
            return None;
        }
        Some(row.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// Majority code of each ground state, `None` for unseen ground states.
    pub fn majority_code(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n_ground];
        for (g, slot) in out.iter_mut().enumerate() {
            let mut best = 0u64;
            for code in 0..self.n_codes {
                let c = self.count(code, g);
                if c > best {
                    best = c;
                    *slot = Some(code);
                }
            }
        }
        out
    }

    /// Fraction of observations whose code's majority ground state matches
    /// the observation's own ground state. Invariant under code relabeling.
    pub fn purity(&self) -> f64 {
        let total = self.total();
        assert!(total > 0, "purity requires at least one observation");
        let mut agree = 0u64;
        for code in 0..self.n_codes {
            let row = &self.counts[code * self.n_ground..(code + 1) * self.n_ground];
            agree += row.iter().copied().max().unwrap_or(0);
        }
        agree as f64 / total as f64
    }
}

/// Result of the dynamics difference computation.
#[derive(Debug, Clone)]
pub struct DynDiff {
    /// Mean halved L1 distance in percent, over observed (ground, action)
    /// pairs.
    pub error_percent: f64,
    /// Observed (ground, action) pairs that could not be translated and
    /// were excluded from the mean.
    pub excluded_pairs: usize,
    pub evaluated_pairs: usize,
}

/// Dynamics difference error: for every observed (ground state, action)
/// pair, translate the learned latent dynamics into ground coordinates via
/// the majority code of the ground state and the empirical code-decoding
/// table, and take the halved L1 distance to the empirical ground
/// transition, averaged over pairs, in percent.
pub fn dynamics_diff_error(
    buffer: &ReplayBuffer,
    stack: &EncoderStack,
    latent: &LatentMdp,
) -> DynDiff {
    let labels = buffer
        .ground_labels
        .as_ref()
        .expect("ground labels required for evaluation");
    let cooc = CooccurrenceTable::build(stack, buffer);
    let n_ground = cooc.n_ground();
    let n_actions = buffer.n_actions;

    // Empirical ground-transition counts.
    let mut ground_counts = vec![0u64; n_ground * n_actions * n_ground];
    for (t, &a) in buffer.actions.iter().enumerate() {
        let g = labels[t] as usize;
        let g_next = labels[t + 1] as usize;
        ground_counts[(g * n_actions + a as usize) * n_ground + g_next] += 1;
    }

    let majority = cooc.majority_code();
    let decode: Vec<Option<Vec<f64>>> = (0..cooc.n_codes()).map(|c| cooc.decode_dist(c)).collect();

    let mut total_err = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for g in 0..n_ground {
        for a in 0..n_actions {
            let row = &ground_counts[(g * n_actions + a) * n_ground..][..n_ground];
            let row_total: u64 = row.iter().sum();
            if row_total == 0 {
                continue;
            }
            let empirical: Vec<f64> = row.iter().map(|&c| c as f64 / row_total as f64).collect();
            let translated = majority[g]
                .and_then(|code| latent.estimate_transition(code, a))
                .map(|latent_row| {
                    let mut out = vec![0.0; n_ground];
                    for (code_next, p) in latent_row.iter().enumerate() {
                        if *p == 0.0 {
                            continue;
                        }
                        if let Some(dist) = &decode[code_next] {
                            for (gn, q) in dist.iter().enumerate() {
                                out[gn] += p * q;
                            }
                        }
                    }
                    out
                });
            match translated {
                Some(predicted) => {
                    let l1: f64 = predicted
                        .iter()
                        .zip(empirical.iter())
                        .map(|(p, e)| (p - e).abs())
                        .sum();
                    total_err += 0.5 * l1;
                    evaluated += 1;
                }
                None => {
                    log::debug!("dyn-diff: no translated row for ground {g} action {a}");
                    excluded += 1;
                }
            }
        }
    }
    let error_percent = if evaluated == 0 {
        100.0
    } else {
        100.0 * total_err / evaluated as f64
    };
    DynDiff {
        error_percent,
        excluded_pairs: excluded,
        evaluated_pairs: evaluated,
    }
}

/// Ratio of distinct ground states observed to distinct codes used.
pub fn state_parsimony(stack: &EncoderStack, buffer: &ReplayBuffer) -> f64 {
    let labels = buffer
        .ground_labels
        .as_ref()
        .expect("ground labels required for evaluation");
    let grounds: BTreeSet<u32> = labels.iter().copied().collect();
    let codes = crate::learner::codes_used(stack, &buffer.observations);
    grounds.len() as f64 / codes.len() as f64
}

/// Coverage of the reachable ground states plus a per-state visit histogram
/// for heatmap emission.
#[derive(Debug, Clone)]
pub struct Coverage {
    pub fraction: f64,
    pub visited: usize,
    pub total_ground: usize,
    pub visits: Vec<u64>,
}

pub fn coverage(buffer: &ReplayBuffer, total_ground: usize) -> Coverage {
    let labels = buffer
        .ground_labels
        .as_ref()
        .expect("ground labels required for evaluation");
    let mut visits = vec![0u64; total_ground];
    for &g in labels {
        visits[g as usize] += 1;
    }
    let visited = visits.iter().filter(|&&v| v > 0).count();
    Coverage {
        fraction: visited as f64 / total_ground as f64,
        visited,
        total_ground,
        visits,
    }
}

/// Renders a visit histogram as a `height x width` plain matrix, one row
/// per line.
pub fn heatmap_matrix(visits: &[u64], width: usize, height: usize) -> String {
    assert_eq!(visits.len(), width * height);
    let mut out = String::new();
    for y in 0..height {
        let row: Vec<String> = (0..width)
            .map(|x| visits[y * width + x].to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Renders a visit histogram as an ASCII portable graymap, bright where
/// visits are frequent.
pub fn heatmap_pgm(visits: &[u64], width: usize, height: usize) -> String {
    assert_eq!(visits.len(), width * height);
    let max = visits.iter().copied().max().unwrap_or(0).max(1);
    let mut out = format!("P2\n{width} {height}\n255\n");
    for y in 0..height {
        let row: Vec<String> = (0..width)
            .map(|x| ((visits[y * width + x] * 255) / max).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
