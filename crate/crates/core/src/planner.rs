//! Count-based tabular model over learned codes, goal selection by inverse
//! visit counts over the reachable set, and expected-hitting-cost planning.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("goal code {goal} is unreachable from code {from} in the observed graph")]
    Unreachable { from: usize, goal: usize },
}

const VALUE_TOL: f64 = 1e-9;

/// Transition counts over (code, action, code) plus per-code visit counts.
#[derive(Debug, Clone)]
pub struct LatentMdp {
    n_codes: usize,
    n_actions: usize,
    counts: Vec<u64>,
    visit_counts: Vec<u64>,
    seen: Vec<bool>,
}

impl LatentMdp {
    pub fn new(n_codes: usize, n_actions: usize) -> Self {
        Self {
            n_codes,
            n_actions,
            counts: vec![0; n_codes * n_actions * n_codes],
            visit_counts: vec![0; n_codes],
            seen: vec![false; n_codes],
        }
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn idx(&self, s: usize, a: usize, s_next: usize) -> usize {
        (s * self.n_actions + a) * self.n_codes + s_next
    }

    pub fn count(&self, s: usize, a: usize, s_next: usize) -> u64 {
        self.counts[self.idx(s, a, s_next)]
    }

    pub fn visit_count(&self, s: usize) -> u64 {
        self.visit_counts[s]
    }

    /// Records one observed transition. The target's visit count always
    /// advances; the source is counted once when first sighted, so the
    /// visit total equals the number of code observations in the
    /// trajectory.
    pub fn update_counts(&mut self, s: usize, a: usize, s_next: usize) {
        let idx = self.idx(s, a, s_next);
        self.counts[idx] += 1;
        if !self.seen[s] {
            self.seen[s] = true;
            self.visit_counts[s] += 1;
        }
        self.seen[s_next] = true;
        self.visit_counts[s_next] += 1;
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.visit_counts.iter_mut().for_each(|c| *c = 0);
        self.seen.iter_mut().for_each(|s| *s = false);
    }

    /// Count-normalized next-code distribution, `None` for unobserved rows.
    /// No smoothing: unobserved edges are treated as absent.
    pub fn estimate_transition(&self, s: usize, a: usize) -> Option<Vec<f64>> {
        let base = (s * self.n_actions + a) * self.n_codes;
        let row = &self.counts[base..base + self.n_codes];
        let total: u64 = row.iter().sum();
        if total == 0 {
            return None;
        }
        Some(row.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// Codes reachable from `from` through positive-count edges, with their
    /// BFS depths.
    pub fn reachable_codes(&self, from: usize) -> Vec<(usize, usize)> {
        let mut depth = vec![None; self.n_codes];
        depth[from] = Some(0);
        let mut queue = VecDeque::from([from]);
        let mut out = vec![(from, 0)];
        while let Some(u) = queue.pop_front() {
            let du = depth[u].unwrap();
            for a in 0..self.n_actions {
                let base = (u * self.n_actions + a) * self.n_codes;
                for v in 0..self.n_codes {
                    if self.counts[base + v] > 0 && depth[v].is_none() {
                        depth[v] = Some(du + 1);
                        out.push((v, du + 1));
                        queue.push_back(v);
                    }
                }
            }
        }
        out
    }

    /// Exports the positive-count edges, one `(s, a, s', count)` per line.
    pub fn export_edges(&self) -> String {
        let mut out = String::new();
        for s in 0..self.n_codes {
            for a in 0..self.n_actions {
                for s_next in 0..self.n_codes {
                    let c = self.count(s, a, s_next);
                    if c > 0 {
                        out.push_str(&format!("{s}\t{a}\t{s_next}\t{c}\n"));
                    }
                }
            }
        }
        out
    }
}

/// Outcome of goal selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoalChoice {
    pub goal: usize,
    /// Steps granted to reach the goal (BFS depth plus slack).
    pub deadline: usize,
    /// True when no code other than the current one was reachable.
    pub cold_start: bool,
}

const DEADLINE_SLACK: usize = 2;

/// Samples a goal among codes reachable from `current`, with probability
/// proportional to the inverse visit count. The current code is excluded
/// unless it is the only candidate, in which case the choice is flagged as
/// a cold start.
pub fn findgoal(mdp: &LatentMdp, current: usize, rng: &mut ChaCha8Rng) -> GoalChoice {
    let reachable = mdp.reachable_codes(current);
    let candidates: Vec<(usize, usize)> = reachable
        .iter()
        .copied()
        .filter(|&(code, _)| code != current)
        .collect();
    if candidates.is_empty() {
        return GoalChoice {
            goal: current,
            deadline: 1,
            cold_start: true,
        };
    }
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&(code, _)| 1.0 / mdp.visit_count(code).max(1) as f64)
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    let mut chosen = candidates.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            chosen = i;
            break;
        }
        draw -= w;
    }
    let (goal, depth) = candidates[chosen];
    GoalChoice {
        goal,
        deadline: depth + DEADLINE_SLACK,
        cold_start: false,
    }
}

/// Sparse cache of the count-normalized rows, one entry per observed
/// (code, action) pair.
struct RowCache {
    rows: Vec<Option<Vec<(usize, f64)>>>,
    n_actions: usize,
}

impl RowCache {
    fn build(mdp: &LatentMdp) -> Self {
        let mut rows = Vec::with_capacity(mdp.n_codes() * mdp.n_actions());
        for s in 0..mdp.n_codes() {
            for a in 0..mdp.n_actions() {
                let row = mdp.estimate_transition(s, a).map(|dense| {
                    dense
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| **p > 0.0)
                        .map(|(t, p)| (t, *p))
                        .collect()
                });
                rows.push(row);
            }
        }
        Self {
            rows,
            n_actions: mdp.n_actions(),
        }
    }

    fn row(&self, s: usize, a: usize) -> Option<&[(usize, f64)]> {
        self.rows[s * self.n_actions + a].as_deref()
    }
}

fn expected_cost(row: &[(usize, f64)], value: &[f64]) -> f64 {
    let mut acc = 1.0;
    for &(t, p) in row {
        if value[t].is_infinite() {
            return f64::INFINITY;
        }
        acc += p * value[t];
    }
    acc
}

/// Expected-hitting-cost values toward `goal` under the count-estimated
/// transitions: V(goal) = 0 and V(s) = min over observed actions of
/// 1 + E[V(s')]. States that cannot reach the goal keep an infinite value.
pub fn hitting_costs(mdp: &LatentMdp, goal: usize) -> Vec<f64> {
    let rows = RowCache::build(mdp);
    hitting_costs_cached(mdp, &rows, goal)
}

fn hitting_costs_cached(mdp: &LatentMdp, rows: &RowCache, goal: usize) -> Vec<f64> {
    let n = mdp.n_codes();
    // States outside the reverse-reachable set of the goal can never hit it.
    let mut can_reach = vec![false; n];
    can_reach[goal] = true;
    let mut queue = VecDeque::from([goal]);
    while let Some(v) = queue.pop_front() {
        for s in 0..n {
            if can_reach[s] {
                continue;
            }
            let found = (0..mdp.n_actions()).any(|a| {
                rows.row(s, a)
                    .is_some_and(|row| row.iter().any(|&(t, _)| t == v))
            });
            if found {
                can_reach[s] = true;
                queue.push_back(s);
            }
        }
    }

    // Value iteration from below: starting at zero, iterates increase
    // monotonically toward the least fixed point, which is the optimal
    // expected hitting cost (infinite exactly where no policy is proper).
    let mut value: Vec<f64> = (0..n)
        .map(|s| if can_reach[s] { 0.0 } else { f64::INFINITY })
        .collect();
    let mut next = value.clone();
    for _ in 0..20_000 {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            if s == goal || !can_reach[s] {
                continue;
            }
            let mut best = f64::INFINITY;
            for a in 0..mdp.n_actions() {
                if let Some(row) = rows.row(s, a) {
                    best = best.min(expected_cost(row, &value));
                }
            }
            if best.is_finite() {
                delta = delta.max(best - value[s]);
            }
            next[s] = best;
        }
        std::mem::swap(&mut value, &mut next);
        if delta < VALUE_TOL {
            break;
        }
    }
    // Values still climbing at the cap belong to states without a proper
    // policy; report them as unreachable.
    for v in value.iter_mut() {
        if *v > 1e9 {
            *v = f64::INFINITY;
        }
    }
    value
}

/// First action of a minimum-expected-cost policy from `current` to `goal`.
/// Re-invoked every step, so execution is closed-loop.
pub fn plan(mdp: &LatentMdp, current: usize, goal: usize) -> Result<usize, PlanError> {
    if current == goal {
        // Cost 0; callers treat the goal as reached and pick a new one.
        return Ok(0);
    }
    let rows = RowCache::build(mdp);
    let value = hitting_costs_cached(mdp, &rows, goal);
    if value[current].is_infinite() {
        return Err(PlanError::Unreachable {
            from: current,
            goal,
        });
    }
    let mut best_action = None;
    let mut best = f64::INFINITY;
    for a in 0..mdp.n_actions() {
        if let Some(row) = rows.row(current, a) {
            let expected = expected_cost(row, &value);
            if expected < best {
                best = expected;
                best_action = Some(a);
            }
        }
    }
    best_action.ok_or(PlanError::Unreachable {
        from: current,
        goal,
    })
}
