//! Exact mathematics on small tabular factorized MDPs.
//!
//! Everything in here is computed in closed form over explicit tables:
//! k-step state distributions, Bayes posteriors over the first action of a
//! k-step transition, exact reachability, consistent partitions and the
//! coarsest-partition search, and product-space invariance checks. These
//! functions serve both as a theory verifier and as ground-truth oracles for
//! the learned components.

mod fixtures;
mod partition;
mod product;
mod text;

pub use fixtures::{
    cycle_mdp, lazy_cycle_mdp, merged_cycle_partition, random_theorem_mdp, robo_grid_mdp,
    robo_grid_middle_row_partition, toggle_mdp,
};
pub use partition::{
    coarsest_consistent_partition, coarsest_consistent_with, enumerate_partitions, is_consistent,
    minimal_identity_horizon, Partition, Witness,
};
pub use product::{product_inverse_deviation, product_inverse_invariance};
pub use text::{mdp_from_text, mdp_to_text};

use std::collections::BTreeSet;
use thiserror::Error;

/// Probabilities this close to a true zero are treated as structural zeros.
/// Inverse values are rationals in principle; this only absorbs round-off.
pub const CONSISTENCY_TOL: f64 = 1e-9;

const STATIONARY_TOL: f64 = 1e-12;
const STATIONARY_MAX_ITERS: usize = 200_000;

/// Partition enumeration is capped at |S| = 10 (Bell number 115975).
pub const PARTITION_BUDGET_STATES: usize = 10;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("state {to} is not reachable from state {from}; diameter is undefined")]
    Disconnected { from: usize, to: usize },
    #[error("transition row {row} sums to {sum}, expected 1")]
    BadRow { row: usize, sum: f64 },
    #[error("policy row {row} sums to {sum}, expected 1")]
    BadPolicyRow { row: usize, sum: f64 },
    #[error("partition enumeration supports at most {PARTITION_BUDGET_STATES} states, got {0}")]
    TooManyStates(usize),
    #[error("power iteration did not converge after {iters} iterations (residual {residual:.3e}); the chain is likely periodic")]
    Periodicity { iters: usize, residual: f64 },
    #[error("operation requires an exogenous chain but none is present")]
    MissingExoChain,
    #[error("malformed tabular MDP text at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A deterministic endogenous transition table plus an optional exogenous
/// Markov chain. The endogenous part is total: every (state, action) pair
/// maps to exactly one next state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularExBmdp {
    n_endo: usize,
    n_actions: usize,
    /// Row-major table: `endo_next[s * n_actions + a]`.
    endo_next: Vec<usize>,
    /// Row-stochastic chain over exogenous states, identity when absent.
    exo_chain: Option<Vec<Vec<f64>>>,
    /// Max over ordered state pairs of the BFS shortest-path length.
    diameter: usize,
}

impl TabularExBmdp {
    /// Builds the MDP and computes its diameter. Fails if any state is
    /// unreachable from any other or if a chain row does not sum to 1.
    pub fn new(
        n_endo: usize,
        n_actions: usize,
        endo_next: Vec<usize>,
        exo_chain: Option<Vec<Vec<f64>>>,
    ) -> Result<Self, OracleError> {
        assert_eq!(endo_next.len(), n_endo * n_actions, "transition table size");
        assert!(endo_next.iter().all(|&s| s < n_endo), "next state in range");
        if let Some(chain) = &exo_chain {
            for (row, probs) in chain.iter().enumerate() {
                assert_eq!(probs.len(), chain.len(), "exo chain must be square");
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > STATIONARY_TOL {
                    return Err(OracleError::BadRow { row, sum });
                }
            }
        }
        let mut mdp = Self {
            n_endo,
            n_actions,
            endo_next,
            exo_chain,
            diameter: 0,
        };
        mdp.diameter = mdp.compute_diameter()?;
        Ok(mdp)
    }

    pub fn n_endo(&self) -> usize {
        self.n_endo
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn next(&self, s: usize, a: usize) -> usize {
        self.endo_next[s * self.n_actions + a]
    }

    pub fn exo_chain(&self) -> Option<&Vec<Vec<f64>>> {
        self.exo_chain.as_ref()
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }

    fn compute_diameter(&self) -> Result<usize, OracleError> {
        let mut diameter = 0;
        for s in 0..self.n_endo {
            let dist = self.bfs_distances(s);
            for (t, d) in dist.iter().enumerate() {
                match d {
                    Some(d) => diameter = diameter.max(*d),
                    None => return Err(OracleError::Disconnected { from: s, to: t }),
                }
            }
        }
        Ok(diameter)
    }

    /// Shortest path lengths from `s` in the action-union graph.
    pub fn bfs_distances(&self, s: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_endo];
        dist[s] = Some(0);
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for a in 0..self.n_actions {
                let v = self.next(u, a);
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// A stationary policy over endogenous states, stored as a row-stochastic
/// `n_states x n_actions` table. Indexing by endogenous state only makes
/// every `PolicyTable` an endogenous policy by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, OracleError> {
        assert_eq!(probs.len(), n_states * n_actions);
        for row in 0..n_states {
            let sum: f64 = probs[row * n_actions..(row + 1) * n_actions].iter().sum();
            if (sum - 1.0).abs() > STATIONARY_TOL {
                return Err(OracleError::BadPolicyRow { row, sum });
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// Smallest probability assigned to any action anywhere.
    pub fn min_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

/// Exact k-step endogenous state distribution starting from `s` under
/// `policy`, by repeated application of the policy-mixed transition.
pub fn k_step_dist(mdp: &TabularExBmdp, policy: &PolicyTable, s: usize, k: usize) -> Vec<f64> {
    let mut dist = vec![0.0; mdp.n_endo];
    dist[s] = 1.0;
    let mut next = vec![0.0; mdp.n_endo];
    for _ in 0..k {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (u, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions {
                next[mdp.next(u, a)] += p * policy.prob(u, a);
            }
        }
        std::mem::swap(&mut dist, &mut next);
    }
    dist
}

/// Bayes posterior over the first action of a k-step transition from `s`
/// to `s_next`. Returns `None` when the transition has probability zero,
/// in which case the conditional is not defined.
pub fn exact_inverse(
    mdp: &TabularExBmdp,
    policy: &PolicyTable,
    s: usize,
    s_next: usize,
    k: usize,
) -> Option<Vec<f64>> {
    assert!(k >= 1, "inverse requires k >= 1");
    let mut masses = vec![0.0; mdp.n_actions];
    for a in 0..mdp.n_actions {
        let mid = mdp.next(s, a);
        let tail = k_step_dist(mdp, policy, mid, k - 1);
        masses[a] = policy.prob(s, a) * tail[s_next];
    }
    let total: f64 = masses.iter().sum();
    if total == 0.0 {
        return None;
    }
    masses.iter_mut().for_each(|m| *m /= total);
    Some(masses)
}

/// States reachable from `s` in exactly `h` steps by some action sequence.
pub fn reachable_set(mdp: &TabularExBmdp, s: usize, h: usize) -> BTreeSet<usize> {
    let mut frontier = BTreeSet::from([s]);
    for _ in 0..h {
        let mut next = BTreeSet::new();
        for &u in &frontier {
            for a in 0..mdp.n_actions {
                next.insert(mdp.next(u, a));
            }
        }
        frontier = next;
    }
    frontier
}

/// One materialized multi-step inverse model: the first-action posterior for
/// travelling from `from` to `to` in exactly `horizon` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AcEntry {
    pub from: usize,
    pub to: usize,
    pub horizon: usize,
    pub inverse: Vec<f64>,
}

/// The family of inverse models accessible from `s` within horizon `h`:
/// entries (s', s'', h') with s' reachable from s in h - h' steps and s''
/// reachable from s' in h' steps, for every h' in 1..=h. Every entry's
/// inverse is defined because s'' is reachable from s' in exactly h' steps
/// and the policy is assumed exploratory.
pub fn ac_set(mdp: &TabularExBmdp, policy: &PolicyTable, s: usize, h: usize) -> Vec<AcEntry> {
    assert!(h >= 1);
    let mut entries = Vec::new();
    for horizon in 1..=h {
        for &from in &reachable_set(mdp, s, h - horizon) {
            for &to in &reachable_set(mdp, from, horizon) {
                let inverse = exact_inverse(mdp, policy, from, to, horizon)
                    .expect("inverse is defined for exact-horizon reachable targets");
                entries.push(AcEntry {
                    from,
                    to,
                    horizon,
                    inverse,
                });
            }
        }
    }
    entries
}

/// Union over all start states of `ac_set(s, k)`, deduplicated.
pub fn ac_entries_all(mdp: &TabularExBmdp, policy: &PolicyTable, k: usize) -> Vec<AcEntry> {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for s in 0..mdp.n_endo {
        for entry in ac_set(mdp, policy, s, k) {
            if seen.insert((entry.horizon, entry.from, entry.to)) {
                entries.push(entry);
            }
        }
    }
    entries.sort_by_key(|e| (e.horizon, e.from, e.to));
    entries
}

/// Stationary distribution of a row-stochastic chain by power iteration.
/// Fails with a periodicity error when the iteration does not settle.
pub fn stationary_dist(chain: &[Vec<f64>]) -> Result<Vec<f64>, OracleError> {
    let n = chain.len();
    for (row, probs) in chain.iter().enumerate() {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > STATIONARY_TOL {
            return Err(OracleError::BadRow { row, sum });
        }
    }
    // Start asymmetric so periodic chains oscillate instead of sitting on
    // an accidental fixed point.
    let mut dist: Vec<f64> = (0..n).map(|i| (i + 1) as f64).collect();
    let total: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|x| *x /= total);
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..STATIONARY_MAX_ITERS {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (u, &p) in dist.iter().enumerate() {
            for (v, &q) in chain[u].iter().enumerate() {
                next[v] += p * q;
            }
        }
        residual = dist
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        std::mem::swap(&mut dist, &mut next);
        if residual < STATIONARY_TOL {
            let total: f64 = dist.iter().sum();
            dist.iter_mut().for_each(|x| *x /= total);
            return Ok(dist);
        }
    }
    Err(OracleError::Periodicity {
        iters: STATIONARY_MAX_ITERS,
        residual,
    })
}

/// The Markov chain over endogenous states induced by following `policy`.
pub fn policy_chain(mdp: &TabularExBmdp, policy: &PolicyTable) -> Vec<Vec<f64>> {
    let mut chain = vec![vec![0.0; mdp.n_endo]; mdp.n_endo];
    for s in 0..mdp.n_endo {
        for a in 0..mdp.n_actions {
            chain[s][mdp.next(s, a)] += policy.prob(s, a);
        }
    }
    chain
}
