//! Partitions of the endogenous state set, consistency of a partition with a
//! family of inverse models, and exhaustive coarsest-partition search.

use std::collections::BTreeMap;

use super::{AcEntry, OracleError, PolicyTable, TabularExBmdp, CONSISTENCY_TOL};

/// A labeling of states into blocks. Labels are kept in canonical
/// restricted-growth form: `block_of[0] == 0` and each new block id is one
/// more than the largest id seen so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    block_of: Vec<usize>,
    n_blocks: usize,
}

impl Partition {
    /// Builds a partition from an arbitrary labeling, renumbering blocks
    /// into canonical restricted-growth form.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut block_of = Vec::with_capacity(labels.len());
        for &l in labels {
            let next_id = remap.len();
            let id = *remap.entry(l).or_insert(next_id);
            block_of.push(id);
        }
        Self {
            n_blocks: remap.len(),
            block_of,
        }
    }

    /// The finest partition: every state its own block.
    pub fn identity(n: usize) -> Self {
        Self {
            block_of: (0..n).collect(),
            n_blocks: n,
        }
    }

    pub fn block_of(&self, s: usize) -> usize {
        self.block_of[s]
    }

    pub fn labels(&self) -> &[usize] {
        &self.block_of
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn n_states(&self) -> usize {
        self.block_of.len()
    }

    pub fn is_identity(&self) -> bool {
        self.n_blocks == self.block_of.len()
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); self.n_blocks];
        for (s, &b) in self.block_of.iter().enumerate() {
            blocks[b].push(s);
        }
        let rendered: Vec<String> = blocks
            .iter()
            .map(|b| {
                let inner: Vec<String> = b.iter().map(|s| s.to_string()).collect();
                format!("{{{}}}", inner.join(","))
            })
            .collect();
        write!(f, "{}", rendered.join(" "))
    }
}

/// The first pair of entries that lands in the same (block, block, horizon)
/// cell with different inverse values.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub block_from: usize,
    pub block_to: usize,
    pub horizon: usize,
    pub action: usize,
    pub first: AcEntry,
    pub second: AcEntry,
}

impl std::fmt::Display for Witness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "cell (block {}, block {}, h'={}) action {}: ({}->{}) gives {:.6} but ({}->{}) gives {:.6}",
            self.block_from,
            self.block_to,
            self.horizon,
            self.action,
            self.first.from,
            self.first.to,
            self.first.inverse[self.action],
            self.second.from,
            self.second.to,
            self.second.inverse[self.action],
        )
    }
}

/// Checks whether merging states per `partition` ever assigns two different
/// inverse values to the same (block, block, horizon, action) cell.
/// Returns the first violating witness in entry order.
pub fn is_consistent(partition: &Partition, entries: &[AcEntry]) -> Result<(), Witness> {
    let mut cells: BTreeMap<(usize, usize, usize), &AcEntry> = BTreeMap::new();
    for entry in entries {
        let key = (
            partition.block_of(entry.from),
            partition.block_of(entry.to),
            entry.horizon,
        );
        match cells.get(&key) {
            None => {
                cells.insert(key, entry);
            }
            Some(first) => {
                for (action, (a, b)) in
                    first.inverse.iter().zip(entry.inverse.iter()).enumerate()
                {
                    if (a - b).abs() > CONSISTENCY_TOL {
                        return Err(Witness {
                            block_from: key.0,
                            block_to: key.1,
                            horizon: key.2,
                            action,
                            first: (*first).clone(),
                            second: entry.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Visits every partition of `{0..n}` as a canonical restricted-growth
/// labeling, in lexicographic order.
pub fn enumerate_partitions<F: FnMut(&[usize])>(n: usize, mut visit: F) {
    assert!(n >= 1);
    let mut labels = vec![0usize; n];
    fn rec<F: FnMut(&[usize])>(labels: &mut Vec<usize>, pos: usize, max_used: usize, visit: &mut F) {
        if pos == labels.len() {
            visit(labels);
            return;
        }
        for label in 0..=max_used + 1 {
            labels[pos] = label;
            rec(labels, pos + 1, max_used.max(label), visit);
        }
    }
    if n == 1 {
        visit(&labels);
        return;
    }
    rec(&mut labels, 1, 0, &mut visit);
}

/// Exhaustive search for a maximally coarse partition consistent with the
/// union of all inverse-model families up to horizon `k`. Ties are broken
/// by the lexicographically smallest restricted-growth labeling.
pub fn coarsest_consistent_partition(
    mdp: &TabularExBmdp,
    policy: &PolicyTable,
    k: usize,
) -> Result<Partition, OracleError> {
    let entries = super::ac_entries_all(mdp, policy, k);
    coarsest_consistent_with(mdp.n_endo(), &entries)
}

/// Smallest horizon at which the coarsest consistent partition becomes the
/// identity, capped at `k_cap`. Reported for diagnostics; no general claim
/// is made about horizons below the diameter.
pub fn minimal_identity_horizon(
    mdp: &TabularExBmdp,
    policy: &PolicyTable,
    k_cap: usize,
) -> Result<Option<usize>, OracleError> {
    for k in 1..=k_cap {
        if coarsest_consistent_partition(mdp, policy, k)?.is_identity() {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Same search against a caller-supplied entry list.
pub fn coarsest_consistent_with(
    n_states: usize,
    entries: &[AcEntry],
) -> Result<Partition, OracleError> {
    if n_states > super::PARTITION_BUDGET_STATES {
        return Err(OracleError::TooManyStates(n_states));
    }
    let mut best: Option<Partition> = None;
    enumerate_partitions(n_states, |labels| {
        let candidate = Partition::from_labels(labels);
        if let Some(b) = &best {
            if candidate.n_blocks() >= b.n_blocks() {
                return;
            }
        }
        if is_consistent(&candidate, entries).is_ok() {
            best = Some(candidate);
        }
    });
    Ok(best.expect("the identity partition is always consistent"))
}
