//! Inverse models on the explicit product space of (endogenous, exogenous)
//! state pairs, used to check that the observation-level first-action
//! posterior collapses to the endogenous-only posterior under any
//! endogenous policy.

use super::{exact_inverse, OracleError, PolicyTable, TabularExBmdp};

/// A finite MDP with stochastic transitions, built over product states.
struct ProductMdp {
    n_states: usize,
    n_actions: usize,
    /// `trans[a][z][z']`
    trans: Vec<Vec<Vec<f64>>>,
}

impl ProductMdp {
    fn build(mdp: &TabularExBmdp, exo: &[Vec<f64>]) -> Self {
        let n_e = exo.len();
        let n_states = mdp.n_endo() * n_e;
        let n_actions = mdp.n_actions();
        let mut trans = vec![vec![vec![0.0; n_states]; n_states]; n_actions];
        for s in 0..mdp.n_endo() {
            for e in 0..n_e {
                let z = s * n_e + e;
                for a in 0..n_actions {
                    let s_next = mdp.next(s, a);
                    for (e_next, &p) in exo[e].iter().enumerate() {
                        trans[a][z][s_next * n_e + e_next] += p;
                    }
                }
            }
        }
        Self {
            n_states,
            n_actions,
            trans,
        }
    }

    /// Policy-mixed one-step chain.
    fn chain(&self, policy: &[f64]) -> Vec<Vec<f64>> {
        let mut chain = vec![vec![0.0; self.n_states]; self.n_states];
        for z in 0..self.n_states {
            for a in 0..self.n_actions {
                let pa = policy[z * self.n_actions + a];
                if pa == 0.0 {
                    continue;
                }
                for (z_next, &p) in self.trans[a][z].iter().enumerate() {
                    chain[z][z_next] += pa * p;
                }
            }
        }
        chain
    }

    /// First-action posterior for the k-step transition z -> z_next, or
    /// `None` when that transition has probability zero.
    fn first_action_posterior(
        &self,
        policy: &[f64],
        chain_powers: &[Vec<Vec<f64>>],
        z: usize,
        z_next: usize,
        k: usize,
    ) -> Option<Vec<f64>> {
        let tail = &chain_powers[k - 1];
        let mut masses = vec![0.0; self.n_actions];
        for a in 0..self.n_actions {
            let pa = policy[z * self.n_actions + a];
            if pa == 0.0 {
                continue;
            }
            let mut mass = 0.0;
            for (mid, &p) in self.trans[a][z].iter().enumerate() {
                if p != 0.0 {
                    mass += p * tail[mid][z_next];
                }
            }
            masses[a] = pa * mass;
        }
        let total: f64 = masses.iter().sum();
        if total == 0.0 {
            return None;
        }
        masses.iter_mut().for_each(|m| *m /= total);
        Some(masses)
    }
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for l in 0..n {
            let v = a[i][l];
            if v == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += v * b[l][j];
            }
        }
    }
    out
}

/// Powers 0..=k of a chain; power 0 is the identity.
fn chain_powers(chain: &[Vec<f64>], k: usize) -> Vec<Vec<Vec<f64>>> {
    let n = chain.len();
    let mut identity = vec![vec![0.0; n]; n];
    for (i, row) in identity.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut powers = vec![identity];
    for i in 0..k {
        powers.push(matmul(&powers[i], chain));
    }
    powers
}

/// Max absolute deviation between the product-space first-action posterior
/// and the endogenous-only posterior, over all defined (z, z', k <= k_max)
/// tuples, with the endogenous policy lifted to the product space.
pub fn product_inverse_invariance(
    mdp: &TabularExBmdp,
    policy: &PolicyTable,
    k_max: usize,
) -> Result<f64, OracleError> {
    let exo = mdp.exo_chain().ok_or(OracleError::MissingExoChain)?;
    let n_e = exo.len();
    let mut lifted = vec![0.0; mdp.n_endo() * n_e * mdp.n_actions()];
    for s in 0..mdp.n_endo() {
        for e in 0..n_e {
            for a in 0..mdp.n_actions() {
                lifted[(s * n_e + e) * mdp.n_actions() + a] = policy.prob(s, a);
            }
        }
    }
    product_inverse_deviation(mdp, &lifted, policy, k_max)
}

/// Same comparison with an arbitrary product-space policy (indexed
/// `z * n_actions + a` with z = s * n_exo + e) against a reference
/// endogenous policy. Policies that depend on the exogenous state produce
/// a strictly positive deviation.
pub fn product_inverse_deviation(
    mdp: &TabularExBmdp,
    product_policy: &[f64],
    reference: &PolicyTable,
    k_max: usize,
) -> Result<f64, OracleError> {
    let exo = mdp.exo_chain().ok_or(OracleError::MissingExoChain)?;
    let n_e = exo.len();
    let product = ProductMdp::build(mdp, exo);
    assert_eq!(product_policy.len(), product.n_states * product.n_actions);
    let chain = product.chain(product_policy);
    let powers = chain_powers(&chain, k_max.saturating_sub(1));

    let mut max_dev: f64 = 0.0;
    for k in 1..=k_max {
        for z in 0..product.n_states {
            for z_next in 0..product.n_states {
                let Some(prod_inv) =
                    product.first_action_posterior(product_policy, &powers, z, z_next, k)
                else {
                    continue;
                };
                let s = z / n_e;
                let s_next = z_next / n_e;
                let endo_inv = exact_inverse(mdp, reference, s, s_next, k).expect(
                    "endogenous inverse is defined whenever the product inverse is defined",
                );
                for (a, b) in prod_inv.iter().zip(endo_inv.iter()) {
                    max_dev = max_dev.max((a - b).abs());
                }
            }
        }
    }
    Ok(max_dev)
}
