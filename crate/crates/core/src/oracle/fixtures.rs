//! Named tabular instances used by the verifier and by tests: cycles, the
//! corridor grid whose middle row merges under one-step inverse models, a
//! two-state toggle, and a rejection sampler for random instances that
//! satisfy the identifiability preconditions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{reachable_set, Partition, TabularExBmdp};

/// n-cycle with two actions: 0 moves one step earlier, 1 one step later.
pub fn cycle_mdp(n: usize) -> TabularExBmdp {
    let mut table = Vec::with_capacity(n * 2);
    for s in 0..n {
        table.push((s + n - 1) % n);
        table.push((s + 1) % n);
    }
    TabularExBmdp::new(n, 2, table, None).expect("cycle is strongly connected")
}

/// n-cycle with three actions: 0 earlier, 1 later, 2 stay in place.
///
/// The pure two-action cycle has a parity symmetry (the quotient that merges
/// opposite states commutes with the dynamics, so no exact-horizon inverse
/// model can tell merged states apart). The stay action breaks it, which is
/// the regime the identifiability argument needs: it is also how the maze
/// and arm environments behave, where blocked moves hold the agent in place.
pub fn lazy_cycle_mdp(n: usize) -> TabularExBmdp {
    let mut table = Vec::with_capacity(n * 3);
    for s in 0..n {
        table.push((s + n - 1) % n);
        table.push((s + 1) % n);
        table.push(s);
    }
    TabularExBmdp::new(n, 3, table, None).expect("cycle is strongly connected")
}

/// The 3-block merge of a 6-cycle that a one-step inverse model cannot rule
/// out: {0,3}, {1,4}, {2,5}.
pub fn merged_cycle_partition() -> Partition {
    Partition::from_labels(&[0, 1, 2, 0, 1, 2])
}

/// 3x3 grid with five actions (up, down, left, right, stay) where the
/// middle row is a corridor: its cells connect only vertically. A one-step
/// inverse model cannot distinguish the three corridor cells, a multi-step
/// one can. Cell ids are row-major from the top-left.
pub fn robo_grid_mdp() -> TabularExBmdp {
    let w = 3;
    let h = 3;
    let n = w * h;
    let idx = |x: usize, y: usize| y * w + x;
    // Walls between horizontally adjacent middle-row cells.
    let blocked = |ax: usize, ay: usize, bx: usize, by: usize| {
        ay == 1 && by == 1 && ax != bx
    };
    let mut table = Vec::with_capacity(n * 5);
    for y in 0..h {
        for x in 0..w {
            let moves = [
                (x as isize, y as isize - 1),
                (x as isize, y as isize + 1),
                (x as isize - 1, y as isize),
                (x as isize + 1, y as isize),
                (x as isize, y as isize),
            ];
            for (nx, ny) in moves {
                let stay = nx < 0
                    || ny < 0
                    || nx >= w as isize
                    || ny >= h as isize
                    || blocked(x, y, nx as usize, ny as usize);
                if stay {
                    table.push(idx(x, y));
                } else {
                    table.push(idx(nx as usize, ny as usize));
                }
            }
        }
    }
    TabularExBmdp::new(n, 5, table, None).expect("grid is connected through the corridor")
}

/// The merge the corridor grid admits at horizon one: cells 3, 4, 5 (the
/// middle row) in one block, everything else singleton.
pub fn robo_grid_middle_row_partition() -> Partition {
    Partition::from_labels(&[0, 1, 2, 3, 3, 3, 4, 5, 6])
}

/// Two states, two actions: action 0 toggles, action 1 holds.
pub fn toggle_mdp() -> TabularExBmdp {
    TabularExBmdp::new(2, 2, vec![1, 0, 0, 1], None).expect("toggle is connected")
}

/// Random row-stochastic chain with strictly positive entries.
pub fn random_exo_chain(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut chain = vec![vec![0.0; n]; n];
    for row in chain.iter_mut() {
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = rng.gen_range(0.05..1.0);
            sum += *p;
        }
        row.iter_mut().for_each(|p| *p /= sum);
    }
    chain
}

/// Samples a deterministic instance on which the coarsest-partition theorem
/// provably applies: strongly connected, and with every state reachable
/// from every state in exactly `diameter` steps. The exact-horizon coverage
/// condition is what the final step of the identifiability argument uses;
/// parity-locked instances such as even pure cycles violate it and are
/// rejected here (they are exercised separately as counterexamples).
pub fn random_theorem_mdp(
    rng: &mut ChaCha8Rng,
    max_states: usize,
    max_exo: usize,
) -> TabularExBmdp {
    assert!(max_states >= 2);
    loop {
        let n = rng.gen_range(2..=max_states);
        let n_actions = rng.gen_range(2..=3usize);
        let table: Vec<usize> = (0..n * n_actions).map(|_| rng.gen_range(0..n)).collect();
        let Ok(mdp) = TabularExBmdp::new(n, n_actions, table, None) else {
            continue;
        };
        let d = mdp.diameter().max(1);
        if (0..n).all(|s| reachable_set(&mdp, s, d).len() == n) {
            let n_exo = rng.gen_range(2..=max_exo);
            let chain = random_exo_chain(rng, n_exo);
            let (n, a, table) = (mdp.n_endo(), mdp.n_actions(), mdp_table(&mdp));
            return TabularExBmdp::new(n, a, table, Some(chain))
                .expect("revalidation of an accepted instance");
        }
    }
}

fn mdp_table(mdp: &TabularExBmdp) -> Vec<usize> {
    let mut table = Vec::with_capacity(mdp.n_endo() * mdp.n_actions());
    for s in 0..mdp.n_endo() {
        for a in 0..mdp.n_actions() {
            table.push(mdp.next(s, a));
        }
    }
    table
}
