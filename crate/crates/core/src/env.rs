//! Gridworld environments with factorized latent state: one controlled
//! agent whose cell evolves deterministically with actions, plus any number
//! of distractor agents in their own mazes whose motion ignores actions.
//! Observations are multi-hot position encodings, one block per maze with
//! the controlled maze first.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("controllable maze is disconnected: cell ({0}, {1}) unreachable from the start")]
    Disconnected(usize, usize),
    #[error("wall `{0}` is malformed, expected `x1,y1-x2,y2` between adjacent cells")]
    BadWall(String),
}

/// Declarative description of a multi-maze environment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct MazeSpec {
    pub grid_width: usize,
    pub grid_height: usize,
    /// Blocked edges between adjacent cells, each rendered as `x1,y1-x2,y2`.
    #[serde(default)]
    pub walls: Vec<String>,
    /// Number of distractor mazes (same layout, independently moving agents).
    pub n_exo_mazes: usize,
    /// Extra actions that teleport the controlled agent to the start cell.
    #[serde(default)]
    pub reset_actions: usize,
    pub seed: u64,
}

impl MazeSpec {
    /// Open grid with no internal walls.
    pub fn open(width: usize, height: usize, n_exo_mazes: usize, seed: u64) -> Self {
        Self {
            grid_width: width,
            grid_height: height,
            walls: Vec::new(),
            n_exo_mazes,
            reset_actions: 0,
            seed,
        }
    }

    /// Four rooms separated by a wall cross with one doorway per arm.
    /// Width and height must be even and at least 4.
    pub fn four_rooms(width: usize, height: usize, n_exo_mazes: usize, seed: u64) -> Self {
        assert!(width >= 4 && height >= 4 && width % 2 == 0 && height % 2 == 0);
        let mx = width / 2 - 1;
        let my = height / 2 - 1;
        let door_x = [1, width - 2];
        let door_y = [1, height - 2];
        let mut walls = Vec::new();
        for y in 0..height {
            if !door_y.contains(&y) {
                walls.push(format!("{},{}-{},{}", mx, y, mx + 1, y));
            }
        }
        for x in 0..width {
            if !door_x.contains(&x) {
                walls.push(format!("{},{}-{},{}", x, my, x, my + 1));
            }
        }
        Self {
            grid_width: width,
            grid_height: height,
            walls,
            n_exo_mazes,
            reset_actions: 0,
            seed,
        }
    }

    pub fn with_reset_actions(mut self, n: usize) -> Self {
        self.reset_actions = n;
        self
    }
}

/// Full state of a multi-maze environment: the controlled agent's cell, one
/// cell per distractor agent, and the random stream that drives distractor
/// motion. Cloning the state and replaying the same actions reproduces the
/// trajectory exactly.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub endo: usize,
    pub exo: Vec<usize>,
    pub exo_rng: ChaCha8Rng,
}

const DIRS: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

/// A built multi-maze environment with materialized transition tables.
#[derive(Debug, Clone)]
pub struct MultiMaze {
    spec: MazeSpec,
    n_cells: usize,
    n_actions: usize,
    /// `move_table[cell * 4 + dir]`, blocked moves are self-loops.
    move_table: Vec<usize>,
    start_cell: usize,
    reachable: Vec<usize>,
    diameter: usize,
}

fn parse_wall(s: &str) -> Result<((usize, usize), (usize, usize)), EnvError> {
    let bad = || EnvError::BadWall(s.to_string());
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    let parse_cell = |c: &str| -> Result<(usize, usize), EnvError> {
        let (x, y) = c.split_once(',').ok_or_else(bad)?;
        Ok((
            x.trim().parse().map_err(|_| bad())?,
            y.trim().parse().map_err(|_| bad())?,
        ))
    };
    Ok((parse_cell(a)?, parse_cell(b)?))
}

impl MultiMaze {
    pub fn build(spec: MazeSpec) -> Result<Self, EnvError> {
        let (w, h) = (spec.grid_width, spec.grid_height);
        let n_cells = w * h;
        let mut blocked = BTreeSet::new();
        for wall in &spec.walls {
            let ((x1, y1), (x2, y2)) = parse_wall(wall)?;
            let adjacent = x1 < w
                && x2 < w
                && y1 < h
                && y2 < h
                && (x1.abs_diff(x2) + y1.abs_diff(y2) == 1);
            if !adjacent {
                return Err(EnvError::BadWall(wall.clone()));
            }
            let a = y1 * w + x1;
            let b = y2 * w + x2;
            blocked.insert((a.min(b), a.max(b)));
        }

        let mut move_table = Vec::with_capacity(n_cells * 4);
        for y in 0..h {
            for x in 0..w {
                let from = y * w + x;
                for (dx, dy) in DIRS {
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    let stays = nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize || {
                        let to = ny as usize * w + nx as usize;
                        blocked.contains(&(from.min(to), from.max(to)))
                    };
                    move_table.push(if stays {
                        from
                    } else {
                        ny as usize * w + nx as usize
                    });
                }
            }
        }

        let start_cell = 0;
        let dist = bfs(&move_table, n_cells, start_cell);
        for cell in 0..n_cells {
            if dist[cell].is_none() {
                return Err(EnvError::Disconnected(cell % w, cell / w));
            }
        }
        let mut diameter = 0;
        for s in 0..n_cells {
            let d = bfs(&move_table, n_cells, s);
            for t in d.iter().flatten() {
                diameter = diameter.max(*t);
            }
        }
        let reachable = (0..n_cells).collect();
        let n_actions = 4 + spec.reset_actions;
        Ok(Self {
            spec,
            n_cells,
            n_actions,
            move_table,
            start_cell,
            reachable,
            diameter,
        })
    }

    pub fn spec(&self) -> &MazeSpec {
        &self.spec
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Dimension of the rendered observation vector.
    pub fn obs_dim(&self) -> usize {
        (1 + self.spec.n_exo_mazes) * self.n_cells
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn start_cell(&self) -> usize {
        self.start_cell
    }

    /// Cells reachable from the start (always all cells for a built maze).
    pub fn reachable_cells(&self) -> &[usize] {
        &self.reachable
    }

    /// Longest shortest path between any two cells.
    pub fn diameter(&self) -> usize {
        self.diameter
    }

    /// Deterministic endogenous successor of (cell, action).
    pub fn endo_next(&self, cell: usize, action: usize) -> usize {
        if action < 4 {
            self.move_table[cell * 4 + action]
        } else {
            self.start_cell
        }
    }

    /// Initial state: controlled agent at the start cell, distractors
    /// uniform over their cells, seeded from the spec.
    pub fn init_state(&self) -> EnvState {
        let mut seeder = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let exo = (0..self.spec.n_exo_mazes)
            .map(|_| seeder.gen_range(0..self.n_cells))
            .collect();
        let exo_rng = ChaCha8Rng::seed_from_u64(seeder.gen());
        EnvState {
            endo: self.start_cell,
            exo,
            exo_rng,
        }
    }

    /// Legal neighbor cells (excluding self) for distractor motion.
    fn legal_neighbors(&self, cell: usize) -> Vec<usize> {
        (0..4)
            .map(|d| self.move_table[cell * 4 + d])
            .filter(|&to| to != cell)
            .collect()
    }

    /// Advances the environment one step. The controlled agent moves
    /// deterministically (blocked moves hold it in place, reset actions jump
    /// to the start cell); every distractor takes an independent
    /// uniform-random legal move off the state's own random stream.
    pub fn step_state(&self, state: &EnvState, action: usize) -> (EnvState, Vec<f64>) {
        assert!(action < self.n_actions, "action out of range");
        let mut next = state.clone();
        next.endo = self.endo_next(state.endo, action);
        for slot in next.exo.iter_mut() {
            let options = self.legal_neighbors(*slot);
            if !options.is_empty() {
                *slot = options[next.exo_rng.gen_range(0..options.len())];
            }
        }
        let obs = self.render(&next);
        (next, obs)
    }

    /// Multi-hot rendering: one block of `n_cells` entries per maze, the
    /// controlled maze first, exactly one hot entry per block.
    pub fn render(&self, state: &EnvState) -> Vec<f64> {
        let mut obs = vec![0.0; self.obs_dim()];
        for (i, &idx) in self.hot_indices(state).iter().enumerate() {
            debug_assert!(i <= self.spec.n_exo_mazes);
            obs[idx as usize] = 1.0;
        }
        obs
    }

    /// The indices of the hot entries of `render`, controlled maze first.
    pub fn hot_indices(&self, state: &EnvState) -> Vec<u32> {
        let mut hot = Vec::with_capacity(1 + self.spec.n_exo_mazes);
        hot.push(state.endo as u32);
        for (m, &cell) in state.exo.iter().enumerate() {
            hot.push(((m + 1) * self.n_cells + cell) as u32);
        }
        hot
    }

    /// Evaluation-only oracle access to the controlled agent's true cell.
    pub fn ground_endogenous(&self, state: &EnvState) -> usize {
        state.endo
    }
}

fn bfs(move_table: &[usize], n_cells: usize, start: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; n_cells];
    dist[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap();
        for d in 0..4 {
            let v = move_table[u * 4 + d];
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// The surface learners interact with: sparse multi-hot observations in,
/// actions out, plus evaluation-only ground truth kept behind separate
/// methods. A fresh environment starts in its initial state.
pub trait Environment {
    fn n_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Hot indices of the current observation.
    fn observe(&self) -> Vec<u32>;
    /// Advances the environment by one action.
    fn step(&mut self, action: usize);
    /// Evaluation-only: the true controllable state id.
    fn ground_endo(&self) -> usize;
    /// Evaluation-only: number of reachable controllable states.
    fn n_ground_states(&self) -> usize;
}

/// Stateful wrapper holding a maze plus its current state.
pub struct MazeSession {
    maze: MultiMaze,
    state: EnvState,
}

impl MazeSession {
    pub fn new(maze: MultiMaze) -> Self {
        let state = maze.init_state();
        Self { maze, state }
    }

    pub fn maze(&self) -> &MultiMaze {
        &self.maze
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }
}

impl Environment for MazeSession {
    fn n_actions(&self) -> usize {
        self.maze.n_actions()
    }

    fn obs_dim(&self) -> usize {
        self.maze.obs_dim()
    }

    fn observe(&self) -> Vec<u32> {
        self.maze.hot_indices(&self.state)
    }

    fn step(&mut self, action: usize) {
        let (next, _) = self.maze.step_state(&self.state, action);
        self.state = next;
    }

    fn ground_endo(&self) -> usize {
        self.maze.ground_endogenous(&self.state)
    }

    fn n_ground_states(&self) -> usize {
        self.maze.reachable_cells().len()
    }
}

/// An environment over an explicit tabular instance, rendering the product
/// of a one-hot endogenous block and one one-hot block per exogenous chain
/// state. Used for counterexample-scale experiments.
pub struct TabularSession {
    mdp: crate::oracle::TabularExBmdp,
    endo: usize,
    exo: usize,
    exo_rng: ChaCha8Rng,
}

impl TabularSession {
    pub fn new(mdp: crate::oracle::TabularExBmdp, seed: u64) -> Self {
        Self {
            mdp,
            endo: 0,
            exo: 0,
            exo_rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn n_exo(&self) -> usize {
        self.mdp.exo_chain().map_or(0, |c| c.len())
    }
}

impl Environment for TabularSession {
    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn obs_dim(&self) -> usize {
        self.mdp.n_endo() + self.n_exo()
    }

    fn observe(&self) -> Vec<u32> {
        let mut hot = vec![self.endo as u32];
        if self.n_exo() > 0 {
            hot.push((self.mdp.n_endo() + self.exo) as u32);
        }
        hot
    }

    fn step(&mut self, action: usize) {
        self.endo = self.mdp.next(self.endo, action);
        if let Some(chain) = self.mdp.exo_chain() {
            let row = &chain[self.exo];
            let u: f64 = self.exo_rng.gen();
            let mut acc = 0.0;
            let mut chosen = row.len() - 1;
            for (e, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = e;
                    break;
                }
            }
            self.exo = chosen;
        }
    }

    fn ground_endo(&self) -> usize {
        self.endo
    }

    fn n_ground_states(&self) -> usize {
        self.mdp.n_endo()
    }
}
