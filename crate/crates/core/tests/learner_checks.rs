//! Data collection, offline training, and the online planning loop at
//! desk scale.

use cls_core::env::{Environment, MazeSession, MazeSpec, MultiMaze, TabularSession};
use cls_core::learner::*;
use cls_core::metrics::CooccurrenceTable;
use cls_core::oracle::{exact_inverse, lazy_cycle_mdp, toggle_mdp, PolicyTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toggle_session(seed: u64) -> TabularSession {
    TabularSession::new(toggle_mdp(), seed)
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        k_max: 2,
        n_codes: 4,
        bottleneck_dim: 4,
        hidden_dim: 16,
        head_hidden: 16,
        k_embed_dim: 4,
        batch_size: 32,
        iterations: 400,
        learning_rate: 3e-3,
        dead_code_interval: 50,
        metrics_every: 100,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn collect_random_minimal_trajectory() {
    let mut env = toggle_session(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let buffer = collect_random(&mut env, 2, 3, &mut rng);
    assert_eq!(buffer.len(), 2);
    assert_eq!(buffer.actions.len(), 1);
    assert_eq!(buffer.random_marks, vec![0]);
    assert_eq!(buffer.horizon_caps, vec![3]);
    assert!(buffer.ground_labels.is_some());
}

#[test]
fn collect_random_action_frequencies_are_uniform() {
    let maze = MultiMaze::build(MazeSpec::open(3, 3, 0, 5)).unwrap();
    let mut env = MazeSession::new(maze);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let buffer = collect_random(&mut env, 10_000, 4, &mut rng);
    let mut counts = [0usize; 4];
    for &a in &buffer.actions {
        counts[a as usize] += 1;
    }
    for c in counts {
        let f = c as f64 / buffer.actions.len() as f64;
        assert!((0.23..=0.27).contains(&f), "frequency {f}");
    }
}

#[test]
fn sampled_pairs_satisfy_the_mark_and_horizon_contract() {
    let mut env = toggle_session(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut buffer = collect_random(&mut env, 50, 6, &mut rng);
    // Restrict the marks to a sparse subset with assorted caps.
    buffer.random_marks = vec![3, 10, 44, 48];
    buffer.horizon_caps = vec![2, 6, 1, 6];
    buffer.validate();
    let view = buffer.train_view();
    for _ in 0..2000 {
        let (t, k) = view.sample_pair(6, &mut rng);
        let slot = buffer.random_marks.iter().position(|&m| m as usize == t);
        assert!(slot.is_some(), "t={t} not marked");
        assert!(k >= 1 && k <= buffer.horizon_caps[slot.unwrap()] as usize);
        assert!(t + k <= buffer.len() - 1);
    }
}

#[test]
fn zero_iterations_returns_initialized_encoder() {
    let mut env = toggle_session(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let buffer = collect_random(&mut env, 64, 2, &mut rng);
    let mut cfg = tiny_cfg();
    cfg.iterations = 0;
    let outcome = train_acstate(buffer.train_view(), &cfg).unwrap();
    // No gradient step ran: every tensor except the data-seeded codebook is
    // bit-identical to a freshly initialized stack under the same seed.
    let mut fresh = cls_core::nn::EncoderStack::new(
        cfg.stack_config(buffer.obs_dim, buffer.n_actions),
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    );
    let mut got = outcome.stack.clone();
    for ((name, a), (_, b)) in got.tensors_mut().iter().zip(fresh.tensors_mut().iter()) {
        if name == "codebook" {
            continue;
        }
        assert_eq!(a, b, "tensor {name} changed");
    }
}

#[test]
fn toggle_environment_is_discovered_exactly() {
    let mut env = toggle_session(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let buffer = collect_random(&mut env, 400, 2, &mut rng);
    let outcome = train_acstate(buffer.train_view(), &tiny_cfg()).unwrap();
    assert_eq!(outcome.codes_used, 2, "toggle has exactly two ground states");
    assert!(!outcome.collapse_warning);
    let cooc = CooccurrenceTable::build(&outcome.stack, &buffer);
    assert_eq!(cooc.purity(), 1.0);
}

#[test]
fn one_step_inverse_suffices_on_the_toggle() {
    let mut env = toggle_session(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let buffer = collect_random(&mut env, 400, 2, &mut rng);
    let outcome = train_one_step_inverse(buffer.train_view(), &tiny_cfg()).unwrap();
    assert_eq!(outcome.codes_used, 2);
    let cooc = CooccurrenceTable::build(&outcome.stack, &buffer);
    assert_eq!(cooc.purity(), 1.0);
}

#[test]
fn lazy_cycle_with_full_horizon_separates_all_states() {
    let mut env = TabularSession::new(lazy_cycle_mdp(6), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let buffer = collect_random(&mut env, 1500, 3, &mut rng);
    let mut cfg = tiny_cfg();
    cfg.k_max = 3;
    cfg.n_codes = 8;
    cfg.bottleneck_dim = 6;
    cfg.iterations = 900;
    let outcome = train_acstate(buffer.train_view(), &cfg).unwrap();
    assert_eq!(outcome.codes_used, 6, "all six cycle states separated");
    let cooc = CooccurrenceTable::build(&outcome.stack, &buffer);
    assert_eq!(cooc.purity(), 1.0);
}

#[test]
fn training_never_reads_ground_labels() {
    let mut env = toggle_session(14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let buffer = collect_random(&mut env, 200, 2, &mut rng);
    let mut stripped = buffer.clone();
    stripped.ground_labels = None;
    let cfg = tiny_cfg();
    let mut a = train_acstate(buffer.train_view(), &cfg).unwrap().stack;
    let mut b = train_acstate(stripped.train_view(), &cfg).unwrap().stack;
    for ((name, ta), (_, tb)) in a.tensors_mut().iter().zip(b.tensors_mut().iter()) {
        for (x, y) in ta.iter().zip(tb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "tensor {name} depends on labels");
        }
    }
}

#[test]
fn equal_config_and_seed_reproduce_bit_identical_stacks() {
    let run = || {
        let mut env = toggle_session(16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let buffer = collect_random(&mut env, 200, 2, &mut rng);
        train_acstate(buffer.train_view(), &tiny_cfg()).unwrap().stack
    };
    let mut a = run();
    let mut b = run();
    for ((name, ta), (_, tb)) in a.tensors_mut().iter().zip(b.tensors_mut().iter()) {
        for (x, y) in ta.iter().zip(tb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "tensor {name} not reproducible");
        }
    }
}

#[test]
fn converged_loss_respects_the_exact_entropy_floor() {
    // The cross-entropy of any encoder is bounded below by the conditional
    // entropy of the first action given the true states and horizon, which
    // the tabular oracle computes exactly.
    let mdp = toggle_mdp();
    let policy = PolicyTable::uniform(2, 2);
    let mut env = toggle_session(18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let buffer = collect_random(&mut env, 500, 2, &mut rng);
    let cfg = tiny_cfg();
    let outcome = train_acstate(buffer.train_view(), &cfg).unwrap();
    let final_ce = outcome.history.last().unwrap().losses.ce;

    // Empirical floor over the same pair distribution the trainer samples.
    let labels = buffer.ground_labels.as_ref().unwrap();
    let view = buffer.train_view();
    let mut floor_rng = ChaCha8Rng::seed_from_u64(20);
    let mut floor = 0.0;
    let n = 4000;
    for _ in 0..n {
        let (t, k) = view.sample_pair(cfg.k_max, &mut floor_rng);
        let s = labels[t] as usize;
        let s_next = labels[t + k] as usize;
        let inv = exact_inverse(&mdp, &policy, s, s_next, k).expect("observed pair");
        floor += -inv[buffer.actions[t] as usize].ln();
    }
    floor /= n as f64;
    assert!(
        final_ce >= floor - 0.05,
        "ce {final_ce} dips below the exact floor {floor}"
    );
    assert!(
        final_ce <= floor + 0.15,
        "ce {final_ce} never approached the floor {floor}"
    );
}

#[test]
fn contrastive_identical_pairs_start_at_log_batch() {
    let mut env = toggle_session(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut buffer = collect_random(&mut env, 50, 2, &mut rng);
    // Make every observation identical: all positive pairs coincide and
    // similarities are constant across the batch.
    let first = buffer.observations[0].clone();
    for obs in buffer.observations.iter_mut() {
        *obs = first.clone();
    }
    let cfg = tiny_cfg();
    let stack = cls_core::nn::EncoderStack::new(
        cfg.stack_config(buffer.obs_dim, buffer.n_actions),
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let mut grads = stack.zeros_like();
    let mut tracker = DeadCodeTracker::new(cfg.n_codes);
    let indices: Vec<usize> = (0..16).collect();
    // Eval-style determinism is irrelevant here; identical inputs with a
    // shared rng still give identical embeddings per call order, so use
    // eval mode by encoding without noise: temperature handles scale.
    let losses = contrastive_batch_step(
        &stack,
        buffer.train_view(),
        &indices,
        0.5,
        &mut ChaCha8Rng::seed_from_u64(23),
        &mut grads,
        &mut tracker,
    )
    .unwrap();
    let per_sample_ce = losses.ce / 16.0;
    // Identical embeddings up to sampling noise: close to ln(batch).
    assert!(
        (per_sample_ce - (16.0f64).ln()).abs() < 0.05,
        "ce {per_sample_ce}"
    );
}

#[test]
fn contrastive_gradients_vanish_at_high_temperature() {
    let mut env = toggle_session(24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let buffer = collect_random(&mut env, 60, 2, &mut rng);
    let cfg = tiny_cfg();
    let mut stack = cls_core::nn::EncoderStack::new(
        cfg.stack_config(buffer.obs_dim, buffer.n_actions),
        &mut ChaCha8Rng::seed_from_u64(2),
    );
    // Isolate the similarity gradient path.
    stack.cfg.beta = 0.0;
    stack.cfg.vq_weight = 0.0;
    stack.cfg.commit_weight = 0.0;
    let indices: Vec<usize> = (0..8).collect();
    let grad_norm = |temperature: f64| {
        let mut grads = stack.zeros_like();
        let mut tracker = DeadCodeTracker::new(cfg.n_codes);
        contrastive_batch_step(
            &stack,
            buffer.train_view(),
            &indices,
            temperature,
            &mut ChaCha8Rng::seed_from_u64(26),
            &mut grads,
            &mut tracker,
        )
        .unwrap();
        let mut norm = 0.0;
        for (_, t) in grads.tensors_mut() {
            for g in t {
                norm += *g * *g;
            }
        }
        norm.sqrt()
    };
    let cold = grad_norm(0.5);
    let hot = grad_norm(5e4);
    assert!(hot < 1e-3 * cold, "hot {hot} vs cold {cold}");
}

#[test]
fn autoencoder_reconstruction_improves_early() {
    let mut env = toggle_session(27);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let buffer = collect_random(&mut env, 300, 2, &mut rng);
    let mut cfg = tiny_cfg();
    cfg.iterations = 100;
    cfg.metrics_every = 10;
    let (outcome, _decoder) = train_autoencoder(buffer.train_view(), &cfg).unwrap();
    let first = outcome.history.first().unwrap().losses.ce;
    let last = outcome.history.last().unwrap().losses.ce;
    assert!(
        last < first,
        "reconstruction did not improve: {first} -> {last}"
    );
}

#[test]
fn autoencoder_recovers_states_without_distractors() {
    let mut env = toggle_session(29);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let buffer = collect_random(&mut env, 400, 2, &mut rng);
    let mut cfg = tiny_cfg();
    cfg.iterations = 600;
    let (outcome, _decoder) = train_autoencoder(buffer.train_view(), &cfg).unwrap();
    let cooc = CooccurrenceTable::build(&outcome.stack, &buffer);
    assert!(cooc.purity() >= 0.99, "purity {}", cooc.purity());
}

#[test]
fn planning_loop_covers_a_small_maze() {
    let maze = MultiMaze::build(MazeSpec::open(4, 4, 0, 31)).unwrap();
    let mut env = MazeSession::new(maze);
    let mut cfg = tiny_cfg();
    cfg.k_max = 6;
    cfg.n_codes = 24;
    cfg.bottleneck_dim = 8;
    cfg.iterations = 0;
    cfg.planning_batch = 16;
    cfg.graph_rebuild_every = 250;
    cfg.metrics_every = 250;
    let outcome = run_planning_acstate(&mut env, &cfg, 2500).unwrap();
    let labels = outcome.buffer.ground_labels.as_ref().unwrap();
    let seen: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
    assert_eq!(seen.len(), 16, "planning loop failed to cover the maze");

    // Paired-seed comparison: planning coverage is at least random
    // coverage on the same environment.
    let maze2 = MultiMaze::build(MazeSpec::open(4, 4, 0, 31)).unwrap();
    let mut env2 = MazeSession::new(maze2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let random_buffer = collect_random(&mut env2, 2500, cfg.k_max, &mut rng);
    let random_seen: std::collections::BTreeSet<u32> = random_buffer
        .ground_labels
        .as_ref()
        .unwrap()
        .iter()
        .copied()
        .collect();
    assert!(seen.len() >= random_seen.len());
}

#[test]
fn marked_actions_in_planning_are_uniform() {
    let maze = MultiMaze::build(MazeSpec::open(4, 4, 0, 33)).unwrap();
    let mut env = MazeSession::new(maze);
    let mut cfg = tiny_cfg();
    cfg.k_max = 6;
    cfg.n_codes = 24;
    cfg.bottleneck_dim = 8;
    cfg.planning_batch = 8;
    cfg.graph_rebuild_every = 500;
    let outcome = run_planning_acstate(&mut env, &cfg, 3000).unwrap();
    let buffer = &outcome.buffer;
    let n_actions = buffer.n_actions;
    let mut counts = vec![0u64; n_actions];
    for &t in &buffer.random_marks {
        counts[buffer.actions[t as usize] as usize] += 1;
    }
    let total: u64 = counts.iter().sum();
    assert!(total > 100, "too few marked steps ({total}) to test");
    let expect = total as f64 / n_actions as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expect;
            d * d / expect
        })
        .sum();
    // 99.9% quantile of chi-square with 3 degrees of freedom.
    assert!(chi2 < 16.3, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn planning_marks_have_valid_horizons() {
    let maze = MultiMaze::build(MazeSpec::open(3, 3, 1, 35)).unwrap();
    let mut env = MazeSession::new(maze);
    let mut cfg = tiny_cfg();
    cfg.k_max = 5;
    cfg.n_codes = 12;
    cfg.planning_batch = 4;
    let outcome = run_planning_acstate(&mut env, &cfg, 600).unwrap();
    outcome.buffer.validate();
    assert!(!outcome.buffer.random_marks.is_empty());
}
