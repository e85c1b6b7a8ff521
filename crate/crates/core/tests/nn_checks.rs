//! Numerical validation of the hand-derived gradients: finite differences
//! on a tiny dense case and on the full encoder stack, a hand-stepped
//! optimizer trace, and bit-exact checkpoint and determinism checks.

use cls_core::nn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_stack(seed: u64) -> EncoderStack {
    let cfg = StackConfig {
        obs_dim: 12,
        n_actions: 4,
        hidden_dim: 10,
        bottleneck_dim: 5,
        n_codes: 6,
        k_max: 3,
        k_embed_dim: 4,
        head_hidden: 8,
        beta: 1e-3,
        vq_weight: 1.0,
        commit_weight: 0.25,
    };
    EncoderStack::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sample() -> CheckSample {
    CheckSample {
        obs_t: vec![1, 7],
        obs_tk: vec![4, 9],
        k: 2,
        action: 3,
    }
}

#[test]
fn dense_layer_gradients_match_differences_on_quadratic() {
    // One identity dense layer with squared loss is quadratic in the
    // parameters, so central differences are exact up to round-off.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = DenseLayer::new(3, 2, Activation::Identity, &mut rng);
    let x = [0.3, -0.7, 1.2];
    let target = [0.5, -0.1];
    let loss = |layer: &DenseLayer| -> f64 {
        let y = layer.forward(&x);
        y.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let y = layer.forward(&x);
    let dy: Vec<f64> = y.iter().zip(target.iter()).map(|(a, b)| 2.0 * (a - b)).collect();
    let mut grads = layer.zeros_like();
    layer.backward(&x, &y, &dy, &mut grads, false);

    let eps = 1e-5;
    for r in 0..2 {
        for c in 0..3 {
            let mut plus = layer.clone();
            plus.w.row_mut(r)[c] += eps;
            let mut minus = layer.clone();
            minus.w.row_mut(r)[c] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let an = grads.w.row(r)[c];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
            assert!(rel < 1e-8, "w[{r}][{c}]: fd={fd} an={an}");
        }
        let mut plus = layer.clone();
        plus.b[r] += eps;
        let mut minus = layer.clone();
        minus.b[r] -= eps;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let rel = (fd - grads.b[r]).abs() / (fd.abs() + grads.b[r].abs()).max(1e-8);
        assert!(rel < 1e-8);
    }
}

#[test]
fn full_stack_grad_check_passes() {
    let mut stack = small_stack(42);
    let rel = grad_check(&mut stack, &sample(), 1e-5, 120, 99).unwrap();
    assert!(rel < 1e-4, "max relative error {rel}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut stack = small_stack(43);
    let s = sample();
    let (_, mut analytic) = analytic_grads(&stack, &s).unwrap();
    // Corrupt one trunk bias gradient. Trunk biases sit right after the
    // trunk weight tensor in traversal order.
    let bias_idx = stack.trunk.layers[0].w.data.len();
    analytic[bias_idx] += 0.5;
    let fd = fd_grad(&mut stack, &s, bias_idx, 1e-5);
    let rel = (fd - analytic[bias_idx]).abs() / (fd.abs() + analytic[bias_idx].abs()).max(1e-8);
    assert!(rel > 1e-2, "corruption went unnoticed: rel={rel}");
}

#[test]
fn uniform_logits_give_log_n_actions_loss() {
    let mut stack = small_stack(44);
    // Zero the head so all logits are exactly zero.
    for layer in stack.head.layers.iter_mut() {
        layer.w.data.iter_mut().for_each(|w| *w = 0.0);
        layer.b.iter_mut().for_each(|b| *b = 0.0);
    }
    let s = sample();
    let mut grads = stack.zeros_like();
    let losses = stack
        .inverse_pair_step(
            PairSample {
                obs_t: &s.obs_t,
                obs_tk: &s.obs_tk,
                k: s.k,
                action: s.action,
            },
            None,
            BackpropMode::TRAIN,
            &mut grads,
        )
        .unwrap();
    assert!((losses.ce - (4.0f64).ln()).abs() < 1e-12);
}

#[test]
fn saturated_logits_drive_loss_to_zero() {
    let logits = [-1e3, -1e3, 1e3, -1e3];
    let ce = log_sum_exp(&logits) - logits[2];
    assert!(ce.abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_independent_log_sum_exp() {
    // Independent oracle: direct sum of exponentials at f64, valid for
    // moderate logits.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let action = rng.gen_range(0..5);
        let direct = logits.iter().map(|l| l.exp()).sum::<f64>().ln() - logits[action];
        let stable = log_sum_exp(&logits) - logits[action];
        assert!((direct - stable).abs() < 1e-10);
        assert!(stable >= -1e-12);
    }
}

#[test]
fn softmax_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let sum: f64 = softmax(&logits).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn kl_is_zero_for_standard_normal_and_positive_otherwise() {
    let mut stack = small_stack(45);
    // Zero the bottleneck heads: mean = 0, logvar = 0 everywhere.
    for layer in [&mut stack.mean_head, &mut stack.logvar_head] {
        layer.w.data.iter_mut().for_each(|w| *w = 0.0);
        layer.b.iter_mut().for_each(|b| *b = 0.0);
    }
    let enc = stack.encode(&[1, 7], None).unwrap();
    assert_eq!(enc.kl, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let stack = small_stack(rng.gen());
        let enc = stack.encode(&[2, 5], None).unwrap();
        assert!(enc.kl >= 0.0);
    }
}

#[test]
fn straight_through_identity_when_codebook_disabled() {
    let stack = small_stack(46);
    let enc = stack.encode(&[0, 11], None).unwrap();
    let emb = stack.embedding(&enc, BackpropMode::SURROGATE);
    assert_eq!(emb, enc.z.as_slice());
}

#[test]
fn encoding_a_codebook_vector_is_idempotent() {
    let mut stack = small_stack(47);
    // Plant the exact embedding of this observation as codebook row 3.
    let enc = stack.encode(&[5, 6], None).unwrap();
    stack.codebook.row_mut(3).copy_from_slice(&enc.z);
    let enc2 = stack.encode(&[5, 6], None).unwrap();
    assert_eq!(enc2.code, 3);
    assert_eq!(enc2.quantized, enc2.z);
    assert_eq!(enc2.vq_loss, 0.0);
    assert_eq!(enc2.commit_loss, 0.0);
}

#[test]
fn nearest_code_ties_break_to_lowest_index() {
    let mut stack = small_stack(48);
    let enc = stack.encode(&[5, 6], None).unwrap();
    // Two identical rows equidistant from z.
    let row = enc.z.clone();
    stack.codebook.row_mut(2).copy_from_slice(&row);
    stack.codebook.row_mut(4).copy_from_slice(&row);
    assert_eq!(stack.encode(&[5, 6], None).unwrap().code, 2);
}

#[test]
fn eval_encode_is_bit_deterministic() {
    let stack = small_stack(49);
    let a = stack.encode(&[3, 8], None).unwrap();
    let b = stack.encode(&[3, 8], None).unwrap();
    assert_eq!(a.z, b.z);
    assert_eq!(a.code, b.code);
    assert_eq!(a.kl, b.kl);
}

#[test]
fn train_encode_replays_with_equal_rng() {
    let stack = small_stack(50);
    let mut r1 = ChaCha8Rng::seed_from_u64(123);
    let mut r2 = ChaCha8Rng::seed_from_u64(123);
    let a = stack.encode(&[3, 8], Some(&mut r1)).unwrap();
    let b = stack.encode(&[3, 8], Some(&mut r2)).unwrap();
    assert_eq!(a.z, b.z);
}

#[test]
fn adam_matches_hand_stepped_trace() {
    // Single scalar parameter, quadratic loss 0.5 * x^2, gradient x.
    let mut x = vec![0.7f64];
    let mut adam = Adam::new(0.1);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = 0.0f64;
    let mut v = 0.0f64;
    let mut x_ref = 0.7f64;
    for t in 1..=5 {
        let g = x[0];
        adam.update(
            vec![("x".to_string(), x.as_mut_slice())],
            vec![("x".to_string(), &[g])],
        )
        .unwrap();

        let g_ref = x_ref;
        m = b1 * m + (1.0 - b1) * g_ref;
        v = b2 * v + (1.0 - b2) * g_ref * g_ref;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        x_ref -= 0.1 * m_hat / (v_hat.sqrt() + eps);
        assert!((x[0] - x_ref).abs() < 1e-12, "step {t}: {} vs {x_ref}", x[0]);
    }
}

#[test]
fn adam_zero_gradients_leave_params_unchanged() {
    let mut params = vec![0.5, -0.25, 1.5];
    let before = params.clone();
    let mut adam = Adam::new(0.01);
    for _ in 0..3 {
        adam.update(
            vec![("p".to_string(), params.as_mut_slice())],
            vec![("p".to_string(), &[0.0, 0.0, 0.0])],
        )
        .unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn adam_zero_learning_rate_is_identity() {
    let mut params = vec![0.5, -0.25];
    let before = params.clone();
    let mut adam = Adam::new(0.0);
    adam.update(
        vec![("p".to_string(), params.as_mut_slice())],
        vec![("p".to_string(), &[1.0, -2.0])],
    )
    .unwrap();
    assert_eq!(params, before);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut params = vec![0.5];
    let mut adam = Adam::new(0.01);
    let err = adam
        .update(
            vec![("p".to_string(), params.as_mut_slice())],
            vec![("p".to_string(), &[f64::NAN])],
        )
        .unwrap_err();
    assert!(matches!(err, NnError::NonFiniteGrad { .. }));
}

#[test]
fn non_finite_activation_reports_layer() {
    let mut stack = small_stack(51);
    stack.trunk.layers[0].w.data[0] = f64::INFINITY;
    let err = stack.encode(&[0, 1], None).unwrap_err();
    match err {
        NnError::NonFinite { layer } => assert!(layer.starts_with("trunk")),
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stack.txt");
    let mut stack = small_stack(52);
    save_stack(&stack, &path).unwrap();
    let mut loaded = load_stack(&path).unwrap();
    assert_eq!(stack.cfg, loaded.cfg);
    let a = stack.tensors_mut();
    let b = loaded.tensors_mut();
    for ((name_a, t_a), (name_b, t_b)) in a.iter().zip(b.iter()) {
        assert_eq!(name_a, name_b);
        assert_eq!(t_a.len(), t_b.len());
        for (x, y) in t_a.iter().zip(t_b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "tensor {name_a}");
        }
    }
}

#[test]
fn checkpoint_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "not a checkpoint\n").unwrap();
    assert!(matches!(load_stack(&path), Err(NnError::BadCheckpoint(_))));
}
