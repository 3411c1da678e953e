mod common;

use approx::assert_abs_diff_eq;
use margo::losses::{compute_signals, stage1_loss, stage2_loss, stage2_loss_with_signals, LossConfig};
use margo::model::{score_triplet, Stage};
use margo::optim::{finite_diff_check, finite_diff_report};
use margo::{backward, AdamState, MargoError, ModelParams, SignalGradient};

fn cfg() -> LossConfig {
    LossConfig { alpha: 0.5, beta: 0.05, tau: 1.5, normalize_joint_weights: false }
}

#[test]
fn both_stages_match_central_differences() {
    for seed in 0..3 {
        let inst = common::instance(seed, 5, 8, 4, &[3, 2], 12);
        let (p, f, b) = (&inst.params, &inst.features, &inst.batch);
        let c = cfg();
        let (l1, g1) = backward(b, p, f, Stage::One, &c, SignalGradient::Stopped).unwrap();
        assert_abs_diff_eq!(l1.total, stage1_loss(b, p, f, c.beta).unwrap().total, epsilon = 1e-12);
        let err = finite_diff_check(|q| Ok(stage1_loss(b, q, f, c.beta)?.total), &g1, p, 1e-5, 200, seed).unwrap();
        assert!(err < 1e-4, "stage I seed {seed}: {err}");

        let (l2, g2) = backward(b, p, f, Stage::Two, &c, SignalGradient::Stopped).unwrap();
        assert_abs_diff_eq!(l2.total, stage2_loss(b, p, f, &c).unwrap().total, epsilon = 1e-12);
        let frozen = compute_signals(b, p, f, c.tau).unwrap();
        let err = finite_diff_check(
            |q| Ok(stage2_loss_with_signals(b, q, f, &frozen, &c)?.total),
            &g2,
            p,
            1e-5,
            200,
            seed,
        )
        .unwrap();
        assert!(err < 1e-4, "stage II seed {seed}: {err}");
    }
}

#[test]
fn normalized_joint_weights_have_the_same_gradient() {
    let inst = common::instance(7, 5, 8, 4, &[3, 2], 12);
    let (p, f, b) = (&inst.params, &inst.features, &inst.batch);
    let raw = cfg();
    let norm = LossConfig { normalize_joint_weights: true, ..raw };
    let (lr, gr) = backward(b, p, f, Stage::Two, &raw, SignalGradient::Stopped).unwrap();
    let (ln, gn) = backward(b, p, f, Stage::Two, &norm, SignalGradient::Stopped).unwrap();
    assert_eq!(gr, gn);
    assert!(ln.cal > lr.cal);
    let frozen = compute_signals(b, p, f, norm.tau).unwrap();
    let err = finite_diff_check(|q| Ok(stage2_loss_with_signals(b, q, f, &frozen, &norm)?.total), &gn, p, 1e-5, 200, 7)
        .unwrap();
    assert!(err < 1e-4);
}

#[test]
fn stop_gradient_matches_frozen_loss_not_unfrozen() {
    let inst = common::instance(11, 5, 8, 4, &[3, 2], 16);
    let (p, f, b) = (&inst.params, &inst.features, &inst.batch);
    let c = LossConfig { alpha: 2.0, ..cfg() };
    let (_, stopped) = backward(b, p, f, Stage::Two, &c, SignalGradient::Stopped).unwrap();
    let (_, propagated) = backward(b, p, f, Stage::Two, &c, SignalGradient::Propagated).unwrap();
    let frozen = compute_signals(b, p, f, c.tau).unwrap();
    let frozen_loss = |q: &ModelParams| Ok(stage2_loss_with_signals(b, q, f, &frozen, &c)?.total);
    let live_loss = |q: &ModelParams| Ok(stage2_loss(b, q, f, &c)?.total);

    let n = p.coordinate_count();
    assert!(finite_diff_check(frozen_loss, &stopped, p, 1e-5, n, 0).unwrap() < 1e-4);
    assert!(finite_diff_check(live_loss, &propagated, p, 1e-5, n, 0).unwrap() < 1e-4);
    // Each gradient disagrees with the other loss somewhere.
    assert!(finite_diff_check(live_loss, &stopped, p, 1e-5, n, 0).unwrap() > 1e-3);
    assert!(finite_diff_check(frozen_loss, &propagated, p, 1e-5, n, 0).unwrap() > 1e-3);
    assert!(stopped.max_abs_diff(&propagated) > 1e-8);
}

#[test]
fn moving_parameters_changes_the_signals() {
    // Moving the parameters changes z and γ; with signals frozen at the old
    // point, the frozen loss and the live loss differ only through them.
    let inst = common::instance(12, 5, 8, 4, &[3, 2], 16);
    let (p, f, b) = (&inst.params, &inst.features, &inst.batch);
    let c = LossConfig { alpha: 2.0, ..cfg() };
    let frozen = compute_signals(b, p, f, c.tau).unwrap();
    let mut q = p.clone();
    q.set_coordinate(3, q.coordinate(3) + 0.05);
    let live = stage2_loss(b, &q, f, &c).unwrap().total;
    let held = stage2_loss_with_signals(b, &q, f, &frozen, &c).unwrap().total;
    assert!((live - held).abs() > 1e-9);
    assert_eq!(
        stage2_loss(b, p, f, &c).unwrap().total,
        stage2_loss_with_signals(b, p, f, &frozen, &c).unwrap().total
    );
}

#[test]
fn zero_params_give_zero_user_gradient() {
    let inst = common::instance(2, 4, 6, 3, &[2, 2], 10);
    let zero = inst.params.zeros_like();
    let c = LossConfig { beta: 0.0, ..cfg() };
    for stage in [Stage::One, Stage::Two] {
        let (l, g) = backward(&inst.batch, &zero, &inst.features, stage, &c, SignalGradient::Stopped).unwrap();
        assert_abs_diff_eq!(l.rec, inst.batch.len() as f64 * 2f64.ln(), epsilon = 1e-12);
        for m in 0..2 {
            assert!(g.user_embeddings[m].as_slice().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn alpha_zero_logit_gradient_is_the_bpr_path() {
    let inst = common::instance(5, 4, 6, 3, &[2, 3], 10);
    let (p, f, b) = (&inst.params, &inst.features, &inst.batch);
    let c = LossConfig { alpha: 0.0, beta: 0.0, ..cfg() };
    let (_, g) = backward(b, p, f, Stage::Two, &c, SignalGradient::Propagated).unwrap();
    // −(1 − σ(margin)) · A composed with the softmax Jacobian, per item row.
    let mut oracle = vec![vec![0.0; 2]; 6];
    for t in b {
        let s = score_triplet(p, f, t, Stage::Two).unwrap();
        let slack = 1.0 - 1.0 / (1.0 + (-(s.pos - s.neg)).exp());
        for (item, w, y, sign) in [
            (t.pos_item, &s.pos_weights, &s.pos_modality, -1.0),
            (t.neg_item, &s.neg_weights, &s.neg_modality, 1.0),
        ] {
            let dw: Vec<f64> = y.iter().map(|v| sign * slack * v).collect();
            let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for m in 0..2 {
                oracle[item][m] += w[m] * (dw[m] - mean);
            }
        }
    }
    for i in 0..6 {
        for m in 0..2 {
            assert_abs_diff_eq!(g.weight_logits.get(i, m), oracle[i][m], epsilon = 1e-12);
        }
    }
}

#[test]
fn stage_one_leaves_logits_alone() {
    let inst = common::instance(6, 4, 6, 3, &[2, 2], 10);
    let (_, g) = backward(&inst.batch, &inst.params, &inst.features, Stage::One, &cfg(), SignalGradient::Stopped)
        .unwrap();
    assert!(g.weight_logits.as_slice().iter().all(|&v| v == 0.0));
    let mut p = inst.params.clone();
    let mut adam = AdamState::new(&p);
    adam.step(&mut p, &g, 0.1);
    assert_eq!(p.weight_logits, inst.params.weight_logits);
}

#[test]
fn untouched_items_get_zero_gradient() {
    let inst = common::instance(8, 4, 12, 3, &[2, 2], 3);
    let c = LossConfig { beta: 0.0, ..cfg() };
    let (_, g) = backward(&inst.batch, &inst.params, &inst.features, Stage::Two, &c, SignalGradient::Stopped).unwrap();
    for i in 0..12 {
        if !inst.batch.iter().any(|t| t.pos_item == i || t.neg_item == i) {
            assert!(g.weight_logits.row(i).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn adam_first_step_and_determinism() {
    let inst = common::instance(9, 3, 5, 2, &[2, 2], 8);
    let mut g = inst.params.zeros_like();
    g.set_coordinate(0, 1.0);
    g.set_coordinate(5, -3.0);
    let mut p = inst.params.clone();
    let mut adam = AdamState::new(&p);
    adam.step(&mut p, &g, 1e-3);
    assert_abs_diff_eq!(inst.params.coordinate(0) - p.coordinate(0), 1e-3, epsilon = 1e-10);
    assert_abs_diff_eq!(p.coordinate(5) - inst.params.coordinate(5), 1e-3, epsilon = 1e-10);
    assert_eq!(p.coordinate(1), inst.params.coordinate(1));

    let run = || {
        let mut p = inst.params.clone();
        let mut adam = AdamState::new(&p);
        for _ in 0..5 {
            let (_, g) =
                backward(&inst.batch, &p, &inst.features, Stage::Two, &cfg(), SignalGradient::Stopped).unwrap();
            adam.step(&mut p, &g, 0.01);
        }
        p
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
}

#[test]
fn non_finite_loss_names_the_triplet() {
    let inst = common::instance(10, 3, 5, 2, &[2, 2], 4);
    let mut p = inst.params.clone();
    p.user_embeddings[0].set(inst.batch[0].user, 0, f64::NAN);
    match backward(&inst.batch, &p, &inst.features, Stage::One, &cfg(), SignalGradient::Stopped) {
        Err(MargoError::NonFiniteLoss { index, user, .. }) => {
            assert_eq!(index, 0);
            assert_eq!(user, inst.batch[0].user);
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn checker_rejects_bad_steps_and_reports_worst_coordinate() {
    let inst = common::instance(1, 3, 4, 2, &[2, 2], 4);
    let p = &inst.params;
    let loss = |q: &ModelParams| Ok(q.coordinate(2).powi(3));
    let mut g = p.zeros_like();
    g.set_coordinate(2, 3.0 * p.coordinate(2).powi(2) + 1.0);
    assert!(finite_diff_check(loss, &g, p, 0.0, 10, 0).is_err());
    let r = finite_diff_report(loss, &g, p, 1e-5, p.coordinate_count(), 0).unwrap();
    assert_eq!(r.worst_coordinate, 2);
    assert!(r.max_relative_error > 0.1);
}
