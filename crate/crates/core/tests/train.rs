use margo::model::Stage;
use margo::synth::{generate, SyntheticData, SyntheticSpec};
use margo::train::{train_stage1, train_stage2};
use margo::{init_params, run_variant, Hyperparams, LossConfig, SignalGradient, Variant};

fn data(seed: u64) -> SyntheticData {
    let spec = SyntheticSpec {
        user_count: 120,
        item_count: 80,
        modality_dims: vec![12, 12],
        interactions_per_user: 12,
        seed,
        ..SyntheticSpec::default()
    };
    let mut d = generate(&spec).unwrap();
    d.dataset = d.dataset.split((0.8, 0.1, 0.1), seed).unwrap();
    d
}

fn hp(seed: u64, epochs: usize) -> Hyperparams {
    Hyperparams {
        embed_dim: 6,
        lr: 0.005,
        batch_size: 256,
        max_epochs: epochs,
        patience: epochs,
        loss: LossConfig { alpha: 1.0, beta: 0.01, tau: 1.0, normalize_joint_weights: false },
        seed,
        ..Hyperparams::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn training_loss_decreases() {
    let drops: Vec<f64> = [1, 2, 3]
        .iter()
        .map(|&s| {
            let d = data(s);
            let out = run_variant(Variant::NoWeight, &hp(s, 15), &d.dataset, &d.features).unwrap();
            let first = out.log.records.first().unwrap().rec_loss;
            let last = out.log.records.last().unwrap().rec_loss;
            first - last
        })
        .collect();
    assert!(median(drops) > 0.0);
}

#[test]
fn zero_patience_stops_after_one_epoch() {
    let d = data(4);
    let h = Hyperparams { patience: 0, ..hp(4, 30) };
    let out = run_variant(Variant::Full, &h, &d.dataset, &d.features).unwrap();
    assert_eq!(out.log.stage_records(Stage::One).count(), 1);
    assert_eq!(out.log.stage_records(Stage::Two).count(), 1);
    let epochs: Vec<usize> = out.log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2]);
}

#[test]
fn fixed_seed_reproduces_log_and_checkpoint() {
    let d = data(5);
    let a = run_variant(Variant::Full, &hp(5, 6), &d.dataset, &d.features).unwrap();
    let b = run_variant(Variant::Full, &hp(5, 6), &d.dataset, &d.features).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.to_tsv(), b.log.to_tsv());
    assert_eq!(a.params.to_checkpoint_bytes(), b.params.to_checkpoint_bytes());
    let c = run_variant(Variant::Full, &hp(6, 6), &d.dataset, &d.features).unwrap();
    assert_ne!(a.params.fingerprint(), c.params.fingerprint());
}

#[test]
fn alpha_zero_still_moves_the_logits() {
    let d = data(7);
    let mut h = hp(7, 4);
    h.loss.alpha = 0.0;
    let dims: Vec<usize> = d.features.iter().map(|f| f.dim()).collect();
    let init = init_params(d.dataset.user_count(), d.dataset.item_count(), 6, &dims, 7).unwrap();
    let (after, _) = train_stage2(init.clone(), &h, &d.dataset, &d.features, SignalGradient::Stopped, 0).unwrap();
    assert_ne!(after.weight_logits, init.weight_logits);
}

#[test]
fn stage_one_keeps_logits_fixed() {
    let d = data(8);
    let dims: Vec<usize> = d.features.iter().map(|f| f.dim()).collect();
    let init = init_params(d.dataset.user_count(), d.dataset.item_count(), 6, &dims, 8).unwrap();
    let (after, log) = train_stage1(init.clone(), &hp(8, 3), &d.dataset, &d.features).unwrap();
    assert_eq!(after.weight_logits, init.weight_logits);
    assert!(log.records.iter().all(|r| r.cal_loss == 0.0 && r.mean_confidence == 0.0));
}

#[test]
fn confidence_rises_during_stage_two() {
    let gains: Vec<f64> = [1, 2, 3]
        .iter()
        .map(|&s| {
            let d = data(s);
            let out = run_variant(Variant::NoTwoStage, &hp(s, 15), &d.dataset, &d.features).unwrap();
            let recs: Vec<_> = out.log.stage_records(Stage::Two).collect();
            recs.last().unwrap().mean_confidence - recs[0].mean_confidence
        })
        .collect();
    assert!(median(gains) > 0.0);
}

#[test]
fn no_weight_logs_only_stage_one() {
    let d = data(9);
    let out = run_variant(Variant::NoWeight, &hp(9, 4), &d.dataset, &d.features).unwrap();
    assert!(!out.log.records.is_empty());
    assert!(out.log.records.iter().all(|r| r.stage == Stage::One));
    assert_eq!(out.eval_stage(), Stage::One);
    assert_eq!(out.stage2_start_fingerprint, None);
}

#[test]
fn no_cal_is_full_with_alpha_zero() {
    let d = data(10);
    let no_cal = run_variant(Variant::NoCal, &hp(10, 4), &d.dataset, &d.features).unwrap();
    let mut h = hp(10, 4);
    h.loss.alpha = 0.0;
    let full = run_variant(Variant::Full, &h, &d.dataset, &d.features).unwrap();
    assert_eq!(no_cal.log, full.log);
    assert_eq!(no_cal.params, full.params);
}

#[test]
fn stage_two_starts_from_best_stage_one() {
    let d = data(11);
    let out = run_variant(Variant::Full, &hp(11, 5), &d.dataset, &d.features).unwrap();
    let s1 = out.stage1_params.as_ref().unwrap();
    assert_eq!(out.stage2_start_fingerprint.as_deref(), Some(s1.fingerprint().as_str()));

    // Stage I on its own selects the same parameters.
    let dims: Vec<usize> = d.features.iter().map(|f| f.dim()).collect();
    let init = init_params(d.dataset.user_count(), d.dataset.item_count(), 6, &dims, 11).unwrap();
    let (best, log) = train_stage1(init, &hp(11, 5), &d.dataset, &d.features).unwrap();
    assert_eq!(&best, s1);
    let n1 = log.records.len();
    let two: Vec<_> = out.log.stage_records(Stage::Two).collect();
    assert_eq!(two[0].epoch, n1 + 1);
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    let d = data(12);
    for h in [
        Hyperparams { lr: 0.0, ..hp(0, 2) },
        Hyperparams { batch_size: 0, ..hp(0, 2) },
        Hyperparams { loss: LossConfig { tau: 0.0, ..LossConfig::default() }, ..hp(0, 2) },
    ] {
        assert!(run_variant(Variant::Full, &h, &d.dataset, &d.features).is_err());
    }
}
