use approx::assert_abs_diff_eq;
use margo::data::Triplet;
use margo::matrix::Matrix;
use margo::model::{
    encode, fuse_uniform, fuse_weighted, modality_rating, score_all_items, score_triplet, softmax,
};
use margo::{init_params, ModalityFeatureTable, ModelParams, Stage};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn random_instance(seed: u64, users: usize, items: usize, d: usize, dims: &[usize]) -> (ModelParams, Vec<ModalityFeatureTable>) {
    let mut rng = margo::seeded(seed, 99);
    let mut p = init_params(users, items, d, dims, seed).unwrap();
    for (_, block) in p.blocks_mut() {
        for v in block.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let features = dims
        .iter()
        .enumerate()
        .map(|(m, &dm)| {
            ModalityFeatureTable::new(m, Matrix::from_fn(items, dm, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
        })
        .collect();
    (p, features)
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

#[test]
fn encoder_matches_matrix_vector_oracle() {
    let (p, f) = random_instance(1, 4, 6, 5, &[7, 3]);
    for m in 0..2 {
        let proj = to_na(&p.item_projections[m]);
        for i in 0..6 {
            let (eu, ei) = encode(&p, &f, 2, i, m).unwrap();
            let oracle = &proj * DVector::from_row_slice(f[m].row(i)) + DVector::from_row_slice(&p.item_biases[m]);
            for j in 0..5 {
                assert_abs_diff_eq!(ei[j], oracle[j], epsilon = 1e-12);
            }
            assert_eq!(eu, p.user_embeddings[m].row(2));
        }
    }
}

#[test]
fn identity_and_bias_only_projections() {
    let (mut p, _) = random_instance(2, 1, 1, 3, &[3, 3]);
    p.item_projections[0] = Matrix::identity(3);
    p.item_biases[0] = vec![0.0; 3];
    p.item_projections[1] = Matrix::zeros(3, 3);
    p.item_biases[1] = vec![2.5; 3];
    let f = vec![
        ModalityFeatureTable::new(0, Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0])).unwrap(),
        ModalityFeatureTable::new(1, Matrix::from_vec(1, 3, vec![4.0, 5.0, 6.0])).unwrap(),
    ];
    assert_eq!(encode(&p, &f, 0, 0, 0).unwrap().1, vec![1.0, 0.0, 0.0]);
    assert_eq!(encode(&p, &f, 0, 0, 1).unwrap().1, vec![2.5; 3]);
    assert!(encode(&p, &f, 1, 0, 0).is_err());
    assert!(encode(&p, &f, 0, 0, 2).is_err());
}

#[test]
fn triple_loop_oracle_for_all_scores() {
    let (p, f) = random_instance(3, 5, 9, 4, &[6, 2, 3]);
    for stage in [Stage::One, Stage::Two] {
        for u in 0..5 {
            let scores = score_all_items(&p, &f, u, stage).unwrap();
            for i in 0..9 {
                let w = softmax(p.weight_logits.row(i));
                let mut fused = 0.0;
                for m in 0..3 {
                    let mut y = 0.0;
                    for j in 0..4 {
                        let mut e = p.item_biases[m][j];
                        for k in 0..f[m].dim() {
                            e += p.item_projections[m].get(j, k) * f[m].row(i)[k];
                        }
                        y += p.user_embeddings[m].get(u, j) * e;
                    }
                    fused += if stage == Stage::One { y } else { w[m] * y };
                }
                assert_abs_diff_eq!(scores[i], fused, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn score_all_items_agrees_with_triplet_scoring() {
    let (p, f) = random_instance(4, 3, 40, 6, &[5, 5]);
    let mut rng = margo::seeded(4, 1);
    for stage in [Stage::One, Stage::Two] {
        let all = score_all_items(&p, &f, 1, stage).unwrap();
        for _ in 0..20 {
            let i = rng.gen_range(0..40);
            let t = Triplet { user: 1, pos_item: i, neg_item: (i + 1) % 40 };
            let s = score_triplet(&p, &f, &t, stage).unwrap();
            assert_abs_diff_eq!(all[i], s.pos, epsilon = 1e-12);
            assert_abs_diff_eq!(all[(i + 1) % 40], s.neg, epsilon = 1e-12);
        }
    }
}

#[test]
fn single_item_catalog() {
    let (p, f) = random_instance(5, 2, 1, 3, &[2, 2]);
    assert_eq!(score_all_items(&p, &f, 0, Stage::Two).unwrap().len(), 1);
}

#[test]
fn permuting_items_permutes_scores() {
    let (p, f) = random_instance(6, 2, 7, 3, &[4, 2]);
    let perm = [3usize, 6, 0, 2, 5, 1, 4];
    let mut q = p.clone();
    for (new, &old) in perm.iter().enumerate() {
        q.weight_logits.row_mut(new).copy_from_slice(p.weight_logits.row(old));
    }
    let g: Vec<ModalityFeatureTable> = f
        .iter()
        .map(|t| {
            ModalityFeatureTable::new(t.modality_id, Matrix::from_fn(7, t.dim(), |r, c| t.row(perm[r])[c])).unwrap()
        })
        .collect();
    for stage in [Stage::One, Stage::Two] {
        let a = score_all_items(&p, &f, 1, stage).unwrap();
        let b = score_all_items(&q, &g, 1, stage).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b[new], a[old]);
        }
    }
}

#[test]
fn uniform_weights_give_stage_one_over_m() {
    let (mut p, f) = random_instance(7, 3, 5, 4, &[3, 3, 3]);
    for i in 0..5 {
        p.weight_logits.row_mut(i).fill(0.37);
    }
    let t = Triplet { user: 2, pos_item: 1, neg_item: 4 };
    let one = score_triplet(&p, &f, &t, Stage::One).unwrap();
    let two = score_triplet(&p, &f, &t, Stage::Two).unwrap();
    assert_abs_diff_eq!(two.pos, one.pos / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(two.neg, one.neg / 3.0, epsilon = 1e-12);
    assert_eq!(one.pos, fuse_uniform(&one.pos_modality));
    assert_eq!(two.pos, fuse_weighted(&two.pos_weights, &two.pos_modality).unwrap());
    assert_eq!(score_triplet(&p, &f, &t, Stage::Two).unwrap(), two);
}

#[test]
fn init_is_near_uniform_and_seeded() {
    let p = init_params(10, 50, 64, &[8, 8], 3).unwrap();
    assert_eq!(p.embed_dim, 64);
    for i in 0..50 {
        for w in p.modality_weights(i) {
            assert!((w - 0.5).abs() < 0.02);
        }
    }
    assert!(p.item_biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    assert_eq!(p, init_params(10, 50, 64, &[8, 8], 3).unwrap());
    assert_ne!(p, init_params(10, 50, 64, &[8, 8], 4).unwrap());
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let (p, _) = random_instance(8, 4, 6, 3, &[5, 2]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    p.save(&path).unwrap();
    let q = ModelParams::load(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(p.fingerprint(), q.fingerprint());
    assert_eq!(std::fs::read(&path).unwrap(), q.to_checkpoint_bytes());
    assert!(ModelParams::load(&dir.path().join("none")).is_err());
}

#[test]
fn rating_examples() {
    assert_eq!(modality_rating(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert_eq!(modality_rating(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    assert!(modality_rating(&[1.0], &[1.0, 2.0]).is_err());
    assert_abs_diff_eq!(fuse_weighted(&[0.3, 0.7], &[2.0, 1.0]).unwrap(), 1.3, epsilon = 1e-12);
    assert_eq!(fuse_weighted(&[1.0, 0.0], &[5.0, 9.0]).unwrap(), 5.0);
    assert_eq!(fuse_uniform(&[1.0, 3.0]), 4.0);
    assert_eq!(fuse_uniform(&[2.5]), 2.5);
    let w = softmax(&[2f64.ln(), 0.0]);
    assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-12);
    let w = softmax(&[1000.0, 0.0]);
    assert_eq!(w[0], 1.0);
    assert!(w[1] >= 0.0 && w[1] < 1e-300);
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-50.0f64..50.0, 1..6),
        shift in -100.0f64..100.0,
    ) {
        let w = softmax(&logits);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in w.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn weighted_fusion_is_linear(
        logits in prop::collection::vec(-5.0f64..5.0, 3),
        ratings in prop::collection::vec(-10.0f64..10.0, 3),
        other in prop::collection::vec(-10.0f64..10.0, 3),
        a in -4.0f64..4.0,
    ) {
        let w = softmax(&logits);
        let scaled: Vec<f64> = ratings.iter().map(|r| a * r).collect();
        let sum: Vec<f64> = ratings.iter().zip(&other).map(|(x, y)| x + y).collect();
        let base = fuse_weighted(&w, &ratings).unwrap();
        prop_assert!((fuse_weighted(&w, &scaled).unwrap() - a * base).abs() < 1e-9);
        prop_assert!(
            (fuse_weighted(&w, &sum).unwrap() - base - fuse_weighted(&w, &other).unwrap()).abs() < 1e-9
        );
    }
}
