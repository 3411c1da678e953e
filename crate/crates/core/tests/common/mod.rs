#![allow(dead_code)]

use margo::data::{Split, Triplet};
use margo::matrix::Matrix;
use margo::{init_params, InteractionDataset, ModalityFeatureTable, ModelParams};
use rand::Rng;

/// Small random model with dense, nonzero parameters and a triplet batch.
pub struct Instance {
    pub dataset: InteractionDataset,
    pub params: ModelParams,
    pub features: Vec<ModalityFeatureTable>,
    pub batch: Vec<Triplet>,
}

pub fn instance(seed: u64, users: usize, items: usize, d: usize, dims: &[usize], batch: usize) -> Instance {
    let mut rng = margo::seeded(seed, 0xc0de);
    let user_ids = (0..users).map(|u| format!("u{u}")).collect();
    let item_ids = (0..items).map(|i| format!("i{i}")).collect();
    let mut pairs = Vec::new();
    for u in 0..users {
        for _ in 0..(items / 3).max(1) {
            pairs.push((u, rng.gen_range(0..items)));
        }
    }
    let dataset = InteractionDataset::from_indexed(user_ids, item_ids, pairs).unwrap();
    let tags = vec![Split::Train; dataset.interactions().len()];
    let dataset = dataset.with_split_tags(tags).unwrap();

    let mut params = init_params(users, items, d, dims, seed).unwrap();
    for (_, block) in params.blocks_mut() {
        for v in block.iter_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    let features = dims
        .iter()
        .enumerate()
        .map(|(m, &dm)| {
            ModalityFeatureTable::new(m, Matrix::from_fn(items, dm, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
        })
        .collect();
    let batch = dataset.sample_triplets(batch, seed).unwrap();
    Instance { dataset, params, features, batch }
}

pub fn linf(a: &ModelParams, b: &ModelParams) -> f64 {
    a.max_abs_diff(b)
}
