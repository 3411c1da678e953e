//! Synthetic multimodal datasets with planted latent preferences and a
//! controllable fraction of items whose features in one modality are
//! replaced by noise.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{InteractionDataset, ModalityFeatureTable};
use crate::error::{MargoError, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::seeded;

/// Standard deviation of the noise added to uncorrupted feature rows.
pub const CLEAN_FEATURE_NOISE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub user_count: usize,
    pub item_count: usize,
    pub latent_dim: usize,
    pub modality_dims: Vec<usize>,
    pub interactions_per_user: usize,
    pub corrupted_modality: usize,
    pub corruption_fraction: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            user_count: 300,
            item_count: 200,
            latent_dim: 8,
            modality_dims: vec![32, 32],
            interactions_per_user: 20,
            corrupted_modality: 1,
            corruption_fraction: 0.4,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MargoError::InvalidArgument(m));
        if self.user_count == 0 || self.item_count == 0 || self.latent_dim == 0 {
            return bad("user_count, item_count and latent_dim must be >= 1".into());
        }
        if self.modality_dims.len() < 2 {
            return bad("at least two modalities are required".into());
        }
        if self.modality_dims.contains(&0) {
            return bad("modality dims must be >= 1".into());
        }
        if self.interactions_per_user == 0 {
            return bad("interactions_per_user must be >= 1".into());
        }
        if self.interactions_per_user >= self.item_count {
            return bad(format!(
                "interactions_per_user ({}) must be below item_count ({})",
                self.interactions_per_user, self.item_count
            ));
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return bad("corruption_fraction must lie in [0, 1]".into());
        }
        if self.corrupted_modality >= self.modality_dims.len() {
            return bad("corrupted_modality out of range".into());
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Sorted indices of items whose corrupted modality is pure noise.
    pub corrupted_items: Vec<usize>,
    pub corrupted_modality: usize,
    pub user_factors: Matrix,
    pub item_factors: Matrix,
}

impl GroundTruth {
    /// Per-item 0/1 corruption flags.
    pub fn flags(&self, item_count: usize) -> Vec<bool> {
        let mut flags = vec![false; item_count];
        for &i in &self.corrupted_items {
            flags[i] = true;
        }
        flags
    }

    /// Writes `item<TAB>corrupted_flag` lines.
    pub fn write_tsv(&self, path: &Path, item_ids: &[String]) -> Result<()> {
        let flags = self.flags(item_ids.len());
        let mut out = String::new();
        for (id, flag) in item_ids.iter().zip(flags) {
            out.push_str(&format!("{id}\t{}\n", u8::from(flag)));
        }
        fs::write(path, out).map_err(|e| MargoError::io(path, e))
    }
}

/// Reads a `item<TAB>flag` ground-truth file into per-item flags for
/// `dataset`. Items missing from the file count as clean.
pub fn load_ground_truth(path: &Path, dataset: &InteractionDataset) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| MargoError::io(path, e))?;
    let mut flags = vec![false; dataset.item_count()];
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = || MargoError::Parse {
            path: path.to_owned(),
            line: lineno + 1,
            message: "expected `item<TAB>0|1`".into(),
        };
        let (item, flag) = line.split_once('\t').ok_or_else(parse_err)?;
        let flag = match flag.trim() {
            "0" => false,
            "1" => true,
            _ => return Err(parse_err()),
        };
        if let Some(idx) = dataset.item_index(item.trim()) {
            flags[idx] = flag;
        }
    }
    Ok(flags)
}

pub struct SyntheticData {
    pub dataset: InteractionDataset,
    pub features: Vec<ModalityFeatureTable>,
    pub ground_truth: GroundTruth,
}

/// Draws a synthetic dataset. Users pick `interactions_per_user` distinct
/// items from a softmax over latent dot products; each modality's feature
/// row is a fixed random linear expansion of the item latent plus small
/// noise, except corrupted rows which are replaced by independent noise.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let r = spec.latent_dim;
    let mut rng = seeded(spec.seed, 0x5e_17);
    let normal = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    };
    let user_factors = normal(spec.user_count, r, &mut rng);
    let item_factors = normal(spec.item_count, r, &mut rng);

    // Gumbel top-k draws k items without replacement from softmax(scores).
    let mut pairs = Vec::with_capacity(spec.user_count * spec.interactions_per_user);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(spec.item_count);
    for u in 0..spec.user_count {
        keyed.clear();
        for i in 0..spec.item_count {
            let score = dot(user_factors.row(u), item_factors.row(i));
            let uniform: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            keyed.push((score - (-uniform.ln()).ln(), i));
        }
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = keyed[..spec.interactions_per_user]
            .iter()
            .map(|&(_, i)| i)
            .collect();
        chosen.sort_unstable();
        pairs.extend(chosen.into_iter().map(|i| (u, i)));
    }

    let n_corrupt = (spec.corruption_fraction * spec.item_count as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.item_count).collect();
    order.shuffle(&mut rng);
    let corrupted: BTreeSet<usize> = order[..n_corrupt].iter().copied().collect();

    let clean_noise = Normal::new(0.0, CLEAN_FEATURE_NOISE).expect("valid std");
    let corrupt_noise = Normal::new(0.0, spec.noise_scale).expect("validated std");
    let mut features = Vec::with_capacity(spec.modality_dims.len());
    for (m, &dim) in spec.modality_dims.iter().enumerate() {
        let scale = 1.0 / (r as f64).sqrt();
        let expansion = Matrix::from_fn(dim, r, |_, _| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let mut table = Matrix::zeros(spec.item_count, dim);
        for i in 0..spec.item_count {
            let row = table.row_mut(i);
            if m == spec.corrupted_modality && corrupted.contains(&i) {
                for v in row.iter_mut() {
                    *v = corrupt_noise.sample(&mut rng);
                }
            } else {
                expansion.mul_vec_into(item_factors.row(i), row);
                for v in row.iter_mut() {
                    *v += clean_noise.sample(&mut rng);
                }
            }
        }
        features.push(ModalityFeatureTable::new(m, table)?);
    }

    let user_ids = (0..spec.user_count).map(|u| format!("u{u}")).collect();
    let item_ids = (0..spec.item_count).map(|i| format!("i{i}")).collect();
    let dataset = InteractionDataset::from_indexed(user_ids, item_ids, pairs)?;
    Ok(SyntheticData {
        dataset,
        features,
        ground_truth: GroundTruth {
            corrupted_items: corrupted.into_iter().collect(),
            corrupted_modality: spec.corrupted_modality,
            user_factors,
            item_factors,
        },
    })
}

impl SyntheticData {
    /// Writes `interactions.tsv`, `features_<m>.tsv` and `ground_truth.tsv`
    /// into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MargoError::io(dir, e))?;
        self.dataset.write_interactions(&dir.join("interactions.tsv"))?;
        for table in &self.features {
            table.write_tsv(
                &dir.join(format!("features_{}.tsv", table.modality_id)),
                self.dataset.item_ids(),
            )?;
        }
        self.ground_truth
            .write_tsv(&dir.join("ground_truth.tsv"), self.dataset.item_ids())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            user_count: 30,
            item_count: 40,
            modality_dims: vec![16, 12],
            interactions_per_user: 5,
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn no_corruption_means_empty_truth() {
        let spec = SyntheticSpec {
            corruption_fraction: 0.0,
            ..small()
        };
        assert!(generate(&spec).unwrap().ground_truth.corrupted_items.is_empty());
    }

    #[test]
    fn corrupted_count_is_rounded_fraction() {
        let data = generate(&SyntheticSpec {
            corruption_fraction: 0.33,
            ..small()
        })
        .unwrap();
        assert_eq!(data.ground_truth.corrupted_items.len(), 13);
    }

    #[test]
    fn interaction_counts_exact() {
        let spec = small();
        let data = generate(&spec).unwrap();
        assert_eq!(data.dataset.interactions().len(), 30 * 5);
        for u in 0..spec.user_count {
            assert_eq!(data.dataset.all_positives(u).len(), 5);
        }
        assert_eq!(data.features[0].dim(), 16);
        assert_eq!(data.features[1].item_count(), 40);
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SyntheticSpec { interactions_per_user: 40, ..small() },
            SyntheticSpec { corruption_fraction: 1.5, ..small() },
            SyntheticSpec { modality_dims: vec![4], ..small() },
            SyntheticSpec { corrupted_modality: 2, ..small() },
            SyntheticSpec { user_count: 0, ..small() },
            SyntheticSpec { noise_scale: 0.0, ..small() },
        ] {
            assert!(generate(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn seeded_generation_is_identical() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.features, b.features);
        assert_eq!(a.ground_truth, b.ground_truth);
        let c = generate(&SyntheticSpec { seed: 12, ..small() }).unwrap();
        assert_ne!(a.features, c.features);
    }
}
