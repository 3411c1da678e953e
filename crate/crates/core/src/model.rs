//! Trainable parameters, per-modality encoders and late-fusion scoring.

use std::fmt;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::data::{ModalityFeatureTable, Triplet};
use crate::error::{MargoError, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::seeded;

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const INIT_STD: f64 = 0.01;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MRGC";
const CHECKPOINT_VERSION: u32 = 1;

/// Training stage, which also selects the fusion rule: stage I sums the
/// modality ratings, stage II mixes them with the per-item softmax weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    One,
    Two,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::One => "I",
            Stage::Two => "II",
        })
    }
}

/// All trainables. The same shape doubles as a gradient container and as
/// optimizer moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed_dim: usize,
    /// Per modality, `user_count x d`.
    pub user_embeddings: Vec<Matrix>,
    /// Per modality, `d x d_m`.
    pub item_projections: Vec<Matrix>,
    /// Per modality, length `d`.
    pub item_biases: Vec<Vec<f64>>,
    /// `item_count x M`; softmax of a row gives that item's modality weights.
    pub weight_logits: Matrix,
}

pub type Gradients = ModelParams;

/// Whether a flat parameter block belongs to the backbone or is a weight
/// logit block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Backbone,
    WeightLogits,
}

impl ModelParams {
    pub fn modality_count(&self) -> usize {
        self.user_embeddings.len()
    }

    pub fn user_count(&self) -> usize {
        self.user_embeddings[0].rows()
    }

    pub fn item_count(&self) -> usize {
        self.weight_logits.rows()
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        self.item_projections.iter().map(Matrix::cols).collect()
    }

    /// Zero-filled container with the same shapes.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embed_dim: self.embed_dim,
            user_embeddings: self
                .user_embeddings
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
            item_projections: self
                .item_projections
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
            item_biases: self.item_biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            weight_logits: Matrix::zeros(self.weight_logits.rows(), self.weight_logits.cols()),
        }
    }

    /// Flat views of every block in checkpoint order: for each modality the
    /// user embeddings, projection and bias, then the weight logits.
    pub fn blocks(&self) -> Vec<(BlockKind, &[f64])> {
        let mut out = Vec::with_capacity(3 * self.modality_count() + 1);
        for m in 0..self.modality_count() {
            out.push((BlockKind::Backbone, self.user_embeddings[m].as_slice()));
            out.push((BlockKind::Backbone, self.item_projections[m].as_slice()));
            out.push((BlockKind::Backbone, self.item_biases[m].as_slice()));
        }
        out.push((BlockKind::WeightLogits, self.weight_logits.as_slice()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(BlockKind, &mut [f64])> {
        let mut out = Vec::with_capacity(3 * self.modality_count() + 1);
        for ((u, p), b) in self
            .user_embeddings
            .iter_mut()
            .zip(self.item_projections.iter_mut())
            .zip(self.item_biases.iter_mut())
        {
            out.push((BlockKind::Backbone, u.as_mut_slice()));
            out.push((BlockKind::Backbone, p.as_mut_slice()));
            out.push((BlockKind::Backbone, b.as_mut_slice()));
        }
        out.push((BlockKind::WeightLogits, self.weight_logits.as_mut_slice()));
        out
    }

    pub fn coordinate_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Reads one coordinate in flat block order.
    pub fn coordinate(&self, mut idx: usize) -> f64 {
        for (_, b) in self.blocks() {
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("coordinate out of range");
    }

    pub fn set_coordinate(&mut self, mut idx: usize, value: f64) {
        for (_, b) in self.blocks_mut() {
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("coordinate out of range");
    }

    /// Global L2 norm over the backbone parameters (weight logits excluded).
    pub fn backbone_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .filter(|(k, _)| *k == BlockKind::Backbone)
            .flat_map(|(_, b)| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute coordinate difference to `other` (same shapes).
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Softmax weights of item `i`.
    pub fn modality_weights(&self, i: usize) -> Vec<f64> {
        softmax(self.weight_logits.row(i))
    }

    fn check_features(&self, features: &[ModalityFeatureTable]) -> Result<()> {
        if features.len() != self.modality_count() {
            return Err(MargoError::Dimension(format!(
                "{} feature tables for {} modalities",
                features.len(),
                self.modality_count()
            )));
        }
        for (m, (t, p)) in features.iter().zip(&self.item_projections).enumerate() {
            if t.dim() != p.cols() || t.item_count() != self.item_count() {
                return Err(MargoError::Dimension(format!(
                    "modality {m}: features are {}x{}, model expects {}x{}",
                    t.item_count(),
                    t.dim(),
                    self.item_count(),
                    p.cols()
                )));
            }
        }
        Ok(())
    }

    /// Serializes to the `MRGC` checkpoint layout: magic, u32 version,
    /// u32 user_count, item_count, M, d, then M u32 feature dims, then all
    /// blocks in [`blocks`](Self::blocks) order as row-major LE f64.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            self.user_count() as u32,
            self.item_count() as u32,
            self.modality_count() as u32,
            self.embed_dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for d in self.modality_dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (_, block) in self.blocks() {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(MargoError::Format("checkpoint truncated".into()));
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(MargoError::Format("missing MRGC header".into()));
        }
        let mut u32s = |n: usize| -> Result<Vec<usize>> {
            (0..n)
                .map(|_| Ok(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize))
                .collect()
        };
        let head = u32s(5)?;
        if head[0] != CHECKPOINT_VERSION as usize {
            return Err(MargoError::Format(format!(
                "unsupported checkpoint version {}",
                head[0]
            )));
        }
        let (users, items, modalities, d) = (head[1], head[2], head[3], head[4]);
        let dims = u32s(modalities)?;
        let mut params = ModelParams {
            embed_dim: d,
            user_embeddings: (0..modalities).map(|_| Matrix::zeros(users, d)).collect(),
            item_projections: dims.iter().map(|&dm| Matrix::zeros(d, dm)).collect(),
            item_biases: (0..modalities).map(|_| vec![0.0; d]).collect(),
            weight_logits: Matrix::zeros(items, modalities),
        };
        for (_, block) in params.blocks_mut() {
            for v in block.iter_mut() {
                *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
            }
        }
        if !consumed_exactly(bytes, &params) {
            return Err(MargoError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| MargoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MargoError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// SHA-256 of the checkpoint encoding, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_checkpoint_bytes()))
    }
}

fn consumed_exactly(bytes: &[u8], params: &ModelParams) -> bool {
    let header = 4 + 4 * (5 + params.modality_count());
    bytes.len() == header + 8 * params.coordinate_count()
}

/// Draws fresh parameters: embeddings and projections from N(0, 0.01²),
/// zero biases, and near-uniform weight logits from N(0, 0.01²).
pub fn init_params(
    user_count: usize,
    item_count: usize,
    embed_dim: usize,
    modality_dims: &[usize],
    seed: u64,
) -> Result<ModelParams> {
    if user_count == 0 || item_count == 0 || embed_dim == 0 || modality_dims.is_empty() {
        return Err(MargoError::InvalidArgument(
            "model dimensions must be positive".into(),
        ));
    }
    if modality_dims.contains(&0) {
        return Err(MargoError::InvalidArgument("zero feature dim".into()));
    }
    let mut rng = seeded(seed, 0x1417);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut draw = |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
    let user_embeddings = modality_dims
        .iter()
        .map(|_| draw(user_count, embed_dim))
        .collect();
    let item_projections = modality_dims
        .iter()
        .map(|&dm| draw(embed_dim, dm))
        .collect();
    let weight_logits = draw(item_count, modality_dims.len());
    Ok(ModelParams {
        embed_dim,
        user_embeddings,
        item_projections,
        item_biases: modality_dims.iter().map(|_| vec![0.0; embed_dim]).collect(),
        weight_logits,
    })
}

/// Produces the per-modality user and item embeddings.
///
/// Only [`LinearEncoder`] ships; gradient code in [`crate::optim`] is
/// derived for it.
pub trait Encoder {
    fn user_embedding<'p>(&self, params: &'p ModelParams, u: usize, m: usize) -> &'p [f64];

    fn item_embedding_into(
        &self,
        params: &ModelParams,
        features: &[ModalityFeatureTable],
        i: usize,
        m: usize,
        out: &mut [f64],
    );
}

/// `e_u = U_m[u]`, `e_i = P_m f_i + b_m`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearEncoder;

impl Encoder for LinearEncoder {
    #[inline]
    fn user_embedding<'p>(&self, params: &'p ModelParams, u: usize, m: usize) -> &'p [f64] {
        params.user_embeddings[m].row(u)
    }

    fn item_embedding_into(
        &self,
        params: &ModelParams,
        features: &[ModalityFeatureTable],
        i: usize,
        m: usize,
        out: &mut [f64],
    ) {
        params.item_projections[m].mul_vec_into(features[m].row(i), out);
        for (o, b) in out.iter_mut().zip(&params.item_biases[m]) {
            *o += b;
        }
    }
}

/// Embedding pair of user `u` and item `i` in modality `m`.
pub fn encode(
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    u: usize,
    i: usize,
    m: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if m >= params.modality_count() || u >= params.user_count() || i >= params.item_count() {
        return Err(MargoError::InvalidArgument(format!(
            "index out of range: user {u}, item {i}, modality {m}"
        )));
    }
    params.check_features(features)?;
    let enc = LinearEncoder;
    let mut item = vec![0.0; params.embed_dim];
    enc.item_embedding_into(params, features, i, m, &mut item);
    Ok((enc.user_embedding(params, u, m).to_vec(), item))
}

/// Dot-product rating of one modality.
pub fn modality_rating(user: &[f64], item: &[f64]) -> Result<f64> {
    if user.len() != item.len() {
        return Err(MargoError::Dimension(format!(
            "embedding lengths {} and {}",
            user.len(),
            item.len()
        )));
    }
    Ok(dot(user, item))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn fuse_weighted(weights: &[f64], ratings: &[f64]) -> Result<f64> {
    if weights.len() != ratings.len() {
        return Err(MargoError::Dimension(format!(
            "{} weights for {} ratings",
            weights.len(),
            ratings.len()
        )));
    }
    Ok(dot(weights, ratings))
}

/// Stage-I fusion: the plain sum of modality ratings.
pub fn fuse_uniform(ratings: &[f64]) -> f64 {
    ratings.iter().sum()
}

/// Item embeddings of every item in every modality, computed once per
/// parameter state.
#[derive(Debug, Clone)]
pub struct ItemEmbeddings {
    per_modality: Vec<Matrix>,
}

impl ItemEmbeddings {
    pub fn compute(params: &ModelParams, features: &[ModalityFeatureTable]) -> Result<Self> {
        params.check_features(features)?;
        let enc = LinearEncoder;
        let per_modality = (0..params.modality_count())
            .map(|m| {
                let mut mat = Matrix::zeros(params.item_count(), params.embed_dim);
                for i in 0..params.item_count() {
                    enc.item_embedding_into(params, features, i, m, mat.row_mut(i));
                }
                mat
            })
            .collect();
        Ok(ItemEmbeddings { per_modality })
    }

    #[inline]
    pub fn get(&self, i: usize, m: usize) -> &[f64] {
        self.per_modality[m].row(i)
    }
}

/// Per-modality and fused ratings of a triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletScores {
    pub pos_modality: Vec<f64>,
    pub neg_modality: Vec<f64>,
    /// Fusion coefficients actually applied (all ones in stage I).
    pub pos_weights: Vec<f64>,
    pub neg_weights: Vec<f64>,
    pub pos: f64,
    pub neg: f64,
}

impl TripletScores {
    pub fn margin(&self) -> f64 {
        self.pos - self.neg
    }
}

/// Scores a triplet against precomputed item embeddings.
pub fn score_triplet_cached(
    params: &ModelParams,
    items: &ItemEmbeddings,
    t: &Triplet,
    stage: Stage,
) -> TripletScores {
    let enc = LinearEncoder;
    let mc = params.modality_count();
    let mut pos_modality = Vec::with_capacity(mc);
    let mut neg_modality = Vec::with_capacity(mc);
    for m in 0..mc {
        let eu = enc.user_embedding(params, t.user, m);
        pos_modality.push(dot(eu, items.get(t.pos_item, m)));
        neg_modality.push(dot(eu, items.get(t.neg_item, m)));
    }
    let (pos_weights, neg_weights) = match stage {
        Stage::One => (vec![1.0; mc], vec![1.0; mc]),
        Stage::Two => (
            params.modality_weights(t.pos_item),
            params.modality_weights(t.neg_item),
        ),
    };
    let pos = match stage {
        Stage::One => fuse_uniform(&pos_modality),
        Stage::Two => dot(&pos_weights, &pos_modality),
    };
    let neg = match stage {
        Stage::One => fuse_uniform(&neg_modality),
        Stage::Two => dot(&neg_weights, &neg_modality),
    };
    TripletScores {
        pos_modality,
        neg_modality,
        pos_weights,
        neg_weights,
        pos,
        neg,
    }
}

pub fn score_triplet(
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    t: &Triplet,
    stage: Stage,
) -> Result<TripletScores> {
    let n = params.item_count();
    if t.user >= params.user_count() || t.pos_item >= n || t.neg_item >= n {
        return Err(MargoError::InvalidArgument(format!("triplet {t:?} out of range")));
    }
    let items = ItemEmbeddings::compute(params, features)?;
    Ok(score_triplet_cached(params, &items, t, stage))
}

/// Read-only scorer over a fixed parameter state, shareable across threads.
pub struct Scorer<'a> {
    params: &'a ModelParams,
    items: ItemEmbeddings,
    weights: Matrix,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a ModelParams, features: &[ModalityFeatureTable]) -> Result<Self> {
        let items = ItemEmbeddings::compute(params, features)?;
        let mc = params.modality_count();
        let mut weights = Matrix::zeros(params.item_count(), mc);
        for i in 0..params.item_count() {
            weights.row_mut(i).copy_from_slice(&params.modality_weights(i));
        }
        Ok(Scorer {
            params,
            items,
            weights,
        })
    }

    /// Fused rating of user `u` for every item.
    pub fn scores_for_user(&self, u: usize, stage: Stage) -> Vec<f64> {
        let enc = LinearEncoder;
        let mc = self.params.modality_count();
        let users: Vec<&[f64]> = (0..mc)
            .map(|m| enc.user_embedding(self.params, u, m))
            .collect();
        (0..self.params.item_count())
            .map(|i| {
                let ratings = (0..mc).map(|m| dot(users[m], self.items.get(i, m)));
                match stage {
                    Stage::One => ratings.sum(),
                    Stage::Two => ratings
                        .zip(self.weights.row(i))
                        .map(|(r, w)| w * r)
                        .sum(),
                }
            })
            .collect()
    }
}

pub fn score_all_items(
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    u: usize,
    stage: Stage,
) -> Result<Vec<f64>> {
    if u >= params.user_count() {
        return Err(MargoError::InvalidArgument(format!("user {u} out of range")));
    }
    Ok(Scorer::new(params, features)?.scores_for_user(u, stage))
}
