//! Full-catalog top-K evaluation with Recall@K and NDCG@K.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{InteractionDataset, ModalityFeatureTable, Split};
use crate::error::{MargoError, Result};
use crate::model::{ModelParams, Scorer, Stage};

pub const DEFAULT_K_LIST: [usize; 2] = [10, 20];

/// Items sorted by score descending, ties by ascending index, with
/// `exclude` (sorted) removed. Only the first `limit` are kept.
pub fn rank_scores(scores: &[f64], exclude: &[usize], limit: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
    };
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    if limit > 0 && candidates.len() > limit {
        candidates.select_nth_unstable_by(limit - 1, cmp);
        candidates.truncate(limit);
    }
    candidates.sort_unstable_by(cmp);
    candidates
}

/// Full ranking of every non-excluded item for user `u`.
pub fn rank_items(
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    u: usize,
    stage: Stage,
    exclude: &[usize],
) -> Result<Vec<usize>> {
    let scores = crate::model::score_all_items(params, features, u, stage)?;
    let mut exclude = exclude.to_vec();
    exclude.sort_unstable();
    Ok(rank_scores(&scores, &exclude, 0))
}

/// `|top-K ∩ relevant| / |relevant|`. `relevant` must be sorted.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.binary_search(i).is_ok())
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with a `1 / log2(rank + 1)` discount and the ideal
/// DCG truncated at `min(|relevant|, K)`. `relevant` must be sorted.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    dcg / ideal
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub k_list: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.k_list.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.k_list.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }

    /// `split  K  recall  ndcg  users` with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("split\tk\trecall\tndcg\tusers\n");
        for (j, k) in self.k_list.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{k}\t{}\t{}\t{}",
                self.split, self.recall[j], self.ndcg[j], self.users_evaluated
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} split, {} users\n{:>6}  {:>8}  {:>8}\n",
            self.split, self.users_evaluated, "K", "Recall", "NDCG"
        );
        for (j, k) in self.k_list.iter().enumerate() {
            let _ = writeln!(out, "{k:>6}  {:>8.4}  {:>8.4}", self.recall[j], self.ndcg[j]);
        }
        out
    }
}

/// Items excluded from ranking when evaluating `split`: train positives for
/// validation, train and validation positives for test.
pub fn exclusions(dataset: &InteractionDataset, u: usize, split: Split) -> Vec<usize> {
    let mut ex = dataset.positives(u, Split::Train).to_vec();
    if split == Split::Test {
        ex.extend_from_slice(dataset.positives(u, Split::Val));
        ex.sort_unstable();
    }
    ex
}

/// Mean Recall@K and NDCG@K over users with at least one relevant item in
/// `split`. Users are scored in parallel; the reduction runs in user order
/// so the result does not depend on the thread count.
pub fn evaluate(
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    dataset: &InteractionDataset,
    split: Split,
    k_list: &[usize],
    stage: Stage,
) -> Result<EvalReport> {
    if split == Split::Train {
        return Err(MargoError::InvalidArgument(
            "evaluation split must be val or test".into(),
        ));
    }
    if !dataset.is_split() {
        return Err(MargoError::InvalidArgument("dataset is not split".into()));
    }
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(MargoError::InvalidArgument("K list must hold positive cutoffs".into()));
    }
    let mut k_list = k_list.to_vec();
    k_list.sort_unstable();
    k_list.dedup();
    let k_max = *k_list.last().unwrap();
    let scorer = Scorer::new(params, features)?;

    let per_user: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..dataset.user_count())
        .into_par_iter()
        .map(|u| {
            let relevant = dataset.positives(u, split);
            if relevant.is_empty() {
                return None;
            }
            let scores = scorer.scores_for_user(u, stage);
            let ranked = rank_scores(&scores, &exclusions(dataset, u, split), k_max);
            Some((
                k_list.iter().map(|&k| recall_at_k(&ranked, relevant, k)).collect(),
                k_list.iter().map(|&k| ndcg_at_k(&ranked, relevant, k)).collect(),
            ))
        })
        .collect();

    let mut recall = vec![0.0; k_list.len()];
    let mut ndcg = vec![0.0; k_list.len()];
    let mut users = 0usize;
    for (r, n) in per_user.into_iter().flatten() {
        users += 1;
        for j in 0..k_list.len() {
            recall[j] += r[j];
            ndcg[j] += n[j];
        }
    }
    if users > 0 {
        for j in 0..k_list.len() {
            recall[j] /= users as f64;
            ndcg[j] /= users as f64;
        }
    }
    Ok(EvalReport {
        split,
        k_list,
        recall,
        ndcg,
        users_evaluated: users,
    })
}
