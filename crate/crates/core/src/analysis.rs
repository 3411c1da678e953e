//! Diagnostics over trained models: weight histograms, the gradient
//! conflict probe, reliability recovery against planted corruption and
//! ablation tables.

use std::fmt::Write as _;

use crate::data::{ModalityFeatureTable, Triplet};
use crate::error::{MargoError, Result};
use crate::eval::EvalReport;
use crate::losses::{sigmoid, LossConfig, ReliabilitySignal};
use crate::matrix::Matrix;
use crate::model::{score_triplet_cached, ItemEmbeddings, ModelParams, Stage};
use crate::optim::add_softmax_backward;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bin_lo\tbin_hi\tcount\n");
        for (j, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{c}", self.edges[j], self.edges[j + 1]);
        }
        out
    }
}

/// Counts of items whose softmax weight for `modality` falls in each of
/// `bins` equal-width bins over [0, 1]. The last bin is closed.
pub fn weight_histogram(params: &ModelParams, modality: usize, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(MargoError::InvalidArgument("histogram needs at least 2 bins".into()));
    }
    if modality >= params.modality_count() {
        return Err(MargoError::InvalidArgument(format!("modality {modality} out of range")));
    }
    let mut counts = vec![0usize; bins];
    for i in 0..params.item_count() {
        let w = params.modality_weights(i)[modality];
        let b = ((w * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let edges = (0..=bins).map(|j| j as f64 / bins as f64).collect();
    Ok(Histogram { edges, counts })
}

/// Population standard deviation of the learned weights of `modality`.
pub fn weight_std(params: &ModelParams, modality: usize) -> f64 {
    let ws: Vec<f64> = (0..params.item_count())
        .map(|i| params.modality_weights(i)[modality])
        .collect();
    let mean = ws.iter().sum::<f64>() / ws.len() as f64;
    (ws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / ws.len() as f64).sqrt()
}

/// Long-format weight table (`item  modality  weight`) for plotting.
pub fn weights_long_tsv(params: &ModelParams, item_ids: &[String]) -> String {
    let mut out = String::from("item\tmodality\tweight\n");
    for (i, id) in item_ids.iter().enumerate().take(params.item_count()) {
        for (m, w) in params.modality_weights(i).iter().enumerate() {
            let _ = writeln!(out, "{id}\t{m}\t{w}");
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflictProbe {
    /// `<dL_rec/dW, dL_cal/dW>` with the weights themselves as variables.
    pub inner_product: f64,
    /// `inner_product < 0`.
    pub violation: bool,
    /// Every positive-item modality rating in the batch was `>= 0`.
    pub precondition_held: bool,
    /// Same inner product taken over the weight logits, counting both
    /// items of every triplet, as training differentiates.
    pub logit_inner_product: f64,
}

/// Gradients of the ranking and calibration losses with respect to the
/// modality weights, and their inner product.
///
/// The direct-weight view differentiates each triplet's losses with respect
/// to the positive item's weight row, holding the negative item's weights
/// fixed. Contributions are summed per item row. The logit view uses the
/// full training gradient of both items' logits.
pub fn conflict_probe(
    batch: &[Triplet],
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    cfg: &LossConfig,
) -> Result<ConflictProbe> {
    let items = ItemEmbeddings::compute(params, features)?;
    let mc = params.modality_count();
    let n = params.item_count();
    let mut rec_w = Matrix::zeros(n, mc);
    let mut cal_w = Matrix::zeros(n, mc);
    let mut rec_logit = Matrix::zeros(n, mc);
    let mut cal_logit = Matrix::zeros(n, mc);
    let mut precondition = true;

    let mut rec_pos = vec![0.0; mc];
    let mut rec_neg = vec![0.0; mc];
    let mut cal_pair = vec![0.0; mc];
    for t in batch {
        let s = score_triplet_cached(params, &items, t, Stage::Two);
        precondition &= s.pos_modality.iter().all(|&y| y >= 0.0);
        let signal = ReliabilitySignal::from_scores(&s, cfg.tau);
        let slack = 1.0 - sigmoid(s.margin());
        for m in 0..mc {
            rec_pos[m] = -slack * s.pos_modality[m];
            rec_neg[m] = slack * s.neg_modality[m];
            cal_pair[m] = -signal.confidence * signal.reliability[m]
                / (s.pos_weights[m] + s.neg_weights[m]);
        }
        for m in 0..mc {
            rec_w.row_mut(t.pos_item)[m] += rec_pos[m];
            cal_w.row_mut(t.pos_item)[m] += cal_pair[m];
        }
        add_softmax_backward(&s.pos_weights, &rec_pos, rec_logit.row_mut(t.pos_item));
        add_softmax_backward(&s.neg_weights, &rec_neg, rec_logit.row_mut(t.neg_item));
        add_softmax_backward(&s.pos_weights, &cal_pair, cal_logit.row_mut(t.pos_item));
        add_softmax_backward(&s.neg_weights, &cal_pair, cal_logit.row_mut(t.neg_item));
    }
    let inner = |a: &Matrix, b: &Matrix| -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    };
    let inner_product = inner(&rec_w, &cal_w);
    Ok(ConflictProbe {
        inner_product,
        violation: inner_product < 0.0,
        precondition_held: precondition,
        logit_inner_product: inner(&rec_logit, &cal_logit),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryScore {
    /// Mean weight of the corrupted modality over corrupted items.
    pub mean_w_corrupted: f64,
    /// Mean weight of the corrupted modality over clean items.
    pub mean_w_clean: f64,
    /// ROC AUC of `1 - weight` as a detector of corrupted items.
    pub auc: f64,
}

pub fn reliability_recovery_score(
    params: &ModelParams,
    corrupted: &[bool],
    corrupted_modality: usize,
) -> Result<RecoveryScore> {
    if corrupted.len() != params.item_count() {
        return Err(MargoError::Dimension(format!(
            "{} corruption flags for {} items",
            corrupted.len(),
            params.item_count()
        )));
    }
    if corrupted_modality >= params.modality_count() {
        return Err(MargoError::InvalidArgument("corrupted modality out of range".into()));
    }
    let weights: Vec<f64> = (0..params.item_count())
        .map(|i| params.modality_weights(i)[corrupted_modality])
        .collect();
    let mean_of = |flag: bool| {
        let sel: Vec<f64> = weights
            .iter()
            .zip(corrupted)
            .filter(|(_, &c)| c == flag)
            .map(|(w, _)| *w)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    let detector: Vec<f64> = weights.iter().map(|w| 1.0 - w).collect();
    Ok(RecoveryScore {
        mean_w_corrupted: mean_of(true),
        mean_w_clean: mean_of(false),
        auc: roc_auc(&detector, corrupted),
    })
}

/// Mann-Whitney AUC with ties counted as one half. 0.5 when a class is
/// empty.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut j = 0;
    while j < order.len() {
        let mut k = j;
        while k + 1 < order.len() && scores[order[k + 1]] == scores[order[j]] {
            k += 1;
        }
        let avg_rank = (j + k + 2) as f64 / 2.0;
        rank_sum_pos += order[j..=k].iter().filter(|&&i| labels[i]).count() as f64 * avg_rank;
        j = k + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub k_list: Vec<usize>,
    pub rows: Vec<(String, Vec<f64>, Vec<f64>)>,
    /// Relative improvement `(a - b) / b` of the first row over the best
    /// other row, per metric: recalls then NDCGs.
    pub improvement: Vec<f64>,
}

impl ComparisonTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant");
        for k in &self.k_list {
            let _ = write!(out, "\trecall@{k}");
        }
        for k in &self.k_list {
            let _ = write!(out, "\tndcg@{k}");
        }
        out.push('\n');
        for (name, recall, ndcg) in &self.rows {
            out.push_str(name);
            for v in recall.iter().chain(ndcg) {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out.push_str("improvement");
        for v in &self.improvement {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<14}", "variant");
        for k in &self.k_list {
            let _ = write!(out, "{:>11}", format!("R@{k}"));
        }
        for k in &self.k_list {
            let _ = write!(out, "{:>11}", format!("N@{k}"));
        }
        out.push('\n');
        for (name, recall, ndcg) in &self.rows {
            let _ = write!(out, "{name:<14}");
            for v in recall.iter().chain(ndcg) {
                let _ = write!(out, "{v:>11.4}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<14}", "impro.");
        for v in &self.improvement {
            let _ = write!(out, "{:>10.2}%", 100.0 * v);
        }
        out.push('\n');
        out
    }
}

/// Aligns reports by K. The first report is the reference for the
/// improvement row.
pub fn compare_variants(reports: &[(String, EvalReport)]) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(MargoError::InvalidArgument("need at least two reports".into()));
    }
    let k_list = reports[0].1.k_list.clone();
    if reports.iter().any(|(_, r)| r.k_list != k_list) {
        return Err(MargoError::InvalidArgument("reports use different K lists".into()));
    }
    let rows: Vec<(String, Vec<f64>, Vec<f64>)> = reports
        .iter()
        .map(|(name, r)| (name.clone(), r.recall.clone(), r.ndcg.clone()))
        .collect();
    let metric = |row: &(String, Vec<f64>, Vec<f64>), j: usize| {
        if j < k_list.len() {
            row.1[j]
        } else {
            row.2[j - k_list.len()]
        }
    };
    let improvement = (0..2 * k_list.len())
        .map(|j| {
            let reference = metric(&rows[0], j);
            let best_other = rows[1..]
                .iter()
                .map(|r| metric(r, j))
                .fold(f64::NEG_INFINITY, f64::max);
            (reference - best_other) / best_other
        })
        .collect();
    Ok(ComparisonTable {
        k_list,
        rows,
        improvement,
    })
}
