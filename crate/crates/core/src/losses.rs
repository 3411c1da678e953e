//! Ranking loss, reliability supervision signals and the weight-calibration
//! loss, plus the two stage objectives built from them.

use crate::data::{ModalityFeatureTable, Triplet};
use crate::error::{MargoError, Result};
use crate::model::{score_triplet_cached, ItemEmbeddings, ModelParams, Stage, TripletScores};

/// Value that negative rating differences are mapped to before the softmax.
pub fn negative_floor() -> f64 {
    -(6f64.exp())
}

/// Lower clamp for reliability masses inside logarithms.
pub const LOG_FLOOR: f64 = 1e-300;

/// Weights of the objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Use `(w_i + w_k) / 2` instead of the raw sum as the joint weight.
    pub normalize_joint_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            beta: 0.01,
            tau: 1.0,
            normalize_joint_weights: false,
        }
    }
}

/// `-ln σ(pos - neg)` in softplus form.
pub fn bpr_loss(pos: f64, neg: f64) -> f64 {
    softplus(neg - pos)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-modality rating margin of the positive over the negative item.
pub fn difference_vector(scores: &TripletScores) -> Vec<f64> {
    scores
        .pos_modality
        .iter()
        .zip(&scores.neg_modality)
        .map(|(p, n)| p - n)
        .collect()
}

/// Identity on `x >= 0`, `-e^6` below zero.
pub fn g_map(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        negative_floor()
    }
}

/// Softmax over modalities of the g-mapped differences.
pub fn reliability_vector(difference: &[f64]) -> Vec<f64> {
    let mapped: Vec<f64> = difference.iter().map(|&d| g_map(d)).collect();
    crate::model::softmax(&mapped)
}

/// `tanh((pos - neg) / tau)` when the fused ranking is correct, else 0.
pub fn confidence(pos: f64, neg: f64, tau: f64) -> f64 {
    if pos > neg {
        ((pos - neg) / tau).tanh()
    } else {
        0.0
    }
}

/// Supervision for one triplet. Treated as constants by the gradient code
/// unless the stop-gradient is explicitly disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilitySignal {
    pub difference: Vec<f64>,
    pub reliability: Vec<f64>,
    pub confidence: f64,
}

impl ReliabilitySignal {
    pub fn from_scores(scores: &TripletScores, tau: f64) -> Self {
        let difference = difference_vector(scores);
        ReliabilitySignal {
            reliability: reliability_vector(&difference),
            confidence: confidence(scores.pos, scores.neg, tau),
            difference,
        }
    }
}

/// Joint weight of a triplet's two items in modality `m`.
#[inline]
pub(crate) fn joint_weight(w_pos: f64, w_neg: f64, normalize: bool) -> f64 {
    if normalize {
        0.5 * (w_pos + w_neg)
    } else {
        w_pos + w_neg
    }
}

/// `γ · Σ_m z_m (ln z_m − ln q_m)` with `q = w_i + w_k`.
///
/// `q` sums to 2, so the value can be negative; `0 · ln 0` counts as 0.
pub fn calibration_loss(
    signal: &ReliabilitySignal,
    w_pos: &[f64],
    w_neg: &[f64],
    normalize_joint_weights: bool,
) -> f64 {
    if signal.confidence == 0.0 {
        return 0.0;
    }
    let kl: f64 = signal
        .reliability
        .iter()
        .zip(w_pos.iter().zip(w_neg))
        .filter(|(z, _)| **z > 0.0)
        .map(|(&z, (&wi, &wk))| {
            z * (z.max(LOG_FLOOR).ln() - joint_weight(wi, wk, normalize_joint_weights).ln())
        })
        .sum();
    signal.confidence * kl
}

/// Per-term loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Summed BPR loss.
    pub rec: f64,
    /// Summed (unweighted) calibration loss.
    pub cal: f64,
    /// Backbone L2 norm.
    pub reg: f64,
    pub total: f64,
    pub mean_confidence: f64,
}

/// Fresh supervision signals under the current parameters.
pub fn compute_signals(
    batch: &[Triplet],
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    tau: f64,
) -> Result<Vec<ReliabilitySignal>> {
    let items = ItemEmbeddings::compute(params, features)?;
    Ok(batch
        .iter()
        .map(|t| {
            let s = score_triplet_cached(params, &items, t, Stage::Two);
            ReliabilitySignal::from_scores(&s, tau)
        })
        .collect())
}

/// `Σ bpr + β ‖Θ‖₂` with unweighted (summed) fusion.
pub fn stage1_loss(
    batch: &[Triplet],
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    beta: f64,
) -> Result<LossBreakdown> {
    let items = ItemEmbeddings::compute(params, features)?;
    let mut rec = 0.0;
    for (idx, t) in batch.iter().enumerate() {
        let s = score_triplet_cached(params, &items, t, Stage::One);
        rec += checked(bpr_loss(s.pos, s.neg), idx, t)?;
    }
    let reg = params.backbone_norm();
    Ok(LossBreakdown {
        rec,
        cal: 0.0,
        reg,
        total: rec + beta * reg,
        mean_confidence: 0.0,
    })
}

/// `Σ bpr + α Σ cal + β ‖Θ‖₂` with weighted fusion, signals recomputed from
/// the current parameters.
pub fn stage2_loss(
    batch: &[Triplet],
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    stage2_loss_inner(batch, params, features, cfg, None)
}

/// Stage-II loss with externally supplied (frozen) signals.
pub fn stage2_loss_with_signals(
    batch: &[Triplet],
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    signals: &[ReliabilitySignal],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if signals.len() != batch.len() {
        return Err(MargoError::Dimension(format!(
            "{} signals for {} triplets",
            signals.len(),
            batch.len()
        )));
    }
    stage2_loss_inner(batch, params, features, cfg, Some(signals))
}

fn stage2_loss_inner(
    batch: &[Triplet],
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    cfg: &LossConfig,
    frozen: Option<&[ReliabilitySignal]>,
) -> Result<LossBreakdown> {
    let items = ItemEmbeddings::compute(params, features)?;
    let (mut rec, mut cal, mut conf) = (0.0, 0.0, 0.0);
    for (idx, t) in batch.iter().enumerate() {
        let s = score_triplet_cached(params, &items, t, Stage::Two);
        rec += checked(bpr_loss(s.pos, s.neg), idx, t)?;
        let fresh;
        let signal = match frozen {
            Some(sig) => &sig[idx],
            None => {
                fresh = ReliabilitySignal::from_scores(&s, cfg.tau);
                &fresh
            }
        };
        cal += checked(
            calibration_loss(signal, &s.pos_weights, &s.neg_weights, cfg.normalize_joint_weights),
            idx,
            t,
        )?;
        conf += signal.confidence;
    }
    let reg = params.backbone_norm();
    Ok(LossBreakdown {
        rec,
        cal,
        reg,
        total: rec + cfg.alpha * cal + cfg.beta * reg,
        mean_confidence: if batch.is_empty() { 0.0 } else { conf / batch.len() as f64 },
    })
}

pub(crate) fn checked(v: f64, index: usize, t: &Triplet) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MargoError::NonFiniteLoss {
            index,
            user: t.user,
            pos_item: t.pos_item,
            neg_item: t.neg_item,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn signal(z: Vec<f64>, gamma: f64) -> ReliabilitySignal {
        ReliabilitySignal {
            difference: vec![0.0; z.len()],
            reliability: z,
            confidence: gamma,
        }
    }

    #[test]
    fn bpr_values() {
        assert_abs_diff_eq!(bpr_loss(0.3, 0.3), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bpr_loss(1.0, 0.0), (1.0 + (-1f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bpr_loss(1.0, 0.0), 0.313_261_687_518_222_8, epsilon = 1e-12);
        let tiny = bpr_loss(1000.0, 0.0);
        assert!((0.0..1e-300).contains(&tiny));
        assert_abs_diff_eq!(bpr_loss(0.0, 1000.0), 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn difference_is_componentwise() {
        let s = TripletScores {
            pos_modality: vec![2.0, 1.0],
            neg_modality: vec![1.0, 3.0],
            pos_weights: vec![1.0; 2],
            neg_weights: vec![1.0; 2],
            pos: 3.0,
            neg: 4.0,
        };
        assert_eq!(difference_vector(&s), vec![1.0, -2.0]);
    }

    #[test]
    fn g_map_branches() {
        assert_eq!(g_map(0.5), 0.5);
        assert_eq!(g_map(0.0), 0.0);
        assert_eq!(g_map(-0.3), -(6f64.exp()));
        assert_abs_diff_eq!(g_map(-1e-12), -403.428_793_492_735_1, epsilon = 1e-9);
    }

    #[test]
    fn reliability_cases() {
        let z = reliability_vector(&[0.5, -0.3]);
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-12);
        assert!(z[1] < 1e-150 && z[1] > 0.0);
        assert_eq!(reliability_vector(&[0.2, 0.2]), vec![0.5, 0.5]);
        assert_eq!(reliability_vector(&[-1.0, -2.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn confidence_cases() {
        assert_eq!(confidence(1.0, 1.0, 0.5), 0.0);
        assert_eq!(confidence(0.0, 1.0, 0.5), 0.0);
        assert_abs_diff_eq!(confidence(2.5, 0.5, 2.0), 1f64.tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(confidence(2.5, 0.5, 2.0), 0.761_594_155_955_764_9, epsilon = 1e-12);
        assert!(confidence(10.0, 0.0, 1.0) < 1.0);
    }

    #[test]
    fn calibration_cases() {
        let half = [0.5, 0.5];
        assert_abs_diff_eq!(
            calibration_loss(&signal(vec![1.0, 0.0], 0.8), &half, &half, false),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            calibration_loss(&signal(vec![0.5, 0.5], 1.0), &half, &half, false),
            0.5f64.ln(),
            epsilon = 1e-12
        );
        assert_eq!(
            calibration_loss(&signal(vec![0.9, 0.1], 0.0), &[0.1, 0.9], &[0.2, 0.8], false),
            0.0
        );
        // normalized joint weights give the ordinary KL, 0 at a match
        assert_abs_diff_eq!(
            calibration_loss(&signal(vec![0.5, 0.5], 1.0), &half, &half, true),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_abs_diff_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
    }
}
