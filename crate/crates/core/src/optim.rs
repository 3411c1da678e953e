//! Hand-derived gradients of the stage objectives, the Adam optimizer and a
//! central-difference gradient checker.

use rand::seq::index;

use crate::data::{ModalityFeatureTable, Triplet};
use crate::error::{MargoError, Result};
use crate::losses::{
    bpr_loss, calibration_loss, checked, joint_weight, sigmoid, LossBreakdown, LossConfig,
    ReliabilitySignal, LOG_FLOOR,
};
use crate::matrix::{axpy, Matrix};
use crate::model::{score_triplet_cached, BlockKind, Gradients, ItemEmbeddings, ModelParams, Stage};
use crate::rng::seeded;

/// How the calibration loss treats its supervision signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignalGradient {
    /// Reliability vector and confidence are constants.
    #[default]
    Stopped,
    /// Gradients also flow through the reliability vector and confidence
    /// back into the ratings.
    Propagated,
}

/// Loss and exact gradients of the stage objective over `batch`.
///
/// Stage II recomputes the signals from the current parameters; with
/// [`SignalGradient::Stopped`] they enter as constants.
pub fn backward(
    batch: &[Triplet],
    params: &ModelParams,
    features: &[ModalityFeatureTable],
    stage: Stage,
    cfg: &LossConfig,
    signal_gradient: SignalGradient,
) -> Result<(LossBreakdown, Gradients)> {
    let items = ItemEmbeddings::compute(params, features)?;
    let mc = params.modality_count();
    let d = params.embed_dim;
    let mut grads = params.zeros_like();
    let mut item_grads: Vec<Matrix> = (0..mc)
        .map(|_| Matrix::zeros(params.item_count(), d))
        .collect();
    let mut touched = vec![false; params.item_count()];

    let (mut rec, mut cal, mut conf_sum) = (0.0, 0.0, 0.0);
    let mut rating_grad_pos = vec![0.0; mc];
    let mut rating_grad_neg = vec![0.0; mc];
    let mut weight_grad_pos = vec![0.0; mc];
    let mut weight_grad_neg = vec![0.0; mc];

    for (idx, t) in batch.iter().enumerate() {
        let s = score_triplet_cached(params, &items, t, stage);
        let margin = s.margin();
        rec += checked(bpr_loss(s.pos, s.neg), idx, t)?;
        // d bpr / d margin
        let mut margin_grad = -sigmoid(-margin);
        rating_grad_pos.iter_mut().for_each(|g| *g = 0.0);
        rating_grad_neg.iter_mut().for_each(|g| *g = 0.0);
        weight_grad_pos.iter_mut().for_each(|g| *g = 0.0);
        weight_grad_neg.iter_mut().for_each(|g| *g = 0.0);

        if stage == Stage::Two {
            let signal = ReliabilitySignal::from_scores(&s, cfg.tau);
            cal += checked(
                calibration_loss(&signal, &s.pos_weights, &s.neg_weights, cfg.normalize_joint_weights),
                idx,
                t,
            )?;
            conf_sum += signal.confidence;
            let gamma = signal.confidence;
            if gamma > 0.0 {
                let z = &signal.reliability;
                let q: Vec<f64> = (0..mc)
                    .map(|m| joint_weight(s.pos_weights[m], s.neg_weights[m], cfg.normalize_joint_weights))
                    .collect();
                // d/dw of -ln q is -1/(w_i + w_k) with or without the 1/2.
                for m in 0..mc {
                    let g = -cfg.alpha * gamma * z[m] / (s.pos_weights[m] + s.neg_weights[m]);
                    weight_grad_pos[m] += g;
                    weight_grad_neg[m] += g;
                }
                if signal_gradient == SignalGradient::Propagated {
                    let kl: f64 = (0..mc)
                        .filter(|&m| z[m] > 0.0)
                        .map(|m| z[m] * (z[m].max(LOG_FLOOR).ln() - q[m].ln()))
                        .sum();
                    margin_grad += cfg.alpha * kl * (1.0 - gamma * gamma) / cfg.tau;
                    let dkl_dz: Vec<f64> = (0..mc)
                        .map(|m| z[m].max(LOG_FLOOR).ln() + 1.0 - q[m].ln())
                        .collect();
                    let mean: f64 = (0..mc).map(|m| z[m] * dkl_dz[m]).sum();
                    for m in 0..mc {
                        // g_map has slope 1 on the identity branch, 0 on the constant one
                        if signal.difference[m] >= 0.0 {
                            let g = cfg.alpha * gamma * z[m] * (dkl_dz[m] - mean);
                            rating_grad_pos[m] += g;
                            rating_grad_neg[m] -= g;
                        }
                    }
                }
            }
        }

        for m in 0..mc {
            rating_grad_pos[m] += margin_grad * s.pos_weights[m];
            rating_grad_neg[m] -= margin_grad * s.neg_weights[m];
        }
        if stage == Stage::Two {
            for m in 0..mc {
                weight_grad_pos[m] += margin_grad * s.pos_modality[m];
                weight_grad_neg[m] -= margin_grad * s.neg_modality[m];
            }
            add_softmax_backward(
                &s.pos_weights,
                &weight_grad_pos,
                grads.weight_logits.row_mut(t.pos_item),
            );
            add_softmax_backward(
                &s.neg_weights,
                &weight_grad_neg,
                grads.weight_logits.row_mut(t.neg_item),
            );
        }

        for m in 0..mc {
            let eu = params.user_embeddings[m].row(t.user);
            let user_grad = grads.user_embeddings[m].row_mut(t.user);
            axpy(rating_grad_pos[m], items.get(t.pos_item, m), user_grad);
            axpy(rating_grad_neg[m], items.get(t.neg_item, m), user_grad);
            axpy(rating_grad_pos[m], eu, item_grads[m].row_mut(t.pos_item));
            axpy(rating_grad_neg[m], eu, item_grads[m].row_mut(t.neg_item));
        }
        touched[t.pos_item] = true;
        touched[t.neg_item] = true;
    }

    // e_i = P f_i + b  =>  dP += g f_iᵀ, db += g
    for m in 0..mc {
        let proj = &mut grads.item_projections[m];
        for (i, _) in touched.iter().enumerate().filter(|(_, t)| **t) {
            let g = item_grads[m].row(i);
            let f = features[m].row(i);
            for (r, &gr) in g.iter().enumerate() {
                if gr != 0.0 {
                    axpy(gr, f, proj.row_mut(r));
                }
            }
            axpy(1.0, g, &mut grads.item_biases[m]);
        }
    }

    let reg = params.backbone_norm();
    let beta = cfg.beta;
    if reg > 0.0 && beta != 0.0 {
        for ((kind, g), (_, p)) in grads.blocks_mut().into_iter().zip(params.blocks()) {
            if kind == BlockKind::Backbone {
                axpy(beta / reg, p, g);
            }
        }
    }

    let total = match stage {
        Stage::One => rec + beta * reg,
        Stage::Two => rec + cfg.alpha * cal + beta * reg,
    };
    if !total.is_finite() {
        return Err(MargoError::Diverged(format!("batch loss is {total}")));
    }
    let breakdown = LossBreakdown {
        rec,
        cal,
        reg,
        total,
        mean_confidence: if batch.is_empty() { 0.0 } else { conf_sum / batch.len() as f64 },
    };
    Ok((breakdown, grads))
}

/// Adds `Jᵀ g` to `out`, where `J` is the softmax Jacobian at `weights`.
pub fn add_softmax_backward(weights: &[f64], grad: &[f64], out: &mut [f64]) {
    let mean: f64 = weights.iter().zip(grad).map(|(w, g)| w * g).sum();
    for ((o, w), g) in out.iter_mut().zip(weights).zip(grad) {
        *o += w * (g - mean);
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: ModelParams,
    second: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.first.blocks_mut())
            .zip(self.second.blocks_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in blocks {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over `sample_count` random coordinates (all of them if fewer).
/// The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    loss: F,
    analytic: &Gradients,
    params: &ModelParams,
    h: f64,
    sample_count: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    Ok(finite_diff_report(loss, analytic, params, h, sample_count, seed)?.max_relative_error)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

pub fn finite_diff_report<F>(
    loss: F,
    analytic: &Gradients,
    params: &ModelParams,
    h: f64,
    sample_count: usize,
    seed: u64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(MargoError::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let n = params.coordinate_count();
    let mut rng = seeded(seed, 0xfd);
    let coords = index::sample(&mut rng, n, sample_count.min(n)).into_vec();
    let mut probe = params.clone();
    let mut report = FiniteDiffReport {
        max_relative_error: 0.0,
        worst_coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: coords.len(),
    };
    let mut first = true;
    for c in coords {
        let orig = params.coordinate(c);
        probe.set_coordinate(c, orig + h);
        let plus = loss(&probe)?;
        probe.set_coordinate(c, orig - h);
        let minus = loss(&probe)?;
        probe.set_coordinate(c, orig);
        let numeric = (plus - minus) / (2.0 * h);
        let exact = analytic.coordinate(c);
        let err = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-8);
        if first || err > report.max_relative_error {
            first = false;
            report.max_relative_error = err;
            report.worst_coordinate = c;
            report.analytic = exact;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_check_is_exact() {
        let mut p = crate::model::init_params(3, 4, 2, &[2, 3], 5).unwrap();
        p.set_coordinate(0, 0.7);
        // loss = Σ c·θ², gradient 2cθ
        let loss = |q: &ModelParams| -> Result<f64> {
            Ok((0..q.coordinate_count())
                .map(|c| (1.0 + c as f64 * 0.1) * q.coordinate(c).powi(2))
                .sum())
        };
        let mut grad = p.zeros_like();
        for c in 0..p.coordinate_count() {
            grad.set_coordinate(c, 2.0 * (1.0 + c as f64 * 0.1) * p.coordinate(c));
        }
        let err = finite_diff_check(loss, &grad, &p, 1e-4, 1000, 1).unwrap();
        assert!(err < 1e-9, "{err}");
        assert!(finite_diff_check(loss, &grad, &p, 0.0, 10, 1).is_err());
        assert!(finite_diff_check(loss, &grad, &p, -1.0, 10, 1).is_err());
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = crate::model::init_params(1, 1, 1, &[1], 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.user_embeddings[0].set(0, 0, 1.0);
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &g, 1e-3);
        let moved = before.user_embeddings[0].get(0, 0) - p.user_embeddings[0].get(0, 0);
        assert_abs_diff_eq!(moved, 1e-3 / (1.0 + 1e-8), epsilon = 1e-15);
        // untouched coordinates stay put
        assert_eq!(p.item_projections, before.item_projections);
        assert_eq!(p.weight_logits, before.weight_logits);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = crate::model::init_params(3, 3, 2, &[2, 2], 1).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut adam = AdamState::new(&p);
        for _ in 0..5 {
            adam.step(&mut p, &g, 0.1);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn softmax_backward_sums_to_zero() {
        let mut out = vec![0.0; 3];
        add_softmax_backward(&[0.2, 0.3, 0.5], &[1.0, -2.0, 0.5], &mut out);
        assert_abs_diff_eq!(out.iter().sum::<f64>(), 0.0, epsilon = 1e-15);
    }
}
