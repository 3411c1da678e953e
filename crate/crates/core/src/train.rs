//! Two-stage training with early stopping, and the ablation variants.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::analysis::conflict_probe;
use crate::data::{InteractionDataset, ModalityFeatureTable, Split};
use crate::error::{MargoError, Result};
use crate::eval::evaluate;
use crate::losses::LossConfig;
use crate::model::{init_params, ModelParams, Stage, DEFAULT_EMBED_DIM};
use crate::optim::{backward, AdamState, SignalGradient};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub embed_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Epoch cap per stage.
    pub max_epochs: usize,
    /// Epochs without validation improvement before a stage stops.
    pub patience: usize,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Cutoff of the validation Recall used for model selection.
    pub selection_k: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Run the gradient-conflict probe on every stage-II batch.
    pub probe_conflicts: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            embed_dim: DEFAULT_EMBED_DIM,
            lr: 1e-4,
            batch_size: 2048,
            max_epochs: 100,
            patience: 10,
            eval_every: 1,
            selection_k: 20,
            loss: LossConfig::default(),
            seed: 0,
            probe_conflicts: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MargoError::InvalidArgument(m.into()));
        if self.embed_dim == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("embed_dim, batch_size and max_epochs must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.loss.tau.is_nan() || self.loss.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if self.loss.alpha < 0.0 || self.loss.beta < 0.0 {
            return bad("alpha and beta must be non-negative");
        }
        if self.selection_k == 0 {
            return bad("selection K must be positive");
        }
        Ok(())
    }
}

/// Training configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Stage I then stage II.
    Full,
    /// Stage I only; evaluated with summed fusion.
    NoWeight,
    /// Both stages with the calibration weight forced to zero.
    NoCal,
    /// Stage II from a fresh initialization.
    NoTwoStage,
    /// Both stages, gradients flowing through the supervision signals.
    NoNograd,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoWeight,
        Variant::NoCal,
        Variant::NoTwoStage,
        Variant::NoNograd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWeight => "no_weight",
            Variant::NoCal => "no_cal",
            Variant::NoTwoStage => "no_two_stage",
            Variant::NoNograd => "no_nograd",
        }
    }

    /// Fusion rule used when scoring a model trained with this variant.
    pub fn eval_stage(self) -> Stage {
        match self {
            Variant::NoWeight => Stage::One,
            _ => Stage::Two,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MargoError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MargoError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean BPR loss per triplet.
    pub rec_loss: f64,
    /// Mean calibration loss per triplet (0 in stage I).
    pub cal_loss: f64,
    /// Mean confidence (0 in stage I).
    pub mean_confidence: f64,
    /// Validation Recall@K, `None` on epochs without validation.
    pub val_recall: Option<f64>,
    /// Fraction of stage-II batches whose direct-weight gradient inner
    /// product was negative.
    pub conflict_rate: f64,
    /// Fraction of stage-II batches where every positive-item modality
    /// rating was non-negative.
    pub precondition_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const TSV_HEADER: &'static str =
        "epoch\tstage\trec_loss\tcal_loss\tmean_gamma\tval_recall\tconflict_rate\tprecondition_rate";

    pub fn stage_records(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::TSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let val = r.val_recall.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{val}\t{}\t{}",
                r.epoch, r.stage, r.rec_loss, r.cal_loss, r.mean_confidence, r.conflict_rate,
                r.precondition_rate
            );
        }
        out
    }

    fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }
}

/// Stage I: summed fusion, BPR plus backbone regularization. Returns the
/// parameters with the best validation Recall.
pub fn train_stage1(
    params: ModelParams,
    hp: &Hyperparams,
    dataset: &InteractionDataset,
    features: &[ModalityFeatureTable],
) -> Result<(ModelParams, TrainLog)> {
    run_stage(Stage::One, params, hp, dataset, features, SignalGradient::Stopped, 0)
}

/// Stage II: weighted fusion, BPR plus calibration plus regularization,
/// with signals recomputed on every step. `epoch_offset` continues the
/// epoch numbering of a preceding stage.
pub fn train_stage2(
    params: ModelParams,
    hp: &Hyperparams,
    dataset: &InteractionDataset,
    features: &[ModalityFeatureTable],
    signal_gradient: SignalGradient,
    epoch_offset: usize,
) -> Result<(ModelParams, TrainLog)> {
    run_stage(Stage::Two, params, hp, dataset, features, signal_gradient, epoch_offset)
}

fn run_stage(
    stage: Stage,
    mut params: ModelParams,
    hp: &Hyperparams,
    dataset: &InteractionDataset,
    features: &[ModalityFeatureTable],
    signal_gradient: SignalGradient,
    epoch_offset: usize,
) -> Result<(ModelParams, TrainLog)> {
    hp.validate()?;
    let stream = match stage {
        Stage::One => 0x51,
        Stage::Two => 0x52,
    };
    let mut rng = seeded(hp.seed, stream);
    let mut adam = AdamState::new(&params);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=hp.max_epochs {
        let triplets = dataset.epoch_triplets(&mut rng)?;
        let (mut rec, mut cal, mut conf) = (0.0, 0.0, 0.0);
        let (mut batches, mut conflicts, mut preconditions) = (0usize, 0usize, 0usize);
        for batch in triplets.chunks(hp.batch_size) {
            if stage == Stage::Two && hp.probe_conflicts {
                let probe = conflict_probe(batch, &params, features, &hp.loss)?;
                conflicts += usize::from(probe.violation);
                preconditions += usize::from(probe.precondition_held);
            }
            let (loss, grads) = backward(batch, &params, features, stage, &hp.loss, signal_gradient)?;
            adam.step(&mut params, &grads, hp.lr);
            if !params.is_finite() {
                return Err(MargoError::Diverged(format!(
                    "stage {stage} epoch {epoch}: parameters became non-finite"
                )));
            }
            rec += loss.rec;
            cal += loss.cal;
            conf += loss.mean_confidence * batch.len() as f64;
            batches += 1;
        }
        let n = triplets.len().max(1) as f64;
        let validate = epoch % hp.eval_every == 0 || epoch == hp.max_epochs;
        let val_recall = if validate {
            let report = evaluate(&params, features, dataset, Split::Val, &[hp.selection_k], stage)?;
            Some(report.recall[0])
        } else {
            None
        };
        let rate = |count: usize| {
            if stage == Stage::Two && hp.probe_conflicts && batches > 0 {
                count as f64 / batches as f64
            } else {
                0.0
            }
        };
        log.records.push(EpochRecord {
            epoch: epoch_offset + epoch,
            stage,
            rec_loss: rec / n,
            cal_loss: cal / n,
            mean_confidence: conf / n,
            val_recall,
            conflict_rate: rate(conflicts),
            precondition_rate: rate(preconditions),
        });

        if let Some(recall) = val_recall {
            if best.as_ref().is_none_or(|(b, _, _)| recall > *b) {
                best = Some((recall, epoch, params.clone()));
            }
        }
        if let Some((_, best_epoch, _)) = &best {
            if epoch - best_epoch >= hp.patience {
                break;
            }
        }
    }
    let (_, _, best_params) = best.expect("final epoch always validates");
    Ok((best_params, log))
}

/// Result of a variant run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub variant: Variant,
    pub params: ModelParams,
    pub log: TrainLog,
    /// Best stage-I parameters, when stage I ran.
    pub stage1_params: Option<ModelParams>,
    /// Fingerprint of the parameters stage II started from.
    pub stage2_start_fingerprint: Option<String>,
}

impl TrainOutcome {
    pub fn eval_stage(&self) -> Stage {
        self.variant.eval_stage()
    }
}

/// Trains one ablation variant from a fresh initialization seeded by
/// `hp.seed`.
pub fn run_variant(
    variant: Variant,
    hp: &Hyperparams,
    dataset: &InteractionDataset,
    features: &[ModalityFeatureTable],
) -> Result<TrainOutcome> {
    hp.validate()?;
    let dims: Vec<usize> = features.iter().map(ModalityFeatureTable::dim).collect();
    let init = init_params(
        dataset.user_count(),
        dataset.item_count(),
        hp.embed_dim,
        &dims,
        hp.seed,
    )?;
    let mut hp = hp.clone();
    if variant == Variant::NoCal {
        hp.loss.alpha = 0.0;
    }
    let signal_gradient = match variant {
        Variant::NoNograd => SignalGradient::Propagated,
        _ => SignalGradient::Stopped,
    };

    if variant == Variant::NoTwoStage {
        let fingerprint = init.fingerprint();
        let (params, log) = train_stage2(init, &hp, dataset, features, signal_gradient, 0)?;
        return Ok(TrainOutcome {
            variant,
            params,
            log,
            stage1_params: None,
            stage2_start_fingerprint: Some(fingerprint),
        });
    }

    let (stage1, mut log) = train_stage1(init, &hp, dataset, features)?;
    if variant == Variant::NoWeight {
        return Ok(TrainOutcome {
            variant,
            params: stage1.clone(),
            log,
            stage1_params: Some(stage1),
            stage2_start_fingerprint: None,
        });
    }
    let offset = log.records.last().map_or(0, |r| r.epoch);
    let fingerprint = stage1.fingerprint();
    let (params, log2) = train_stage2(stage1.clone(), &hp, dataset, features, signal_gradient, offset)?;
    log.extend(log2);
    Ok(TrainOutcome {
        variant,
        params,
        log,
        stage1_params: Some(stage1),
        stage2_start_fingerprint: Some(fingerprint),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("w/o weight".parse::<Variant>().is_err());
    }

    #[test]
    fn default_hyperparameters() {
        let hp = Hyperparams::default();
        assert_eq!(hp.embed_dim, 64);
        assert_eq!(hp.batch_size, 2048);
        assert_eq!(hp.lr, 1e-4);
        assert_eq!(hp.max_epochs, 100);
        assert!(hp.validate().is_ok());
        assert!(Hyperparams { eval_every: 0, ..hp.clone() }.validate().is_err());
    }
}
