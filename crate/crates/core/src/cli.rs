//! `margo` command line: generate, train, evaluate, ablate, analyze and
//! gradcheck.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_distr::{Distribution, Normal};

use crate::analysis::{
    compare_variants, conflict_probe, reliability_recovery_score, weight_histogram, weight_std,
    weights_long_tsv,
};
use crate::config::RunConfig;
use crate::data::{load_interactions, load_modality_features, InteractionDataset, ModalityFeatureTable, Split};
use crate::error::{MargoError, Result};
use crate::eval::evaluate;
use crate::losses::{compute_signals, stage1_loss, stage2_loss, stage2_loss_with_signals};
use crate::model::{init_params, ModelParams, Stage};
use crate::optim::{backward, finite_diff_report, SignalGradient};
use crate::rng::seeded;
use crate::synth::{generate, load_ground_truth, SyntheticSpec};
use crate::train::{run_variant, Hyperparams, TrainOutcome, Variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Fraction of interactions per split.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Gradient-check pass threshold on the max relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "margo", version, about = "Reliability-guided modality weighting for multimodal recommendation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted modality corruption.
    Generate(GenerateArgs),
    /// Train one variant (or a grid over alpha/beta/tau).
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Evaluate(EvaluateArgs),
    /// Train and compare every ablation variant.
    Ablate(AblateArgs),
    /// Weight histograms, conflict probe and reliability recovery.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `variant`.
    #[arg(long)]
    variant: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    /// Comma-separated feature dims, one per modality.
    #[arg(long, default_value = "32,32", value_delimiter = ',')]
    modality_dims: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    per_user: usize,
    #[arg(long, default_value_t = 1)]
    corrupted_modality: usize,
    #[arg(long, default_value_t = 0.4)]
    corruption: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write binary MRGF feature caches.
    #[arg(long)]
    cache: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the report TSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Variants to run; the first is the reference for the improvement row.
    #[arg(long, value_delimiter = ',', default_value = "full,no_weight,no_cal,no_two_stage,no_nograd")]
    variants: Vec<String>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// `item<TAB>flag` file from `generate`.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    corrupted_modality: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Coordinates sampled per check.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Triplets in the checked batch.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Embedding size of the checked model.
    #[arg(long, default_value_t = 4)]
    embed_dim: usize,
}

/// Runs the CLI on `args` (including the program name), writing normal
/// output to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("margo: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &MargoError) -> i32 {
    match e {
        MargoError::Config(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| MargoError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| MargoError::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| MargoError::io("<stdout>", e))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &args.variant {
        cfg.set("variant", v, None)?;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<(InteractionDataset, Vec<ModalityFeatureTable>)> {
    let path = cfg
        .interactions
        .as_ref()
        .ok_or_else(|| MargoError::Config("`interactions` path is not set".into()))?;
    if cfg.features.is_empty() {
        return Err(MargoError::Config("`features` paths are not set".into()));
    }
    let dataset = load_interactions(path)?.split(SPLIT_RATIOS, cfg.seed)?;
    let features = cfg
        .features
        .iter()
        .enumerate()
        .map(|(m, p)| load_modality_features(p, m, &dataset))
        .collect::<Result<Vec<_>>>()?;
    Ok((dataset, features))
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = SyntheticSpec {
        user_count: a.users,
        item_count: a.items,
        latent_dim: a.latent_dim,
        modality_dims: a.modality_dims,
        interactions_per_user: a.per_user,
        corrupted_modality: a.corrupted_modality,
        corruption_fraction: a.corruption,
        noise_scale: a.noise_scale,
        seed: a.seed,
    };
    let data = generate(&spec)?;
    data.write_to(&a.out)?;
    if a.cache {
        for t in &data.features {
            t.write_cache(&a.out.join(format!("features_{}.mrgf", t.modality_id)))?;
        }
    }
    let features: Vec<String> = (0..spec.modality_dims.len())
        .map(|m| format!("features_{m}.tsv"))
        .collect();
    write_file(
        &a.out.join("dataset.conf"),
        format!("interactions=interactions.tsv\nfeatures={}\n", features.join(",")),
    )?;
    emit(
        out,
        &format!(
            "wrote {} users, {} items, {} interactions, {} corrupted items to {}\n",
            data.dataset.user_count(),
            data.dataset.item_count(),
            data.dataset.interactions().len(),
            data.ground_truth.corrupted_items.len(),
            a.out.display()
        ),
    )?;
    Ok(EXIT_OK)
}

/// Best validation Recall over the records of the final trained stage.
fn selected_val_recall(outcome: &TrainOutcome) -> f64 {
    let last_stage = outcome.log.records.last().map(|r| r.stage);
    outcome
        .log
        .records
        .iter()
        .filter(|r| Some(r.stage) == last_stage)
        .filter_map(|r| r.val_recall)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn write_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    create_dir(dir)?;
    outcome.params.save(&dir.join("model.ckpt"))?;
    if let Some(p) = &outcome.stage1_params {
        p.save(&dir.join("stage1.ckpt"))?;
    }
    write_file(&dir.join("train_log.tsv"), outcome.log.to_tsv())?;
    let mut handoff = String::new();
    if let Some(p) = &outcome.stage1_params {
        let _ = writeln!(handoff, "stage1_best\t{}", p.fingerprint());
    }
    if let Some(fp) = &outcome.stage2_start_fingerprint {
        let _ = writeln!(handoff, "stage2_start\t{fp}");
    }
    let _ = writeln!(handoff, "final\t{}", outcome.params.fingerprint());
    write_file(&dir.join("handoff.tsv"), handoff)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.cfg)?;
    let (dataset, features) = load_data(&cfg)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("effective_config.txt"), cfg.to_text())?;
    let grid = cfg.grid();
    let mut results = Vec::with_capacity(grid.len());
    for (idx, hp) in grid.iter().enumerate() {
        let outcome = run_variant(cfg.variant, hp, &dataset, &features)?;
        let recall = selected_val_recall(&outcome);
        if grid.len() > 1 {
            let dir = a.out.join(format!("grid_{idx:03}"));
            write_outcome(&dir, &outcome)?;
            let mut single = cfg.clone();
            single.alpha = vec![hp.loss.alpha];
            single.beta = vec![hp.loss.beta];
            single.tau = vec![hp.loss.tau];
            write_file(&dir.join("effective_config.txt"), single.to_text())?;
        }
        results.push((hp.clone(), recall, outcome));
    }
    let best = results
        .iter()
        .enumerate()
        .fold(0, |best, (j, r)| if r.1 > results[best].1 { j } else { best });
    let (hp, recall, outcome) = &results[best];
    write_outcome(&a.out, outcome)?;
    if grid.len() > 1 {
        let mut summary = String::from("grid\talpha\tbeta\ttau\tval_recall@20\n");
        for (j, (hp, r, _)) in results.iter().enumerate() {
            let _ = writeln!(
                summary,
                "grid_{j:03}\t{}\t{}\t{}\t{r}",
                hp.loss.alpha, hp.loss.beta, hp.loss.tau
            );
        }
        write_file(&a.out.join("grid.tsv"), summary)?;
    }
    let report = evaluate(
        &outcome.params,
        &features,
        &dataset,
        Split::Val,
        &cfg.k_list,
        outcome.eval_stage(),
    )?;
    write_file(&a.out.join("val_report.tsv"), report.to_tsv())?;
    emit(
        out,
        &format!(
            "variant {} alpha={} beta={} tau={}: {} epochs, best val Recall@20 {recall:.4}\n{}",
            cfg.variant,
            hp.loss.alpha,
            hp.loss.beta,
            hp.loss.tau,
            outcome.log.records.len(),
            report.to_table()
        ),
    )?;
    Ok(EXIT_OK)
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.cfg)?;
    let split: Split = a.split.parse().map_err(|_| MargoError::Config(format!("bad split `{}`", a.split)))?;
    let (dataset, features) = load_data(&cfg)?;
    let params = ModelParams::load(&a.checkpoint)?;
    let report = evaluate(&params, &features, &dataset, split, &cfg.k_list, cfg.variant.eval_stage())?;
    if let Some(path) = &a.out {
        write_file(path, report.to_tsv())?;
    }
    emit(out, &report.to_table())?;
    Ok(EXIT_OK)
}

fn cmd_ablate(a: AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.cfg)?;
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    let (dataset, features) = load_data(&cfg)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("effective_config.txt"), cfg.to_text())?;
    let hp = cfg.grid().remove(0);
    let mut reports = Vec::new();
    for v in variants {
        let outcome = run_variant(v, &hp, &dataset, &features)?;
        write_outcome(&a.out.join(v.name()), &outcome)?;
        let report = evaluate(&outcome.params, &features, &dataset, Split::Test, &cfg.k_list, v.eval_stage())?;
        write_file(&a.out.join(v.name()).join("test_report.tsv"), report.to_tsv())?;
        reports.push((v.name().to_string(), report));
    }
    let table = compare_variants(&reports)?;
    write_file(&a.out.join("comparison.tsv"), table.to_tsv())?;
    emit(out, &table.to_table())?;
    Ok(EXIT_OK)
}

fn cmd_analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.cfg)?;
    let (dataset, features) = load_data(&cfg)?;
    let params = ModelParams::load(&a.checkpoint)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("effective_config.txt"), cfg.to_text())?;
    let mut summary = String::new();
    for m in 0..params.modality_count() {
        let h = weight_histogram(&params, m, a.bins)?;
        write_file(&a.out.join(format!("hist_modality{m}.tsv")), h.to_tsv())?;
        let _ = writeln!(summary, "modality {m}: weight std {:.4}", weight_std(&params, m));
    }
    write_file(&a.out.join("weights_long.tsv"), weights_long_tsv(&params, dataset.item_ids()))?;

    let hp = cfg.grid().remove(0);
    let mut rng = seeded(cfg.seed, 0xa11);
    let triplets = dataset.epoch_triplets(&mut rng)?;
    let mut conflict = String::from("batch\tinner_product\tlogit_inner_product\tviolation\tprecondition_held\n");
    let (mut batches, mut violations, mut held) = (0usize, 0usize, 0usize);
    for (b, batch) in triplets.chunks(cfg.batch_size).enumerate() {
        let p = conflict_probe(batch, &params, &features, &hp.loss)?;
        let _ = writeln!(
            conflict,
            "{b}\t{}\t{}\t{}\t{}",
            p.inner_product,
            p.logit_inner_product,
            u8::from(p.violation),
            u8::from(p.precondition_held)
        );
        batches += 1;
        violations += usize::from(p.violation);
        held += usize::from(p.precondition_held);
    }
    write_file(&a.out.join("conflict.tsv"), conflict)?;
    let _ = writeln!(
        summary,
        "conflict probe: {violations}/{batches} batches negative, precondition held in {held}"
    );

    if let Some(gt) = &a.ground_truth {
        let flags = load_ground_truth(gt, &dataset)?;
        let r = reliability_recovery_score(&params, &flags, a.corrupted_modality)?;
        write_file(
            &a.out.join("recovery.tsv"),
            format!(
                "mean_w_corrupted\tmean_w_clean\tauc\n{}\t{}\t{}\n",
                r.mean_w_corrupted, r.mean_w_clean, r.auc
            ),
        )?;
        let _ = writeln!(
            summary,
            "recovery: mean weight corrupted {:.4}, clean {:.4}, AUC {:.4}",
            r.mean_w_corrupted, r.mean_w_clean, r.auc
        );
    }
    emit(out, &summary)?;
    Ok(EXIT_OK)
}

/// Max relative error of stage I, stage II (signals frozen) and stage II
/// with gradients through the signals, on one seeded batch. Parameters are
/// drawn at scale 0.3 so gradients sit well above difference roundoff.
pub fn gradient_check(
    dataset: &InteractionDataset,
    features: &[ModalityFeatureTable],
    hp: &Hyperparams,
    batch: usize,
    samples: usize,
    h: f64,
) -> Result<Vec<(&'static str, f64)>> {
    let dims: Vec<usize> = features.iter().map(ModalityFeatureTable::dim).collect();
    let mut params = init_params(dataset.user_count(), dataset.item_count(), hp.embed_dim, &dims, hp.seed)?;
    let normal = Normal::new(0.0, 0.3).expect("valid std");
    let mut rng = seeded(hp.seed, 0x9c);
    for (_, block) in params.blocks_mut() {
        for v in block.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    let triplets = dataset.sample_triplets(batch, hp.seed)?;
    let cfg = hp.loss;
    let mut out = Vec::new();

    let (_, g1) = backward(&triplets, &params, features, Stage::One, &cfg, SignalGradient::Stopped)?;
    let r1 = finite_diff_report(
        |p| Ok(stage1_loss(&triplets, p, features, cfg.beta)?.total),
        &g1,
        &params,
        h,
        samples,
        hp.seed,
    )?;
    out.push(("stage1", r1.max_relative_error));

    let (_, g2) = backward(&triplets, &params, features, Stage::Two, &cfg, SignalGradient::Stopped)?;
    let frozen = compute_signals(&triplets, &params, features, cfg.tau)?;
    let r2 = finite_diff_report(
        |p| Ok(stage2_loss_with_signals(&triplets, p, features, &frozen, &cfg)?.total),
        &g2,
        &params,
        h,
        samples,
        hp.seed,
    )?;
    out.push(("stage2", r2.max_relative_error));

    let (_, g3) = backward(&triplets, &params, features, Stage::Two, &cfg, SignalGradient::Propagated)?;
    let r3 = finite_diff_report(
        |p| Ok(stage2_loss(&triplets, p, features, &cfg)?.total),
        &g3,
        &params,
        h,
        samples,
        hp.seed,
    )?;
    out.push(("stage2_no_nograd", r3.max_relative_error));
    Ok(out)
}

/// Small synthetic instance used by `gradcheck` when no data is configured.
pub fn gradcheck_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        user_count: 5,
        item_count: 8,
        latent_dim: 4,
        modality_dims: vec![6, 6],
        interactions_per_user: 4,
        seed,
        ..SyntheticSpec::default()
    }
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.cfg)?;
    let (dataset, features) = if cfg.interactions.is_some() {
        load_data(&cfg)?
    } else {
        let data = generate(&gradcheck_spec(cfg.seed))?;
        (data.dataset.split(SPLIT_RATIOS, cfg.seed)?, data.features)
    };
    let mut hp = cfg.grid().remove(0);
    hp.embed_dim = a.embed_dim;
    let results = gradient_check(&dataset, &features, &hp, a.batch, a.samples, a.h)?;
    let mut text = String::from("check\tmax_relative_error\tpass\n");
    let mut ok = true;
    for (name, err) in &results {
        let pass = *err < GRADCHECK_TOLERANCE;
        ok &= pass;
        let _ = writeln!(text, "{name}\t{err:e}\t{}", if pass { "ok" } else { "FAIL" });
    }
    emit(out, &text)?;
    Ok(if ok { EXIT_OK } else { EXIT_NUMERICAL })
}
