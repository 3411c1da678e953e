//! C ABI over the `margo` crate.
//!
//! Objects cross the boundary as opaque handles (`MargoData`, `MargoModel`)
//! created and destroyed by this library. Every fallible call returns a
//! `MargoStatus`; on failure the message is kept per thread and read with
//! `margo_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use margo::synth::{generate, SyntheticSpec};
use margo::{
    evaluate, load_interactions, load_modality_features, run_variant, Hyperparams, InteractionDataset,
    LossConfig, MargoError, ModalityFeatureTable, ModelParams, Split, Stage, Variant,
};

/// Split ratios applied by the loaders.
const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MargoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Data = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Dataset with its modality features and split.
pub struct MargoData {
    dataset: InteractionDataset,
    features: Vec<ModalityFeatureTable>,
}

/// Model parameters and the fusion rule used for scoring.
pub struct MargoModel {
    params: ModelParams,
    stage: Stage,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MargoSynthSpec {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    /// Number of modalities; every modality has `modality_dim` features.
    pub modalities: usize,
    pub modality_dim: usize,
    pub interactions_per_user: usize,
    pub corrupted_modality: usize,
    pub corruption_fraction: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MargoTrainOptions {
    pub embed_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &MargoError) -> MargoStatus {
    match e {
        MargoError::Io { .. } => MargoStatus::Io,
        MargoError::Parse { .. } | MargoError::Format(_) | MargoError::EmptyFile(_) => MargoStatus::Parse,
        MargoError::InvalidArgument(_) | MargoError::Config(_) => MargoStatus::InvalidArgument,
        e if e.is_numerical() => MargoStatus::Numerical,
        _ => MargoStatus::Data,
    }
}

struct Failure(MargoStatus, String);

impl From<MargoError> for Failure {
    fn from(e: MargoError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: MargoStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MargoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MargoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MargoStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().map_or_else(|| fail(MargoStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return fail(MargoStatus::NullPointer, format!("{what} is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(MargoStatus::InvalidArgument, format!("{what} is not UTF-8")),
    }
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return fail(MargoStatus::NullPointer, "output buffer is null");
    }
    if len < need {
        return fail(MargoStatus::BufferTooSmall, format!("buffer holds {len} values, need {need}"));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(MargoStatus::NullPointer, "output handle is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn margo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn margo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be null or a string from `margo_model_fingerprint`, freed once.
#[no_mangle]
pub unsafe extern "C" fn margo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Fills `spec` with the default synthetic configuration.
///
/// # Safety
/// `spec` must be null or point to writable memory for one spec.
#[no_mangle]
pub unsafe extern "C" fn margo_synth_spec_default(spec: *mut MargoSynthSpec) -> MargoStatus {
    guard(|| {
        if spec.is_null() {
            return fail(MargoStatus::NullPointer, "spec is null");
        }
        let d = SyntheticSpec::default();
        *spec = MargoSynthSpec {
            users: d.user_count,
            items: d.item_count,
            latent_dim: d.latent_dim,
            modalities: d.modality_dims.len(),
            modality_dim: d.modality_dims[0],
            interactions_per_user: d.interactions_per_user,
            corrupted_modality: d.corrupted_modality,
            corruption_fraction: d.corruption_fraction,
            noise_scale: d.noise_scale,
            seed: d.seed,
        };
        Ok(())
    })
}

/// Generates a synthetic dataset and splits it with `spec.seed`.
///
/// # Safety
/// `spec` must point to a valid spec; `out` to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn margo_data_generate(spec: *const MargoSynthSpec, out: *mut *mut MargoData) -> MargoStatus {
    guard(|| {
        let s = deref(spec, "spec")?;
        let data = generate(&SyntheticSpec {
            user_count: s.users,
            item_count: s.items,
            latent_dim: s.latent_dim,
            modality_dims: vec![s.modality_dim; s.modalities],
            interactions_per_user: s.interactions_per_user,
            corrupted_modality: s.corrupted_modality,
            corruption_fraction: s.corruption_fraction,
            noise_scale: s.noise_scale,
            seed: s.seed,
        })?;
        let dataset = data.dataset.split(SPLIT_RATIOS, s.seed)?;
        store(out, MargoData { dataset, features: data.features })
    })
}

/// Loads an interaction TSV and one feature TSV per modality, then splits
/// the interactions with `seed`.
///
/// # Safety
/// Paths must be NUL-terminated; `feature_paths` must hold `modalities`
/// pointers; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn margo_data_load(
    interactions: *const c_char,
    feature_paths: *const *const c_char,
    modalities: usize,
    seed: u64,
    out: *mut *mut MargoData,
) -> MargoStatus {
    guard(|| {
        let path = path_arg(interactions, "interactions path")?;
        if feature_paths.is_null() || modalities == 0 {
            return fail(MargoStatus::InvalidArgument, "at least one feature path is required");
        }
        let dataset = load_interactions(path)?.split(SPLIT_RATIOS, seed)?;
        let mut features = Vec::with_capacity(modalities);
        for m in 0..modalities {
            let p = path_arg(*feature_paths.add(m), "feature path")?;
            features.push(load_modality_features(p, m, &dataset)?);
        }
        store(out, MargoData { dataset, features })
    })
}

/// Writes user, item and modality counts. Any output pointer may be null.
///
/// # Safety
/// `data` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn margo_data_counts(
    data: *const MargoData,
    users: *mut usize,
    items: *mut usize,
    modalities: *mut usize,
) -> MargoStatus {
    guard(|| {
        let d = deref(data, "data")?;
        for (p, v) in [(users, d.dataset.user_count()), (items, d.dataset.item_count()), (modalities, d.features.len())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn margo_data_free(data: *mut MargoData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Fills `opts` with the library's default training options.
///
/// # Safety
/// `opts` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn margo_train_options_default(opts: *mut MargoTrainOptions) -> MargoStatus {
    guard(|| {
        if opts.is_null() {
            return fail(MargoStatus::NullPointer, "options are null");
        }
        let hp = Hyperparams::default();
        *opts = MargoTrainOptions {
            embed_dim: hp.embed_dim,
            lr: hp.lr,
            batch_size: hp.batch_size,
            max_epochs: hp.max_epochs,
            patience: hp.patience,
            alpha: hp.loss.alpha,
            beta: hp.loss.beta,
            tau: hp.loss.tau,
            seed: hp.seed,
        };
        Ok(())
    })
}

/// Trains `variant` ("full", "no_weight", "no_cal", "no_two_stage",
/// "no_nograd"; null means "full").
///
/// # Safety
/// `data` and `opts` must be valid; `variant` null or NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn margo_train(
    data: *const MargoData,
    opts: *const MargoTrainOptions,
    variant: *const c_char,
    out: *mut *mut MargoModel,
) -> MargoStatus {
    guard(|| {
        let d = deref(data, "data")?;
        let o = deref(opts, "options")?;
        let variant = if variant.is_null() {
            Variant::Full
        } else {
            let name = CStr::from_ptr(variant)
                .to_str()
                .map_err(|_| Failure(MargoStatus::InvalidArgument, "variant is not UTF-8".into()))?;
            name.parse::<Variant>()?
        };
        let hp = Hyperparams {
            embed_dim: o.embed_dim,
            lr: o.lr,
            batch_size: o.batch_size,
            max_epochs: o.max_epochs,
            patience: o.patience,
            loss: LossConfig { alpha: o.alpha, beta: o.beta, tau: o.tau, normalize_joint_weights: false },
            seed: o.seed,
            ..Hyperparams::default()
        };
        let outcome = run_variant(variant, &hp, &d.dataset, &d.features)?;
        store(out, MargoModel { stage: outcome.eval_stage(), params: outcome.params })
    })
}

/// Loads a checkpoint. `weighted` selects weighted fusion for scoring
/// (0 scores with summed fusion, as a stage-I model).
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn margo_model_load(path: *const c_char, weighted: bool, out: *mut *mut MargoModel) -> MargoStatus {
    guard(|| {
        let params = ModelParams::load(&path_arg(path, "path")?)?;
        let stage = if weighted { Stage::Two } else { Stage::One };
        store(out, MargoModel { params, stage })
    })
}

/// # Safety
/// `model` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn margo_model_save(model: *const MargoModel, path: *const c_char) -> MargoStatus {
    guard(|| {
        let m = deref(model, "model")?;
        m.params.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// SHA-256 of the checkpoint bytes as hex. Free with `margo_string_free`.
/// Null on error.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn margo_model_fingerprint(model: *const MargoModel) -> *mut c_char {
    let mut result = ptr::null_mut();
    guard(|| {
        let m = deref(model, "model")?;
        result = CString::new(m.params.fingerprint()).expect("hex has no nul").into_raw();
        Ok(())
    });
    result
}

/// # Safety
/// `model` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn margo_model_free(model: *mut MargoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn check_shapes(m: &MargoModel, d: &MargoData) -> Result<(), Failure> {
    let p = &m.params;
    if p.user_count() != d.dataset.user_count()
        || p.item_count() != d.dataset.item_count()
        || p.modality_count() != d.features.len()
    {
        return fail(MargoStatus::Data, "model and data shapes differ");
    }
    Ok(())
}

/// Scores every item for `user` into `out` (`len` must be at least the
/// item count).
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn margo_model_score_all(
    model: *const MargoModel,
    data: *const MargoData,
    user: usize,
    out: *mut f64,
    len: usize,
) -> MargoStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let d = deref(data, "data")?;
        check_shapes(m, d)?;
        let scores = margo::model::score_all_items(&m.params, &d.features, user, m.stage)?;
        out_slice(out, len, scores.len())?.copy_from_slice(&scores);
        Ok(())
    })
}

/// Softmax modality weights of `item` into `out`.
///
/// # Safety
/// `model` must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn margo_model_weights(
    model: *const MargoModel,
    item: usize,
    out: *mut f64,
    len: usize,
) -> MargoStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if item >= m.params.item_count() {
            return fail(MargoStatus::InvalidArgument, format!("item {item} out of range"));
        }
        let w = m.params.modality_weights(item);
        out_slice(out, len, w.len())?.copy_from_slice(&w);
        Ok(())
    })
}

/// Recall@k and NDCG@k on the validation (`split` = 1) or test (`split` = 2)
/// interactions.
///
/// # Safety
/// Handles must be live; `recall` and `ndcg` writable.
#[no_mangle]
pub unsafe extern "C" fn margo_evaluate(
    model: *const MargoModel,
    data: *const MargoData,
    split: u32,
    k: usize,
    recall: *mut f64,
    ndcg: *mut f64,
) -> MargoStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let d = deref(data, "data")?;
        check_shapes(m, d)?;
        let split = match split {
            1 => Split::Val,
            2 => Split::Test,
            other => return fail(MargoStatus::InvalidArgument, format!("split must be 1 or 2, got {other}")),
        };
        if recall.is_null() || ndcg.is_null() {
            return fail(MargoStatus::NullPointer, "output pointer is null");
        }
        let r = evaluate(&m.params, &d.features, &d.dataset, split, &[k], m.stage)?;
        *recall = r.recall[0];
        *ndcg = r.ndcg[0];
        Ok(())
    })
}
