//! C ABI for protogmm.
//!
//! Every function returns a [`PgmmStatus`]; on failure the message is
//! available from [`pgmm_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Panics never cross the
//! boundary; they surface as `PGMM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use protogmm::checkpoint::Checkpoint;
use protogmm::config::TrainConfig;
use protogmm::data::{generate_domain_pair, read_dataset, Dataset, DomainSpec};
use protogmm::pipeline::{evaluate, AdaptState, Predictor, TermStatus, Trainer};
use protogmm::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmmStatus {
    Ok = 0,
    NullArgument = 1,
    Io = 2,
    Parse = 3,
    Version = 4,
    Config = 5,
    Input = 6,
    Contract = 7,
    NotReady = 8,
    Degenerate = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmmPredictor {
    Head = 0,
    Gmm = 1,
}

/// Loss terms of one training iteration.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PgmmIterStats {
    pub iteration: u64,
    pub total: f64,
    pub ce_source: f64,
    pub ce_target: f64,
    pub contrast_source: f64,
    pub contrast_target: f64,
    pub confidence: f64,
    /// 1 when the term contributed a gradient this iteration.
    pub source_contrast_applied: u8,
    pub target_contrast_applied: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PgmmMetrics {
    pub accuracy: f64,
    pub miou: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// A set of input vectors with optional labels.
pub struct PgmmDataset(Dataset);

/// A training run over owned copies of its datasets.
pub struct PgmmTrainer(Trainer);

/// A frozen adaptation state for inference.
pub struct PgmmModel(AdaptState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PgmmStatus {
    match e {
        Error::Degenerate(_) => PgmmStatus::Degenerate,
        Error::Contract(_) => PgmmStatus::Contract,
        Error::NotReady(_) => PgmmStatus::NotReady,
        Error::Parse { .. } | Error::Serde(_) => PgmmStatus::Parse,
        Error::Input(_) => PgmmStatus::Input,
        Error::Version(_) => PgmmStatus::Version,
        Error::Config { .. } => PgmmStatus::Config,
        Error::Io(_) => PgmmStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PgmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgmmStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            PgmmStatus::NullArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PgmmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::Input(format!("`{what}` is not valid UTF-8"))))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<T>(out: *mut *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn pgmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgmm_dataset_read(path: *const c_char, out: *mut *mut PgmmDataset) -> PgmmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let ds = read_dataset(Path::new(path))?;
        out_arg(out, PgmmDataset(ds), "out")
    })
}

/// Builds a dataset from `n * dim` row-major values and `n` labels, where a
/// negative label marks an unlabeled sample. `labels` may be NULL.
///
/// # Safety
/// `values` must hold `n * dim` doubles and `labels`, if non-null, `n` entries.
#[no_mangle]
pub unsafe extern "C" fn pgmm_dataset_from_rows(
    values: *const f64,
    labels: *const i64,
    n: usize,
    dim: usize,
    n_classes: usize,
    out: *mut *mut PgmmDataset,
) -> PgmmStatus {
    guard(|| {
        let total = n
            .checked_mul(dim)
            .ok_or_else(|| Failure::Lib(Error::Input("n * dim overflows".into())))?;
        let values = slice_arg(values, total, "values")?;
        let labels = if labels.is_null() {
            None
        } else {
            Some(slice_arg(labels, n, "labels")?)
        };
        let mut ds = Dataset::new(dim, n_classes);
        for i in 0..n {
            let label = match labels.map(|l| l[i]) {
                Some(l) if l >= 0 => {
                    let l = l as usize;
                    if l >= n_classes {
                        return Err(Error::Input(format!("label {l} out of range 0..{n_classes}")).into());
                    }
                    Some(l)
                }
                _ => None,
            };
            ds.push(&values[i * dim..(i + 1) * dim], label);
        }
        out_arg(out, PgmmDataset(ds), "out")
    })
}

/// Generates a source/target pair from a `key = value` domain spec. The
/// target comes back unlabeled; `target_labeled`, if non-null, receives a
/// copy carrying the held-out labels.
///
/// # Safety
/// `spec` must be a NUL-terminated string; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgmm_generate_pair(
    spec: *const c_char,
    source: *mut *mut PgmmDataset,
    target: *mut *mut PgmmDataset,
    target_labeled: *mut *mut PgmmDataset,
) -> PgmmStatus {
    guard(|| {
        let spec = DomainSpec::from_kv(str_arg(spec, "spec")?)?;
        if source.is_null() || target.is_null() {
            return Err(Failure::Null("source/target"));
        }
        let (src, tgt, labels) = generate_domain_pair(&spec)?;
        if !target_labeled.is_null() {
            let mut labeled = tgt.clone();
            labeled.labels = labels.into_iter().map(Some).collect();
            out_arg(target_labeled, PgmmDataset(labeled), "target_labeled")?;
        }
        out_arg(source, PgmmDataset(src), "source")?;
        out_arg(target, PgmmDataset(tgt), "target")
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `len`, `dim`, `n_classes` writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn pgmm_dataset_shape(
    ds: *const PgmmDataset,
    len: *mut usize,
    dim: *mut usize,
    n_classes: *mut usize,
) -> PgmmStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.0;
        if let Some(l) = len.as_mut() {
            *l = ds.len();
        }
        if let Some(d) = dim.as_mut() {
            *d = ds.dim;
        }
        if let Some(c) = n_classes.as_mut() {
            *c = ds.n_classes;
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pgmm_dataset_free(ds: *mut PgmmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Creates a trainer from a `key = value` config (NULL for defaults). The
/// datasets are copied; the source must be fully labeled.
///
/// # Safety
/// Pointers must be valid handles or NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgmm_trainer_new(
    config: *const c_char,
    source: *const PgmmDataset,
    target: *const PgmmDataset,
    out: *mut *mut PgmmTrainer,
) -> PgmmStatus {
    guard(|| {
        let cfg = if config.is_null() {
            TrainConfig::default()
        } else {
            TrainConfig::from_kv(str_arg(config, "config")?)?
        };
        let src = ref_arg(source, "source")?.0.clone();
        let tgt = ref_arg(target, "target")?.0.clone();
        out_arg(out, PgmmTrainer(Trainer::new(cfg, src, tgt)?), "out")
    })
}

/// Runs one iteration. `stats` may be NULL.
///
/// # Safety
/// `trainer` must be a live handle; `stats` writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn pgmm_trainer_step(trainer: *mut PgmmTrainer, stats: *mut PgmmIterStats) -> PgmmStatus {
    guard(|| {
        let t = &mut mut_arg(trainer, "trainer")?.0;
        let rec = t.step()?;
        if let Some(s) = stats.as_mut() {
            *s = PgmmIterStats {
                iteration: rec.iteration as u64,
                total: rec.total,
                ce_source: rec.ce_source,
                ce_target: rec.ce_target,
                contrast_source: rec.contrast_source,
                contrast_target: rec.contrast_target,
                confidence: rec.confidence,
                source_contrast_applied: u8::from(rec.source_contrast == TermStatus::Applied),
                target_contrast_applied: u8::from(rec.target_contrast == TermStatus::Applied),
            };
        }
        Ok(())
    })
}

/// Runs the remaining iterations of the configured schedule.
///
/// # Safety
/// `trainer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgmm_trainer_run(trainer: *mut PgmmTrainer) -> PgmmStatus {
    guard(|| {
        let t = &mut mut_arg(trainer, "trainer")?.0;
        t.run(|_| Ok(()))?;
        Ok(())
    })
}

/// Iterations completed so far.
///
/// # Safety
/// `trainer` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgmm_trainer_iteration(trainer: *const PgmmTrainer, out: *mut u64) -> PgmmStatus {
    guard(|| {
        let t = &ref_arg(trainer, "trainer")?.0;
        *mut_arg(out, "out")? = t.state().iteration as u64;
        Ok(())
    })
}

/// Writes a checkpoint directory readable by `pgmm_model_load` and the CLI.
///
/// # Safety
/// `trainer` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pgmm_trainer_save(trainer: *const PgmmTrainer, dir: *const c_char) -> PgmmStatus {
    guard(|| {
        let t = &ref_arg(trainer, "trainer")?.0;
        let dir = str_arg(dir, "dir")?;
        Checkpoint::new(t.config().clone(), t.state().clone()).save(Path::new(dir))?;
        Ok(())
    })
}

/// Copies the current state into an inference handle.
///
/// # Safety
/// `trainer` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgmm_trainer_snapshot(trainer: *const PgmmTrainer, out: *mut *mut PgmmModel) -> PgmmStatus {
    guard(|| {
        let t = &ref_arg(trainer, "trainer")?.0;
        out_arg(out, PgmmModel(t.state().clone()), "out")
    })
}

/// # Safety
/// `trainer` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pgmm_trainer_free(trainer: *mut PgmmTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Loads the state from a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgmm_model_load(dir: *const c_char, out: *mut *mut PgmmModel) -> PgmmStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        out_arg(out, PgmmModel(Checkpoint::load(Path::new(dir))?.state), "out")
    })
}

fn predictor(p: PgmmPredictor) -> Predictor {
    match p {
        PgmmPredictor::Head => Predictor::Head,
        PgmmPredictor::Gmm => Predictor::Gmm,
    }
}

/// Predicted class of one input vector.
///
/// # Safety
/// `model` must be a live handle, `x` must hold `dim` doubles, `class_out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgmm_model_predict(
    model: *const PgmmModel,
    x: *const f64,
    dim: usize,
    which: PgmmPredictor,
    class_out: *mut usize,
) -> PgmmStatus {
    guard(|| {
        let state = &ref_arg(model, "model")?.0;
        let x = slice_arg(x, dim, "x")?;
        let out = mut_arg(class_out, "class_out")?;
        let expected = state.models.student.shape().input_dim;
        if dim != expected {
            return Err(Error::Input(format!("input has dim {dim}, model expects {expected}")).into());
        }
        let mut one = Dataset::new(dim, state.n_classes());
        one.push(x, None);
        *out = protogmm::pipeline::predict(state, &one, predictor(which))?[0];
        Ok(())
    })
}

/// Unit-norm embedding of one input vector; `out` must hold the model's
/// embedding dimension.
///
/// # Safety
/// `model` must be a live handle, `x` must hold `dim` doubles, `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn pgmm_model_embed(
    model: *const PgmmModel,
    x: *const f64,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> PgmmStatus {
    guard(|| {
        let state = &ref_arg(model, "model")?.0;
        let x = slice_arg(x, dim, "x")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let fw = state.models.student.forward(x)?;
        let f = fw.unit()?;
        if out_len != f.len() {
            return Err(Error::Input(format!("output buffer holds {out_len}, embedding has {}", f.len())).into());
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(f);
        Ok(())
    })
}

/// Metrics of the model on a fully labeled dataset.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgmm_model_evaluate(
    model: *const PgmmModel,
    data: *const PgmmDataset,
    which: PgmmPredictor,
    out: *mut PgmmMetrics,
) -> PgmmStatus {
    guard(|| {
        let state = &ref_arg(model, "model")?.0;
        let data = &ref_arg(data, "data")?.0;
        let out = mut_arg(out, "out")?;
        let labels = data.known_labels()?;
        let m = evaluate(state, data, &labels, predictor(which))?;
        *out = PgmmMetrics {
            accuracy: m.accuracy,
            miou: m.miou,
            macro_precision: m.macro_precision,
            macro_recall: m.macro_recall,
            macro_f1: m.macro_f1,
        };
        Ok(())
    })
}

/// Class count of the model.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgmm_model_n_classes(model: *const PgmmModel, out: *mut usize) -> PgmmStatus {
    guard(|| {
        *mut_arg(out, "out")? = ref_arg(model, "model")?.0.n_classes();
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pgmm_model_free(model: *mut PgmmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
