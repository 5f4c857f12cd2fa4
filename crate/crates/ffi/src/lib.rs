//! C ABI over the omicsurv library.
//!
//! Every fallible entry point returns an [`OmsStatus`]; on failure the message
//! is available from [`omicsurv_last_error`] on the same thread. Handles are
//! opaque, created by `*_load`/`*_fsqn` functions and released with the
//! matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use omicsurv::dataio::{self, ClinicalRecord, ExpressionMatrix, FeatureMatrix, Orientation};
use omicsurv::error::{Error, ErrorKind};
use omicsurv::models::{self, Fitted};
use omicsurv::pipeline::{self, ExperimentConfig};
use omicsurv::project::{self, TsneConfig};
use omicsurv::survival::{self, SurvivalCurve, SurvivalLabel};
use omicsurv::{eval, normalize};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmsStatus {
    Ok = 0,
    ConfigError = 2,
    DataError = 3,
    RuntimeError = 4,
    NullPointer = 5,
    InvalidUtf8 = 6,
    Panic = 7,
}

/// Loaded or normalized expression matrix.
pub struct OmsExpression(ExpressionMatrix);

/// Kaplan-Meier curve over all records of a clinical file.
pub struct OmsKmCurve(SurvivalCurve);

/// Fitted model or ensemble loaded from a model JSON file.
pub struct OmsModel(Fitted);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(e: Error) -> OmsStatus {
    set_error(e.to_string());
    match e.kind() {
        ErrorKind::Config => OmsStatus::ConfigError,
        ErrorKind::Data => OmsStatus::DataError,
        ErrorKind::Runtime => OmsStatus::RuntimeError,
    }
}

fn guard(f: impl FnOnce() -> Result<(), OmsStatus>) -> OmsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OmsStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            OmsStatus::Panic
        }
    }
}

fn null(what: &str) -> OmsStatus {
    set_error(format!("{what} is null"));
    OmsStatus::NullPointer
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, OmsStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        OmsStatus::InvalidUtf8
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], OmsStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, OmsStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn omicsurv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn omicsurv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Mann-Whitney AUC of `scores` against 0/1 `labels`.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> OmsStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let l = slice_arg(labels, n, "labels")?;
        let out = out_arg(out, "out")?;
        *out = eval::auc(s, l).map_err(fail)?;
        Ok(())
    })
}

/// Horizon label for one patient: 1 survived past `horizon`, 0 died by it,
/// -1 lost to follow-up before it.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_make_label(
    time_months: f64,
    event: bool,
    horizon_months: f64,
    out: *mut i32,
) -> OmsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let rec = ClinicalRecord {
            patient_id: "p".into(),
            observed_time_months: time_months,
            event,
            age_years: None,
            group_label: None,
        };
        rec.validate().map_err(fail)?;
        *out = match survival::make_label(&rec, horizon_months).map_err(fail)? {
            SurvivalLabel::Survived => 1,
            SurvivalLabel::Died => 0,
            SurvivalLabel::Dropped => -1,
        };
        Ok(())
    })
}

/// Exact t-SNE of a row-major `n × m` matrix into `out` (row-major `n × dims`).
/// Rows are keyed by their index for initialization.
///
/// # Safety
/// `x` must hold `n*m` values and `out` room for `n*dims`.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_tsne(
    x: *const f64,
    n: usize,
    m: usize,
    dims: usize,
    perplexity: f64,
    iterations: usize,
    seed: u64,
    out: *mut f64,
) -> OmsStatus {
    guard(|| {
        let values = slice_arg(x, n * m, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let arr = ndarray::Array2::from_shape_vec((n, m), values.to_vec())
            .map_err(|e| fail(Error::InvalidArgument(e.to_string())))?;
        let ids = (0..n).map(|i| i.to_string()).collect();
        let names = (0..m).map(|j| format!("x{j}")).collect();
        let features = FeatureMatrix::new(ids, names, arr).map_err(fail)?;
        let cfg = TsneConfig {
            output_dims: dims,
            perplexity,
            iterations,
            seed,
            ..TsneConfig::default()
        };
        let emb = project::tsne(&features, &cfg).map_err(fail)?;
        let dst = std::slice::from_raw_parts_mut(out, n * dims);
        for (d, v) in dst.iter_mut().zip(emb.coords.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Load a patients-as-rows expression CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_expression_load(path: *const c_char, out: *mut *mut OmsExpression) -> OmsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let m = dataio::load_expression(&path, Orientation::PatientsAsRows).map_err(fail)?;
        *out = Box::into_raw(Box::new(OmsExpression(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_expression_shape(
    m: *const OmsExpression,
    n_patients: *mut usize,
    n_genes: *mut usize,
) -> OmsStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("m"))?;
        *out_arg(n_patients, "n_patients")? = m.0.n_patients();
        *out_arg(n_genes, "n_genes")? = m.0.n_genes();
        Ok(())
    })
}

/// Quantile-normalize `target` onto `reference` over their shared genes.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_expression_fsqn(
    target: *const OmsExpression,
    reference: *const OmsExpression,
    out: *mut *mut OmsExpression,
) -> OmsStatus {
    guard(|| {
        let t = target.as_ref().ok_or_else(|| null("target"))?;
        let r = reference.as_ref().ok_or_else(|| null("reference"))?;
        let out = out_arg(out, "out")?;
        let run = || -> omicsurv::Result<ExpressionMatrix> {
            let genes = dataio::common_genes(&[t.0.clone(), r.0.clone()])?;
            normalize::fsqn(&t.0.select_genes(&genes)?, &r.0.select_genes(&genes)?)
        };
        *out = Box::into_raw(Box::new(OmsExpression(run().map_err(fail)?)));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_expression_write(m: *const OmsExpression, path: *const c_char) -> OmsStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("m"))?;
        let path = path_arg(path, "path")?;
        dataio::write_expression(&m.0, &path).map_err(fail)
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_expression_free(m: *mut OmsExpression) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Kaplan-Meier curve over every record of a clinical CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_km_load(path: *const c_char, out: *mut *mut OmsKmCurve) -> OmsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let records = dataio::load_clinical(&path).map_err(fail)?;
        let mut curves = survival::kaplan_meier(&records, false).map_err(fail)?;
        *out = Box::into_raw(Box::new(OmsKmCurve(curves.remove(0))));
        Ok(())
    })
}

/// Number of distinct event times on the curve.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_km_len(c: *const OmsKmCurve) -> usize {
    c.as_ref().map_or(0, |c| c.0.event_times.len())
}

/// # Safety
/// `c` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_km_point(
    c: *const OmsKmCurve,
    index: usize,
    time: *mut f64,
    survival: *mut f64,
) -> OmsStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("c"))?;
        if index >= c.0.event_times.len() {
            return Err(fail(Error::InvalidArgument(format!(
                "index {index} out of range for {} points",
                c.0.event_times.len()
            ))));
        }
        *out_arg(time, "time")? = c.0.event_times[index];
        *out_arg(survival, "survival")? = c.0.survival_probabilities[index];
        Ok(())
    })
}

/// S(t), right-continuous; 1 before the first event.
///
/// # Safety
/// `c` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_km_survival_at(c: *const OmsKmCurve, t: f64, out: *mut f64) -> OmsStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("c"))?;
        *out_arg(out, "out")? = survival::survival_at(&c.0, t);
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_km_free(c: *mut OmsKmCurve) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Load a model file written by the `train` or `rptrain` commands.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_model_load(path: *const c_char, out: *mut *mut OmsModel) -> OmsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let m = models::load_model(&path).map_err(fail)?;
        *out = Box::into_raw(Box::new(OmsModel(m)));
        Ok(())
    })
}

/// Feature count the model expects, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_model_n_features(m: *const OmsModel) -> usize {
    match m.as_ref().map(|m| &m.0) {
        Some(Fitted::Model(t)) => t.n_features,
        Some(Fitted::RpEnsemble(e)) => e.n_features,
        None => 0,
    }
}

/// Scores for a row-major `n × m` matrix; larger means more likely to survive.
///
/// # Safety
/// `x` must hold `n*m` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_model_predict(
    model: *const OmsModel,
    x: *const f64,
    n: usize,
    m: usize,
    out: *mut f64,
) -> OmsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let values = slice_arg(x, n * m, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let view =
            ndarray::ArrayView2::from_shape((n, m), values).map_err(|e| fail(Error::InvalidArgument(e.to_string())))?;
        let scores = model.0.predict_scores(view).map_err(fail)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&scores);
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_model_free(m: *mut OmsModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Run the experiment described by a TOML config file. `workers` of 0 uses
/// the environment variable or the config value.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn omicsurv_run_experiment(config_path: *const c_char, workers: usize) -> OmsStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let (cfg, text) = ExperimentConfig::load(&path).map_err(fail)?;
        let w = pipeline::resolve_workers((workers > 0).then_some(workers), cfg.workers).map_err(fail)?;
        pipeline::run_experiment(&cfg, &text, w).map_err(fail)?;
        Ok(())
    })
}
