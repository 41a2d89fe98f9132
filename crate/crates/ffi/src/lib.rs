//! C ABI over `tsl-core`.
//!
//! Objects cross the boundary as opaque handles created by `tsl_*_load` /
//! `tsl_*_new` functions and released by the matching `tsl_*_free`. Every
//! fallible call returns a [`TslStatus`]; on failure the message is
//! available from [`tsl_last_error_message`] on the same thread until the
//! next failing call. Strings returned by the library must be released with
//! [`tsl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tsl_core::data::{fuse_optional, load_features, FeatureSequence, Modality, Predictions};
use tsl_core::decode::DecodeConfig;
use tsl_core::eval::EvalReport;
use tsl_core::model::{Localizer, ParamStore};
use tsl_core::pipeline::{evaluate_files, predict_dir, predict_video};
use tsl_core::train::TrainConfig;
use tsl_core::TslError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TslStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad input: configuration, schema, shapes, ids.
    Validation = 2,
    /// Non-finite values during computation.
    Numeric = 3,
    /// File system failure.
    Io = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// An index argument was out of range.
    OutOfRange = 6,
    /// Internal failure; the library caught a panic.
    Internal = 7,
}

/// A model with its decoding settings.
pub struct TslModel {
    model: Localizer,
    decode: DecodeConfig,
}

/// One video's fused feature sequence.
pub struct TslFeatures {
    seq: FeatureSequence,
}

/// An evaluation report.
pub struct TslReport {
    report: EvalReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &TslError) -> TslStatus {
    match err.exit_code() {
        3 => TslStatus::Numeric,
        4 => TslStatus::Io,
        _ => TslStatus::Validation,
    }
}

struct Failure(TslStatus, String);

impl From<TslError> for Failure {
    fn from(e: TslError) -> Self {
        Failure(status_of(&e), format!("error[{}]: {e}", e.code()))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TslStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal error: panic inside tsl".into());
            TslStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(TslStatus::NullPointer, format!("{what} is null"))
}

unsafe fn arg_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TslStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn arg_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tsl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tsl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model from a TOML training configuration and a checkpoint.
///
/// # Safety
/// Path arguments must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut TslModel,
) -> TslStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg = TrainConfig::load(arg_str(config_path, "config_path")?)?;
        let params = ParamStore::load(arg_str(checkpoint_path, "checkpoint_path")?)?;
        let model = Localizer::from_params(cfg.model, params)?;
        *out = Box::into_raw(Box::new(TslModel {
            model,
            decode: cfg.decode,
        }));
        Ok(())
    })
}

/// Freshly initialised (untrained) model from a configuration and seed.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_model_new(
    config_path: *const c_char,
    seed: u64,
    out: *mut *mut TslModel,
) -> TslStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg = TrainConfig::load(arg_str(config_path, "config_path")?)?;
        let model = Localizer::new(cfg.model, seed)?;
        *out = Box::into_raw(Box::new(TslModel {
            model,
            decode: cfg.decode,
        }));
        Ok(())
    })
}

/// Writes the model parameters as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tsl_model_save(model: *const TslModel, path: *const c_char) -> TslStatus {
    guard(|| {
        let model = arg_ref(model, "model")?;
        model.model.params().save(arg_str(path, "path")?)?;
        Ok(())
    })
}

/// Input feature width the model expects.
///
/// # Safety
/// `model` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn tsl_model_input_dim(model: *const TslModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().input_dim)
}

/// Number of classes the model predicts.
///
/// # Safety
/// `model` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn tsl_model_num_classes(model: *const TslModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().num_classes)
}

/// # Safety
/// `model` must come from this library and not have been freed. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn tsl_model_free(model: *mut TslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a visual feature file and, unless `audio_path` is null, an audio
/// file, and fuses them.
///
/// # Safety
/// Non-null path arguments must be NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_features_load(
    visual_path: *const c_char,
    audio_path: *const c_char,
    out: *mut *mut TslFeatures,
) -> TslStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let visual = load_features(arg_str(visual_path, "visual_path")?)?;
        let audio = if audio_path.is_null() {
            None
        } else {
            Some(load_features(arg_str(audio_path, "audio_path")?)?)
        };
        let seq = fuse_optional(&visual, audio.as_ref())?;
        *out = Box::into_raw(Box::new(TslFeatures { seq }));
        Ok(())
    })
}

/// Wraps a caller-owned, row-major `len × dim` matrix of already fused
/// features. The data is copied.
///
/// # Safety
/// `video_id` must be a NUL-terminated string; `data` must point to
/// `len * dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_features_from_data(
    video_id: *const c_char,
    stride_sec: f64,
    len: usize,
    dim: usize,
    data: *const f32,
    out: *mut *mut TslFeatures,
) -> TslStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let id = arg_str(video_id, "video_id")?;
        let n = len
            .checked_mul(dim)
            .ok_or_else(|| Failure(TslStatus::OutOfRange, "len * dim overflows".into()))?;
        let values = if n == 0 {
            Vec::new()
        } else {
            if data.is_null() {
                return Err(null("data"));
            }
            std::slice::from_raw_parts(data, n).to_vec()
        };
        let seq = FeatureSequence::new(id, Modality::Fused, stride_sec, len, dim, values)?;
        *out = Box::into_raw(Box::new(TslFeatures { seq }));
        Ok(())
    })
}

/// Number of timesteps, or 0 for null.
///
/// # Safety
/// `features` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tsl_features_len(features: *const TslFeatures) -> usize {
    features.as_ref().map_or(0, |f| f.seq.len())
}

/// Feature width, or 0 for null.
///
/// # Safety
/// `features` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tsl_features_dim(features: *const TslFeatures) -> usize {
    features.as_ref().map_or(0, |f| f.seq.dim())
}

/// # Safety
/// `features` must come from this library and not have been freed. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn tsl_features_free(features: *mut TslFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Runs the model on one video and returns prediction JSON in `*out_json`,
/// to be released with [`tsl_string_free`].
///
/// # Safety
/// `model` and `features` must be live handles; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_model_predict_json(
    model: *const TslModel,
    features: *const TslFeatures,
    out_json: *mut *mut c_char,
) -> TslStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        *out = ptr::null_mut();
        let model = arg_ref(model, "model")?;
        let features = arg_ref(features, "features")?;
        let intervals = predict_video(&model.model, &features.seq, &model.decode)?;
        let preds = Predictions::from_intervals(&intervals);
        let json = serde_json::to_string(&preds).map_err(TslError::from)?;
        *out = to_c_string(json);
        Ok(())
    })
}

/// Predicts every video in `features_dir` and writes prediction JSON to
/// `out_path`.
///
/// # Safety
/// `model` must be a live handle; paths NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn tsl_predict_dir(
    model: *const TslModel,
    features_dir: *const c_char,
    out_path: *const c_char,
) -> TslStatus {
    guard(|| {
        let model = arg_ref(model, "model")?;
        let dir = PathBuf::from(arg_str(features_dir, "features_dir")?);
        let out = arg_str(out_path, "out_path")?;
        let preds = predict_dir(&model.model, &dir, None, &model.decode)?;
        tsl_core::data::write_predictions(&preds, out)?;
        Ok(())
    })
}

/// Scores a prediction JSON file against an annotation JSON file.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_evaluate_files(
    pred_path: *const c_char,
    ann_path: *const c_char,
    out: *mut *mut TslReport,
) -> TslStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let pred = PathBuf::from(arg_str(pred_path, "pred_path")?);
        let ann = PathBuf::from(arg_str(ann_path, "ann_path")?);
        let report = evaluate_files(&pred, &ann)?;
        *out = Box::into_raw(Box::new(TslReport { report }));
        Ok(())
    })
}

/// Mean of the per-threshold mAPs as a fraction, or NaN for null.
///
/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tsl_report_average_map(report: *const TslReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.report.average_map)
}

/// Number of tIoU thresholds in the report, or 0 for null.
///
/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tsl_report_num_thresholds(report: *const TslReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.thresholds.len())
}

/// Threshold and mAP at position `index`.
///
/// # Safety
/// `report` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_report_map_at(
    report: *const TslReport,
    index: usize,
    out_threshold: *mut f64,
    out_map: *mut f64,
) -> TslStatus {
    guard(|| {
        let r = &arg_ref(report, "report")?.report;
        let tau = out_ptr(out_threshold, "out_threshold")?;
        let map = out_ptr(out_map, "out_map")?;
        if index >= r.thresholds.len() {
            return Err(Failure(
                TslStatus::OutOfRange,
                format!(
                    "threshold index {index} out of range 0..{}",
                    r.thresholds.len()
                ),
            ));
        }
        *tau = r.thresholds[index];
        *map = r.map_per_threshold[index];
        Ok(())
    })
}

/// Printable table with `row_label` as the row name; release with
/// [`tsl_string_free`].
///
/// # Safety
/// `report` must be a live handle; `row_label` a NUL-terminated string;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_report_table(
    report: *const TslReport,
    row_label: *const c_char,
    out: *mut *mut c_char,
) -> TslStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let r = arg_ref(report, "report")?;
        *out = to_c_string(r.report.table(arg_str(row_label, "row_label")?));
        Ok(())
    })
}

/// Report as JSON; release with [`tsl_string_free`].
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_report_json(
    report: *const TslReport,
    out: *mut *mut c_char,
) -> TslStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let r = arg_ref(report, "report")?;
        let json = serde_json::to_string(&r.report).map_err(TslError::from)?;
        *out = to_c_string(json);
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library and not have been freed. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn tsl_report_free(report: *mut TslReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
