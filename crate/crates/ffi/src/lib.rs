//! C interface to the report classifier, the lasso geometry and the
//! evaluation metrics.
//!
//! Every fallible function returns an [`RlStatus`]. On failure a message is
//! available from [`rl_last_error`] on the same thread. Strings returned
//! through out-parameters are owned by the caller and must be released with
//! [`rl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use radlabel::annotation::contains;
use radlabel::checkpoint::Checkpoint;
use radlabel::metrics::{confusion, summarize, ConfusionCounts};
use radlabel::model::ReportClassifier;
use radlabel::tokenizer::Vocabulary;
use radlabel::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    NotFound = 6,
    BufferTooSmall = 7,
    Failed = 8,
    Panic = 9,
}

/// A loaded classifier and its vocabulary.
pub struct RlClassifier {
    model: ReportClassifier,
    vocab: Vocabulary,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RlConfusion {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

/// Percentages; NaN where the denominator is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RlSummary {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(RlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => RlStatus::Io,
            Error::Format(_) | Error::Record { .. } | Error::Json(_) => RlStatus::Format,
            Error::NotFound(_) => RlStatus::NotFound,
            Error::Config(_) | Error::Shape(_) | Error::Metrics(_) | Error::Label(_) => RlStatus::InvalidArgument,
            _ => RlStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: RlStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, turning errors and panics into a status plus a thread-local
/// message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            RlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(RlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RlStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(RlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(RlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a>(h: *const RlClassifier) -> Result<&'a RlClassifier, Failure> {
    h.as_ref()
        .ok_or_else(|| fail(RlStatus::NullPointer, "classifier handle is null"))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| fail(RlStatus::Failed, "string contains an interior NUL"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn rl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a classifier checkpoint and its vocabulary file.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rl_classifier_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut RlClassifier,
) -> RlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let ck = Checkpoint::load(Path::new(str_arg(checkpoint_path, "checkpoint_path")?))?;
        let model = ReportClassifier::from_checkpoint(&ck)?;
        let vocab = Vocabulary::load(Path::new(str_arg(vocab_path, "vocab_path")?))?;
        if vocab.len() != model.config.encoder.vocab_size {
            return Err(fail(
                RlStatus::InvalidArgument,
                format!(
                    "vocabulary has {} entries but the model expects {}",
                    vocab.len(),
                    model.config.encoder.vocab_size
                ),
            ));
        }
        *out = Box::into_raw(Box::new(RlClassifier { model, vocab }));
        Ok(())
    })
}

/// Releases a handle from [`rl_classifier_load`]. Null is ignored.
///
/// # Safety
/// `h` must come from [`rl_classifier_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rl_classifier_free(h: *mut RlClassifier) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of sigmoid outputs (1 coarse, 5 granular).
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rl_classifier_num_outputs(h: *const RlClassifier, out: *mut usize) -> RlStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(h)?.model.config.task.n_outputs();
        Ok(())
    })
}

/// Output probabilities for one report text. Writes `*written` outputs when
/// `capacity` suffices, else returns `BufferTooSmall` with `*written` set to
/// the required size.
///
/// # Safety
/// `probs` must have room for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn rl_classifier_predict(
    h: *const RlClassifier,
    text: *const c_char,
    probs: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> RlStatus {
    guard(|| {
        let c = handle(h)?;
        let written = out_arg(written, "written")?;
        let seq = c.vocab.encode(str_arg(text, "text")?, c.model.max_len());
        let p = c.model.predict(&[&seq])?.remove(0).probs;
        *written = p.len();
        if capacity < p.len() {
            return Err(fail(
                RlStatus::BufferTooSmall,
                format!("need room for {} probabilities, got {capacity}", p.len()),
            ));
        }
        if probs.is_null() {
            return Err(fail(RlStatus::NullPointer, "probs is null"));
        }
        std::slice::from_raw_parts_mut(probs, p.len()).copy_from_slice(&p);
        Ok(())
    })
}

/// Word-level attention weights for one report as a JSON object
/// `{"report_id", "tokens", "alphas"}`. Free with [`rl_string_free`].
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rl_classifier_attention_json(
    h: *const RlClassifier,
    report_id: *const c_char,
    text: *const c_char,
    out: *mut *mut c_char,
) -> RlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let c = handle(h)?;
        let seq = c.vocab.encode(str_arg(text, "text")?, c.model.max_len());
        let record = c
            .model
            .attention_record(str_arg(report_id, "report_id")?, &seq, &c.vocab)?;
        *out = into_c_string(serde_json::to_string(&record).map_err(Error::from)?)?;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Even-odd containment (boundary inclusive) of `n_points` points against a
/// polygon of `n_vertices` vertices. Coordinates are interleaved x,y pairs.
/// Writes 1 (inside) or 0 per point to `inside`.
///
/// # Safety
/// Arrays must hold `2 * n_vertices`, `2 * n_points` and `n_points` elements.
#[no_mangle]
pub unsafe extern "C" fn rl_points_in_polygon(
    polygon_xy: *const f64,
    n_vertices: usize,
    points_xy: *const f64,
    n_points: usize,
    inside: *mut u8,
) -> RlStatus {
    guard(|| {
        let poly = slice_arg(polygon_xy, 2 * n_vertices, "polygon_xy")?;
        let pts = slice_arg(points_xy, 2 * n_points, "points_xy")?;
        let polygon: Vec<[f64; 2]> = poly.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        radlabel::annotation::validate_polygon(&polygon)?;
        if n_points == 0 {
            return Ok(());
        }
        if inside.is_null() {
            return Err(fail(RlStatus::NullPointer, "inside is null"));
        }
        let out = std::slice::from_raw_parts_mut(inside, n_points);
        for (o, p) in out.iter_mut().zip(pts.chunks_exact(2)) {
            *o = contains(&polygon, [p[0], p[1]]) as u8;
        }
        Ok(())
    })
}

/// Confusion counts with `prob >= threshold` predicting positive. Labels
/// must be 0 or 1.
///
/// # Safety
/// `probs` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rl_confusion(
    probs: *const f64,
    labels: *const u8,
    n: usize,
    threshold: f64,
    out: *mut RlConfusion,
) -> RlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = confusion(
            slice_arg(probs, n, "probs")?,
            slice_arg(labels, n, "labels")?,
            threshold,
        )?;
        *out = RlConfusion {
            true_positives: c.tp,
            false_positives: c.fp,
            true_negatives: c.tn,
            false_negatives: c.fn_,
        };
        Ok(())
    })
}

/// Summary percentages of a confusion count.
///
/// # Safety
/// `counts` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_summarize(counts: *const RlConfusion, out: *mut RlSummary) -> RlStatus {
    guard(|| {
        let c = counts
            .as_ref()
            .ok_or_else(|| fail(RlStatus::NullPointer, "counts is null"))?;
        let out = out_arg(out, "out")?;
        let s = summarize(&ConfusionCounts {
            tp: c.true_positives,
            fp: c.false_positives,
            tn: c.true_negatives,
            fn_: c.false_negatives,
        })?;
        *out = RlSummary {
            accuracy: s.accuracy,
            sensitivity: s.sensitivity.unwrap_or(f64::NAN),
            specificity: s.specificity.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(rl_last_error()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn null_arguments_are_reported() {
        let status = unsafe { rl_confusion(std::ptr::null(), std::ptr::null(), 3, 0.5, std::ptr::null_mut()) };
        assert_eq!(status, RlStatus::NullPointer);
        assert!(last_error().contains("out"));
        let mut out = RlConfusion::default();
        let status = unsafe { rl_confusion(std::ptr::null(), std::ptr::null(), 0, 0.5, &mut out) };
        assert_eq!(status, RlStatus::Ok);
        assert_eq!(last_error(), "");
    }

    #[test]
    fn summary_uses_nan_for_missing_ratios() {
        let c = RlConfusion {
            true_negatives: 3,
            false_positives: 1,
            ..Default::default()
        };
        let mut s = RlSummary::default();
        assert_eq!(unsafe { rl_summarize(&c, &mut s) }, RlStatus::Ok);
        assert_eq!(s.accuracy, 75.0);
        assert!(s.sensitivity.is_nan());
        assert_eq!(s.specificity, 75.0);
        let empty = RlConfusion::default();
        assert_eq!(unsafe { rl_summarize(&empty, &mut s) }, RlStatus::InvalidArgument);
    }

    #[test]
    fn version_is_the_crate_version() {
        let v = unsafe { CStr::from_ptr(rl_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
