//! C ABI over `evprobe`.
//!
//! Every fallible function returns an [`EvpStatus`]; on failure the message
//! is kept per thread and read back with [`evp_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use evprobe::evidential::{score_token, AuVariant, EvidenceTransform};
use evprobe::probe::{auroc, LinearProbe, ProbeModel};
use evprobe::special::digamma;
use evprobe::trace::{
    fallback_label, Condition, DatasetManifest, DatasetReader, DatasetWriter, GenerationTrace, Matrix, TraceKey,
};
use evprobe::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Shape = 4,
    Data = 5,
    Schema = 6,
    NotFound = 7,
    Integrity = 8,
    Config = 9,
    Selection = 10,
    Training = 11,
    Metric = 12,
    MethodUnavailable = 13,
    Io = 14,
    Panic = 15,
}

impl From<&Error> for EvpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => EvpStatus::Domain,
            Error::Shape(_) => EvpStatus::Shape,
            Error::Data(_) => EvpStatus::Data,
            Error::Schema(_) | Error::Json(_) => EvpStatus::Schema,
            Error::NotFound(_) => EvpStatus::NotFound,
            Error::Integrity(_) => EvpStatus::Integrity,
            Error::Config(_) => EvpStatus::Config,
            Error::Selection(_) => EvpStatus::Selection,
            Error::Training(_) => EvpStatus::Training,
            Error::Metric(_) => EvpStatus::Metric,
            Error::MethodUnavailable(_) => EvpStatus::MethodUnavailable,
            Error::Io(_) => EvpStatus::Io,
        }
    }
}

/// Uncertainty of one generated token.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EvpTokenScores {
    pub au: f64,
    pub eu: f64,
    pub reliability: f64,
}

/// Borrowed view of one generation, laid out as the extractor produces it.
///
/// `topk_ids` and `topk_logits` hold `n_tokens * k_store` values row-major,
/// with `k_store` taken from the manifest. `hidden[i]` points to the
/// `n_tokens * hidden_dim` block for `layer_indices[i]`.
#[repr(C)]
pub struct EvpTraceView {
    pub question_id: *const c_char,
    /// 0 = WOC, 1 = WCC, 2 = WIC.
    pub condition: u8,
    pub sample_index: u32,
    pub n_tokens: usize,
    pub token_ids: *const u32,
    pub chosen_logprobs: *const f32,
    pub topk_ids: *const u32,
    pub topk_logits: *const f32,
    pub n_layers: usize,
    pub layer_indices: *const u32,
    pub hidden: *const *const f32,
    pub has_p_true: bool,
    pub p_true: f64,
    pub response_text: *const c_char,
}

pub struct EvpDataset(DatasetReader);

pub struct EvpWriter(DatasetWriter);

pub struct EvpProbe(LinearProbe);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(EvpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(EvpStatus::from(&e), e.to_string())
    }
}

type Res<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> Res<()>) -> EvpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EvpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EvpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(EvpStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(EvpStatus::InvalidArgument, msg.into())
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn array<'a, T>(p: *const T, n: usize, what: &str) -> Res<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

fn condition(c: u8) -> Res<Condition> {
    Condition::ALL.get(usize::from(c)).copied().ok_or_else(|| invalid(format!("condition {c} is not 0, 1 or 2")))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn evp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn evp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn evp_digamma(x: f64, out: *mut f64) -> EvpStatus {
    guard(|| {
        *self::out(out, "out")? = digamma(x)?;
        Ok(())
    })
}

/// Scores one token from its first `k_evidence` of `k_store` descending top
/// logits (relu evidence).
///
/// # Safety
/// `topk_logits` must hold `k_store` values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn evp_token_scores(
    topk_logits: *const f32,
    k_store: usize,
    k_evidence: usize,
    out: *mut EvpTokenScores,
) -> EvpStatus {
    guard(|| {
        let logits = array(topk_logits, k_store, "topk_logits")?;
        let s = score_token(logits, k_evidence, EvidenceTransform::Relu, AuVariant::Evidence, 0.0)?;
        *self::out(out, "out")? = EvpTokenScores {
            au: s.au,
            eu: s.eu,
            reliability: s.reliability,
        };
        Ok(())
    })
}

/// AUROC of `scores` against 0/1 `labels`; nonzero label bytes count as positive.
///
/// # Safety
/// Both arrays must hold `n` values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn evp_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> EvpStatus {
    guard(|| {
        let s = array(scores, n, "scores")?;
        let l: Vec<bool> = array(labels, n, "labels")?.iter().map(|&b| b != 0).collect();
        *self::out(out, "out")? = auroc(s, &l)?;
        Ok(())
    })
}

/// Judges a response against the gold answer without an LLM judge and
/// returns the label as one JSON line (free with [`evp_string_free`]).
/// `out_z` may be null.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_json` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn evp_fallback_label(
    question_id: *const c_char,
    condition: u8,
    sample_index: u32,
    response_text: *const c_char,
    gold_answer: *const c_char,
    theta: f64,
    out_z: *mut u8,
    out_json: *mut *mut c_char,
) -> EvpStatus {
    guard(|| {
        let out_json = out(out_json, "out_json")?;
        let key = TraceKey::new(string(question_id, "question_id")?, self::condition(condition)?, sample_index);
        if !(0.0..=1.0).contains(&theta) {
            return Err(invalid(format!("theta {theta} outside [0, 1]")));
        }
        let label = fallback_label(key, string(response_text, "response_text")?, string(gold_answer, "gold_answer")?, theta);
        let json = serde_json::to_string(&label).map_err(Error::from)?;
        if let Some(z) = out_z.as_mut() {
            *z = label.z;
        }
        *out_json = CString::new(json).map_err(|_| invalid("label JSON contains NUL"))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn evp_dataset_open(path: *const c_char, out: *mut *mut EvpDataset) -> EvpStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let reader = DatasetReader::open(string(path, "path")?)?;
        *out = Box::into_raw(Box::new(EvpDataset(reader)));
        Ok(())
    })
}

/// Number of traces, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn evp_dataset_len(ds: *const EvpDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Checks every record checksum and stores the number of bad records in
/// `out_findings`. The first finding becomes the thread's last error.
///
/// # Safety
/// `ds` must be a live handle; `out_findings` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn evp_dataset_validate(ds: *const EvpDataset, out_findings: *mut usize) -> EvpStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let findings = ds.0.check_all();
        *out(out_findings, "out_findings")? = findings.len();
        if let Some((entry, e)) = findings.first() {
            set_error(format!("{}: {e}", entry.key()));
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evp_dataset_free(ds: *mut EvpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Starts a dataset from a JSON manifest (`model_name`, `k_store`,
/// `layer_indices`, `hidden_dim`, `m_samples`, optional `metadata`).
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn evp_writer_create(
    path: *const c_char,
    manifest_json: *const c_char,
    out: *mut *mut EvpWriter,
) -> EvpStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let mut value: serde_json::Value = serde_json::from_str(string(manifest_json, "manifest_json")?).map_err(Error::from)?;
        if let Some(obj) = value.as_object_mut() {
            obj.entry("format_version").or_insert(serde_json::json!(evprobe::trace::FORMAT_VERSION));
        }
        let manifest: DatasetManifest = serde_json::from_value(value).map_err(Error::from)?;
        let writer = DatasetWriter::create(string(path, "path")?, manifest)?;
        *out = Box::into_raw(Box::new(EvpWriter(writer)));
        Ok(())
    })
}

/// # Safety
/// `w` must be a live writer and every pointer in `trace` must satisfy the
/// sizes documented on [`EvpTraceView`].
#[no_mangle]
pub unsafe extern "C" fn evp_writer_append(w: *mut EvpWriter, trace: *const EvpTraceView) -> EvpStatus {
    guard(|| {
        let w = w.as_mut().ok_or_else(|| null("writer"))?;
        let v = trace.as_ref().ok_or_else(|| null("trace"))?;
        let m = w.0.manifest();
        let (t, k, d) = (v.n_tokens, m.k_store, m.hidden_dim);
        let layers = array(v.layer_indices, v.n_layers, "layer_indices")?;
        let blocks = array(v.hidden, v.n_layers, "hidden")?;
        let mut hidden = std::collections::BTreeMap::new();
        for (&l, &block) in layers.iter().zip(blocks) {
            hidden.insert(l, Matrix::new(t, d, array(block, t * d, "hidden block")?.to_vec())?);
        }
        let trace = GenerationTrace {
            question_id: string(v.question_id, "question_id")?.to_owned(),
            condition: condition(v.condition)?,
            sample_index: v.sample_index,
            response_token_ids: array(v.token_ids, t, "token_ids")?.to_vec(),
            chosen_logprobs: array(v.chosen_logprobs, t, "chosen_logprobs")?.to_vec(),
            topk_token_ids: array(v.topk_ids, t * k, "topk_ids")?.to_vec(),
            topk_logits: Matrix::new(t, k, array(v.topk_logits, t * k, "topk_logits")?.to_vec())?,
            hidden_states: hidden,
            p_true: v.has_p_true.then_some(v.p_true),
            response_text: if v.response_text.is_null() {
                String::new()
            } else {
                string(v.response_text, "response_text")?.to_owned()
            },
        };
        w.0.append(&trace)?;
        Ok(())
    })
}

/// Writes the manifest and closes the file. Consumes the handle, also on
/// failure.
///
/// # Safety
/// `w` must be a live writer; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn evp_writer_finish(w: *mut EvpWriter) -> EvpStatus {
    guard(|| {
        if w.is_null() {
            return Err(null("writer"));
        }
        Box::from_raw(w).0.finish()?;
        Ok(())
    })
}

/// Abandons an unfinished writer.
///
/// # Safety
/// `w` must be null or a writer not yet finished or freed.
#[no_mangle]
pub unsafe extern "C" fn evp_writer_free(w: *mut EvpWriter) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Loads a probe from one `probes.jsonl` line or a bare probe object.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn evp_probe_from_json(json: *const c_char, out: *mut *mut EvpProbe) -> EvpStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let text = string(json, "json")?;
        let probe = match serde_json::from_str::<ProbeModel>(text) {
            Ok(m) => m.probe,
            Err(_) => serde_json::from_str::<LinearProbe>(text).map_err(Error::from)?,
        };
        *out = Box::into_raw(Box::new(EvpProbe(probe)));
        Ok(())
    })
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn evp_probe_dim(p: *const EvpProbe) -> usize {
    p.as_ref().map_or(0, |p| p.0.weights.len())
}

/// Probability that the response behind `features` is correct.
///
/// # Safety
/// `features` must hold `d` values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn evp_probe_predict(p: *const EvpProbe, features: *const f64, d: usize, out: *mut f64) -> EvpStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("probe"))?;
        *self::out(out, "out")? = p.0.predict(array(features, d, "features")?)?;
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evp_probe_free(p: *mut EvpProbe) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}
