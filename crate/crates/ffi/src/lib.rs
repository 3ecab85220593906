//! C ABI over the `mmie` crate.
//!
//! Every function returns an [`MmieStatus`]; on failure the message is
//! available from [`mmie_last_error`] on the same thread. Models are opaque
//! handles released with [`mmie_model_free`]; strings returned by the library
//! are released with [`mmie_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mmie::autograd::Graph;
use mmie::config::RunConfig;
use mmie::heads::crf::CrfScores;
use mmie::intrafusion::{kl_divergence, GaussianParams};
use mmie::model::{Model, Prediction, TaskHead};
use mmie::synthgen::{read_corpus, Sample};
use mmie::tensor::Tensor;
use mmie::train::{evaluate, load_model};
use mmie::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmieStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Parse = 5,
    Checkpoint = 6,
    NonFinite = 7,
    Io = 8,
    Panic = 9,
}

/// A loaded model.
pub struct MmieModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MmieStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => MmieStatus::Config,
            Error::Shape(_) => MmieStatus::Shape,
            Error::Invalid(_) => MmieStatus::InvalidArgument,
            Error::Parse { .. } => MmieStatus::Parse,
            Error::Checkpoint(_) => MmieStatus::Checkpoint,
            Error::NonFinite(_) => MmieStatus::NonFinite,
            Error::Io { .. } => MmieStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("NULs removed"));
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmieStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            MmieStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(Some(msg));
            status
        }
        Err(_) => {
            set_last_error(Some("internal panic".into()));
            MmieStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MmieStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MmieStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const MmieModel) -> Result<&'a MmieModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

struct CrfInputs {
    emissions: Tensor,
    transitions: Tensor,
    start: Vec<f64>,
    end: Vec<f64>,
}

unsafe fn crf_inputs(
    emissions: *const f64,
    n: usize,
    num_tags: usize,
    transitions: *const f64,
    start: *const f64,
    end: *const f64,
) -> Result<CrfInputs, Failure> {
    let cells = n
        .checked_mul(num_tags)
        .ok_or_else(|| Failure(MmieStatus::InvalidArgument, "emission size overflows".into()))?;
    let square = num_tags
        .checked_mul(num_tags)
        .ok_or_else(|| Failure(MmieStatus::InvalidArgument, "transition size overflows".into()))?;
    Ok(CrfInputs {
        emissions: Tensor::from_vec(n, num_tags, slice(emissions, cells, "emissions")?.to_vec()),
        transitions: Tensor::from_vec(num_tags, num_tags, slice(transitions, square, "transitions")?.to_vec()),
        start: slice(start, num_tags, "start")?.to_vec(),
        end: slice(end, num_tags, "end")?.to_vec(),
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmie_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mmie_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Negative log-likelihood of `tags` under a linear-chain CRF.
///
/// `emissions` is `n x num_tags` and `transitions` is `num_tags x num_tags`
/// (from row, to column), both row-major; `start`, `end` and `tags` hold
/// `num_tags`, `num_tags` and `n` entries.
///
/// # Safety
/// Every pointer must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mmie_crf_nll(
    emissions: *const f64,
    n: usize,
    num_tags: usize,
    transitions: *const f64,
    start: *const f64,
    end: *const f64,
    tags: *const usize,
    out_nll: *mut f64,
) -> MmieStatus {
    guard(|| {
        let out = out_ref(out_nll, "out_nll")?;
        let c = crf_inputs(emissions, n, num_tags, transitions, start, end)?;
        let tags = slice(tags, n, "tags")?;
        *out = CrfScores::new(&c.emissions, &c.transitions, &c.start, &c.end)?.nll(tags)?;
        Ok(())
    })
}

/// Highest-scoring tag path (ties go to the lowest tag id) and its score.
/// Inputs are laid out as in [`mmie_crf_nll`]; `out_tags` receives `n` ids.
///
/// # Safety
/// Every pointer must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mmie_crf_viterbi(
    emissions: *const f64,
    n: usize,
    num_tags: usize,
    transitions: *const f64,
    start: *const f64,
    end: *const f64,
    out_tags: *mut usize,
    out_score: *mut f64,
) -> MmieStatus {
    guard(|| {
        if out_tags.is_null() {
            return Err(null("out_tags"));
        }
        let score = out_ref(out_score, "out_score")?;
        let c = crf_inputs(emissions, n, num_tags, transitions, start, end)?;
        let (path, s) = CrfScores::new(&c.emissions, &c.transitions, &c.start, &c.end)?.viterbi();
        std::slice::from_raw_parts_mut(out_tags, n).copy_from_slice(&path);
        *score = s;
        Ok(())
    })
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians of dimension `k`.
///
/// # Safety
/// The four parameter pointers must each hold `k` values.
#[no_mangle]
pub unsafe extern "C" fn mmie_gaussian_kl(
    mean_p: *const f64,
    logvar_p: *const f64,
    mean_q: *const f64,
    logvar_q: *const f64,
    k: usize,
    out_kl: *mut f64,
) -> MmieStatus {
    guard(|| {
        let out = out_ref(out_kl, "out_kl")?;
        let p = GaussianParams {
            mean: slice(mean_p, k, "mean_p")?.to_vec(),
            logvar: slice(logvar_p, k, "logvar_p")?.to_vec(),
        };
        let q = GaussianParams {
            mean: slice(mean_q, k, "mean_q")?.to_vec(),
            logvar: slice(logvar_q, k, "logvar_q")?.to_vec(),
        };
        *out = kl_divergence(&p, &q)?;
        Ok(())
    })
}

/// Loads the checkpoint written by `mmie train` for the run described by the
/// config file. On success `*out_model` owns a handle.
///
/// # Safety
/// Paths must be NUL-terminated; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmie_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out_model: *mut *mut MmieModel,
) -> MmieStatus {
    guard(|| {
        let out = out_ref(out_model, "out_model")?;
        *out = ptr::null_mut();
        let cfg = RunConfig::load(&path(config_path, "config_path")?, None)?;
        let model = load_model(&cfg, &path(checkpoint_path, "checkpoint_path")?)?;
        *out = Box::into_raw(Box::new(MmieModel { model }));
        Ok(())
    })
}

/// Releases a model handle; NULL is ignored.
///
/// # Safety
/// `model` must come from [`mmie_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmie_model_free(model: *mut MmieModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output labels: BIO tags for tagging models, relation classes otherwise.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmie_model_num_labels(model: *const MmieModel, out_count: *mut usize) -> MmieStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(out_count, "out_count")? = match &m.model.arch.head {
            TaskHead::Ner { tags, .. } => tags.num_tags(),
            TaskHead::Re { relations, .. } => relations.len(),
        };
        Ok(())
    })
}

fn load_samples(corpus: &std::path::Path) -> Result<Vec<Sample>, Failure> {
    let samples = read_corpus(corpus)?;
    if samples.is_empty() {
        return Err(Failure(MmieStatus::InvalidArgument, format!("{} holds no samples", corpus.display())));
    }
    Ok(samples)
}

/// Micro precision, recall and F1 of the model on a corpus file.
///
/// # Safety
/// `model` must be a live handle, `corpus_path` NUL-terminated and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn mmie_model_evaluate(
    model: *const MmieModel,
    corpus_path: *const c_char,
    out_precision: *mut f64,
    out_recall: *mut f64,
    out_f1: *mut f64,
) -> MmieStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (p, r, f) = (
            out_ref(out_precision, "out_precision")?,
            out_ref(out_recall, "out_recall")?,
            out_ref(out_f1, "out_f1")?,
        );
        let samples = load_samples(&path(corpus_path, "corpus_path")?)?;
        let report = evaluate(&m.model, &samples, 1)?;
        (*p, *r, *f) = (report.precision, report.recall, report.f1);
        Ok(())
    })
}

/// Predictions for every sample of a corpus file as a JSON array of
/// `{"id", "tags"}` or `{"id", "relation"}` objects. Free the string with
/// [`mmie_string_free`].
///
/// # Safety
/// `model` must be a live handle, `corpus_path` NUL-terminated and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn mmie_model_predict_json(
    model: *const MmieModel,
    corpus_path: *const c_char,
    out_json: *mut *mut c_char,
) -> MmieStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out_ref(out_json, "out_json")?;
        *out = ptr::null_mut();
        let samples = load_samples(&path(corpus_path, "corpus_path")?)?;
        let mut rows = Vec::with_capacity(samples.len());
        for s in &samples {
            let mut g = Graph::new(&m.model.params);
            let pred = m.model.arch.predict(&mut g, &[s])?.pop().expect("one prediction per sample");
            let row = match (pred, &m.model.arch.head) {
                (Prediction::Tags(tags), TaskHead::Ner { tags: set, .. }) => {
                    let names: Vec<String> = tags.iter().map(|&t| set.name(t)).collect::<Result<_, _>>()?;
                    serde_json::json!({"id": s.id, "tags": names})
                }
                (Prediction::Relation(r), TaskHead::Re { relations, .. }) => {
                    serde_json::json!({"id": s.id, "relation": relations.name(r)})
                }
                _ => return Err(Failure(MmieStatus::InvalidArgument, "prediction kind does not match the model".into())),
            };
            rows.push(row);
        }
        let text = serde_json::to_string(&rows).expect("JSON values serialize");
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library; NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmie_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
