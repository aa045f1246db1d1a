//! C ABI for the `caprel` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`CaprelStatus`]; on failure a description is available from
//! [`caprel_last_error`] on the same thread until the next failing call.
//! Strings are NUL-terminated UTF-8. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use caprel::cli::load_corpus;
use caprel::data::{generate_synthetic, Corpus, Split, SynthSpec};
use caprel::model::{evaluate, load_checkpoint, save_checkpoint, train, Model, ModelConfig, TrainConfig};
use caprel::routing::{route_traced, CapsuleSequence, RoutingParams, RoutingSpec};
use caprel::tensor::{ParamStore, Tensor};
use caprel::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaprelStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Index = 4,
    NonFinite = 5,
    Empty = 6,
    Config = 7,
    Parse = 8,
    Integrity = 9,
    NotFound = 10,
    Divergence = 11,
    Unsupported = 12,
    Io = 13,
    Panic = 14,
}

impl From<&Error> for CaprelStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => CaprelStatus::Dimension,
            Error::Index(_) => CaprelStatus::Index,
            Error::NonFinite(_) => CaprelStatus::NonFinite,
            Error::Empty(_) => CaprelStatus::Empty,
            Error::Config(_) => CaprelStatus::Config,
            Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => CaprelStatus::Parse,
            Error::Integrity { .. } => CaprelStatus::Integrity,
            Error::NotFound(_) => CaprelStatus::NotFound,
            Error::Divergence { .. } => CaprelStatus::Divergence,
            Error::Unsupported(_) => CaprelStatus::Unsupported,
            Error::Io(_) => CaprelStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CaprelStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(CaprelStatus::InvalidArgument, message.into())
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CaprelStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CaprelStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CaprelStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure(CaprelStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| invalid(format!("`{name}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| Failure(CaprelStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn mut_arg<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| Failure(CaprelStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(Failure(CaprelStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_slice<'a>(ptr: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if ptr.is_null() {
        return Err(Failure(CaprelStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn json_or_default<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> Result<T, Failure> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| Failure(CaprelStatus::Config, e.to_string())),
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn caprel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn caprel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- corpora ----

/// A loaded set of relation-extraction instances.
pub struct CaprelCorpus {
    corpus: Corpus,
}

/// Loads a corpus (`.jsonl`, TACRED `.json` or Conll04), guessing the format
/// from the extension.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caprel_corpus_load(path: *const c_char, out: *mut *mut CaprelCorpus) -> CaprelStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = mut_arg(out, "out")?;
        let corpus = load_corpus(Path::new(path), None, Split::Test)?;
        *out = Box::into_raw(Box::new(CaprelCorpus { corpus }));
        Ok(())
    })
}

/// Generates a synthetic corpus. `spec_json` holds generator settings (NULL
/// for defaults); `split` is 0 train, 1 eval, 2 test.
///
/// # Safety
/// `spec_json` must be NULL or a valid C string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn caprel_corpus_synthetic(
    spec_json: *const c_char,
    split: u32,
    out: *mut *mut CaprelCorpus,
) -> CaprelStatus {
    guard(|| {
        let text = if spec_json.is_null() { None } else { Some(str_arg(spec_json, "spec_json")?) };
        let spec: SynthSpec = json_or_default(text)?;
        let out = mut_arg(out, "out")?;
        let split = match split {
            0 => Split::Train,
            1 => Split::Eval,
            2 => Split::Test,
            s => return Err(invalid(format!("unknown split {s}"))),
        };
        let corpus = generate_synthetic(&spec)?.split(split).clone();
        *out = Box::into_raw(Box::new(CaprelCorpus { corpus }));
        Ok(())
    })
}

/// Number of instances, or 0 for NULL.
///
/// # Safety
/// `corpus` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caprel_corpus_len(corpus: *const CaprelCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.corpus.len())
}

/// # Safety
/// `corpus` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn caprel_corpus_free(corpus: *mut CaprelCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

// ---- models ----

/// A relation classifier with its vocabulary and label set.
pub struct CaprelModel {
    model: Model,
    labels: Vec<CString>,
}

impl CaprelModel {
    fn wrap(model: Model) -> Box<Self> {
        let labels =
            model.relations.iter().map(|r| CString::new(r.replace('\0', " ")).expect("NULs replaced")).collect();
        Box::new(Self { model, labels })
    }
}

/// Builds an untrained model for `train`'s labels and vocabulary.
/// `config_json` is a model configuration (NULL: H3 head, Mix sentences).
///
/// # Safety
/// Pointers must be valid; `config_json` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn caprel_model_new(
    config_json: *const c_char,
    train: *const CaprelCorpus,
    seed: u64,
    out: *mut *mut CaprelModel,
) -> CaprelStatus {
    guard(|| {
        let config = if config_json.is_null() {
            ModelConfig::new("h3".parse()?, caprel::data::SentenceConfigKind::Mix)
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure(CaprelStatus::Config, e.to_string()))?
        };
        let train = ref_arg(train, "train")?;
        let out = mut_arg(out, "out")?;
        let model = Model::for_corpus(config, &train.corpus, seed)?;
        *out = Box::into_raw(CaprelModel::wrap(model));
        Ok(())
    })
}

/// Restores a model from a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caprel_model_load(path: *const c_char, out: *mut *mut CaprelModel) -> CaprelStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = mut_arg(out, "out")?;
        let ck = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(CaprelModel::wrap(ck.model));
        Ok(())
    })
}

/// Writes the model parameters (no optimizer state) to `path`.
///
/// # Safety
/// `model` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn caprel_model_save(model: *const CaprelModel, path: *const c_char) -> CaprelStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        save_checkpoint(Path::new(path), &model.model, None)?;
        Ok(())
    })
}

/// Trains in place. `config_json` holds training settings (NULL: defaults).
/// The mean loss of the final epoch is written to `final_loss` when it is
/// not NULL.
///
/// # Safety
/// `model` and `corpus` must be live handles; `config_json` and
/// `final_loss` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn caprel_model_train(
    model: *mut CaprelModel,
    corpus: *const CaprelCorpus,
    config_json: *const c_char,
    final_loss: *mut f64,
) -> CaprelStatus {
    guard(|| {
        let text = if config_json.is_null() { None } else { Some(str_arg(config_json, "config_json")?) };
        let cfg: TrainConfig = json_or_default(text)?;
        let model = mut_arg(model, "model")?;
        let corpus = ref_arg(corpus, "corpus")?;
        let outcome = train(&mut model.model, &corpus.corpus, &cfg, None)?;
        if let (Some(out), Some(last)) = (final_loss.as_mut(), outcome.trace.last()) {
            *out = last.loss;
        }
        Ok(())
    })
}

/// Number of relation labels the model predicts.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caprel_model_num_labels(model: *const CaprelModel) -> usize {
    model.as_ref().map_or(0, |m| m.labels.len())
}

/// Name of label `index`, owned by the model handle; NULL when out of range.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caprel_model_label(model: *const CaprelModel, index: usize) -> *const c_char {
    model.as_ref().and_then(|m| m.labels.get(index)).map_or(std::ptr::null(), |c| c.as_ptr())
}

/// Scores instance `index` of `corpus`: writes `num_labels` logits to
/// `logits` (capacity `capacity`) and the arg-max label to `label`.
///
/// # Safety
/// Handles must be live; `logits` must hold `capacity` doubles; `label`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn caprel_model_predict(
    model: *const CaprelModel,
    corpus: *const CaprelCorpus,
    index: usize,
    logits: *mut f64,
    capacity: usize,
    label: *mut usize,
) -> CaprelStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let corpus = ref_arg(corpus, "corpus")?;
        let inst = corpus
            .corpus
            .instances
            .get(index)
            .ok_or_else(|| Failure(CaprelStatus::Index, format!("instance {index} of {}", corpus.corpus.len())))?;
        let scores = model.model.forward(inst)?;
        if capacity < scores.len() {
            return Err(invalid(format!("logit buffer holds {capacity}, need {}", scores.len())));
        }
        out_slice(logits, scores.len(), "logits")?.copy_from_slice(&scores);
        let best = scores.iter().enumerate().fold(0, |best, (i, &s)| if s > scores[best] { i } else { best });
        *mut_arg(label, "label")? = best;
        Ok(())
    })
}

/// Scores against gold labels. Precision, recall and F1 are micro-averaged
/// over relations other than `no_relation`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CaprelMetrics {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Predicts every instance of `corpus` and scores the predictions.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn caprel_model_evaluate(
    model: *const CaprelModel,
    corpus: *const CaprelCorpus,
    out: *mut CaprelMetrics,
) -> CaprelStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let corpus = ref_arg(corpus, "corpus")?;
        let out = mut_arg(out, "out")?;
        let (m, _) = evaluate(&model.model, &corpus.corpus)?;
        *out = CaprelMetrics {
            micro_precision: m.micro_precision,
            micro_recall: m.micro_recall,
            micro_f1: m.micro_f1,
            macro_f1: m.macro_f1,
            accuracy: m.accuracy,
            n: m.n,
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn caprel_model_free(model: *mut CaprelModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- stateless routing ----

/// Routes `m` input capsules of width `d_in` (row-major) into `n_out`
/// capsules of width `d_out`. `weights` is `d_in × (n_out·d_out)` row-major,
/// output `j` owning columns `j·d_out..(j+1)·d_out`; `bias` has
/// `n_out·d_out` entries. Writes `n_out·d_out` values to `capsules` and the
/// final `m × n_out` credits to `credits` (may be NULL).
///
/// # Safety
/// Every non-NULL buffer must hold the number of doubles stated above.
#[no_mangle]
pub unsafe extern "C" fn caprel_route(
    inputs: *const f64,
    m: usize,
    d_in: usize,
    weights: *const f64,
    bias: *const f64,
    n_out: usize,
    d_out: usize,
    iterations: usize,
    capsules: *mut f64,
    credits: *mut f64,
) -> CaprelStatus {
    guard(|| {
        if m == 0 || d_in == 0 {
            return Err(invalid("routing needs at least one input capsule of positive width"));
        }
        let spec = RoutingSpec::new(n_out, d_out)?.with_iterations(iterations)?;
        let width = n_out * d_out;
        let x = Tensor::new(vec![m, d_in], slice_arg(inputs, m * d_in, "inputs")?.to_vec())?;
        let w = Tensor::new(vec![d_in, width], slice_arg(weights, d_in * width, "weights")?.to_vec())?;
        let b = Tensor::new(vec![1, width], slice_arg(bias, width, "bias")?.to_vec())?;
        let mut store = ParamStore::new();
        let params = RoutingParams { weights: store.add("weights", w), bias: store.add("bias", b), d_in };
        let (out, _) = route_traced(&CapsuleSequence::new(x)?, &params, &spec, &store)?;
        out_slice(capsules, width, "capsules")?.copy_from_slice(out.capsules.data());
        if !credits.is_null() {
            out_slice(credits, m * n_out, "credits")?.copy_from_slice(out.credits.data());
        }
        Ok(())
    })
}
