//! C ABI over the crocodile library.
//!
//! Every fallible function returns a [`CrocStatus`]. On failure the message is
//! kept per thread and read back with [`croc_last_error_message`]. Objects are
//! opaque handles created by `*_load` / `*_parse` and released by `*_free`.
//! Output buffers are caller-allocated; their length is passed alongside and a
//! short buffer yields [`CrocStatus::BufferTooSmall`] without writing.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use candle_core::{DType, Device, Tensor};
use crocodile::error::Error;
use crocodile::eval;
use crocodile::model::{load_checkpoint, Branch, EmbeddingKind, FeatureEmbedding, Network};
use crocodile::prior::{self, CausalGraph, GtLevels};

/// Result codes shared by every function of the API.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    UndefinedMetric = 4,
    Io = 5,
    Checkpoint = 6,
    Config = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

/// A loaded model.
pub struct CrocModel {
    net: Network,
}

/// A parsed causal graph over findings.
pub struct CrocCausalGraph {
    graph: CausalGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CrocStatus {
    match e {
        Error::Shape { .. } => CrocStatus::ShapeMismatch,
        Error::UndefinedMetric(_) => CrocStatus::UndefinedMetric,
        Error::Io { .. } => CrocStatus::Io,
        Error::Checkpoint(_) => CrocStatus::Checkpoint,
        Error::Config(_) => CrocStatus::Config,
        Error::Contract(_) | Error::Ingestion { .. } => CrocStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::Tensor(_) | Error::Json(_) => CrocStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (CrocStatus, String)>) -> CrocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CrocStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CrocStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (CrocStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CrocStatus, String) {
    (CrocStatus::NullPointer, format!("`{what}` is NULL"))
}

fn invalid(msg: impl Into<String>) -> (CrocStatus, String) {
    (CrocStatus::InvalidArgument, msg.into())
}

fn check_out_len(needed: usize, got: usize) -> Result<(), (CrocStatus, String)> {
    if got < needed {
        Err((
            CrocStatus::BufferTooSmall,
            format!("output buffer holds {got} values, {needed} needed"),
        ))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CrocStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (CrocStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (CrocStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or NULL if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn croc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn croc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into a new model handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn croc_model_load(path: *const c_char, out: *mut *mut CrocModel) -> CrocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let ckpt = load_checkpoint(path).map_err(lib_err)?;
        let net = Network::from_checkpoint(&ckpt).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CrocModel { net }));
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`croc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn croc_model_free(model: *mut CrocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of disease classes, image channels and image side length.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn croc_model_dims(
    model: *const CrocModel,
    n_classes: *mut usize,
    channels: *mut usize,
    image_size: *mut usize,
) -> CrocStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n_classes.is_null() || channels.is_null() || image_size.is_null() {
            return Err(null("output"));
        }
        let cfg = m.net.config();
        *n_classes = cfg.n_c;
        *channels = cfg.channels;
        *image_size = cfg.image_size;
        Ok(())
    })
}

/// Disease probabilities for `n_images` images laid out as
/// `n_images × channels × size × size` floats in `[0, 1]`. Writes
/// `n_images × n_classes` values to `out`. A nonzero `use_intervened` scores
/// with the intervened head.
///
/// # Safety
/// `images` must hold `images_len` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn croc_model_predict(
    model: *const CrocModel,
    images: *const f32,
    images_len: usize,
    n_images: usize,
    use_intervened: i32,
    out: *mut f32,
    out_len: usize,
) -> CrocStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = m.net.config();
        if n_images == 0 {
            return Err(invalid("n_images must be positive"));
        }
        let per = cfg.channels * cfg.image_size * cfg.image_size;
        if images_len != n_images * per {
            return Err((
                CrocStatus::ShapeMismatch,
                format!("{images_len} image values for {n_images} images of {per}"),
            ));
        }
        check_out_len(n_images * cfg.n_c, out_len)?;
        let pixels = slice(images, images_len, "images")?;
        let out = slice_mut(out, out_len, "out")?;
        let t = Tensor::from_slice(pixels, (n_images, cfg.channels, cfg.image_size, cfg.image_size), &Device::Cpu)
            .and_then(|t| t.to_dtype(m.net.dtype()))
            .map_err(|e| lib_err(e.into()))?;
        let logits = m.net.disease_logits(&t, use_intervened != 0).map_err(lib_err)?;
        let probs = eval::sigmoid_rows(&logits).map_err(lib_err)?;
        for (dst, v) in out.iter_mut().zip(probs.iter().flatten()) {
            *dst = *v as f32;
        }
        Ok(())
    })
}

/// Parses a causal graph from text: one finding name per line, then edges as
/// `parent -> child`; `#` starts a comment.
///
/// # Safety
/// `text` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn croc_graph_parse(text: *const c_char, out: *mut *mut CrocCausalGraph) -> CrocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let graph = CausalGraph::parse(c_str(text, "text")?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CrocCausalGraph { graph }));
        Ok(())
    })
}

/// Releases a graph handle. NULL is ignored.
///
/// # Safety
/// `graph` must come from [`croc_graph_parse`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn croc_graph_free(graph: *mut CrocCausalGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Number of findings in the graph.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn croc_graph_num_nodes(graph: *const CrocCausalGraph, out: *mut usize) -> CrocStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = g.graph.nodes.len();
        Ok(())
    })
}

/// Ground-truth causality map, row-major `n × n`: `hi` where the column finding
/// is an ancestor of the row finding, `lo` for the reverse, `base` elsewhere.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn croc_graph_gt_map(
    graph: *const CrocCausalGraph,
    hi: f64,
    lo: f64,
    base: f64,
    out: *mut f64,
    out_len: usize,
) -> CrocStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        let n = g.graph.nodes.len();
        check_out_len(n * n, out_len)?;
        let map = prior::build_gt_map(&g.graph, GtLevels { hi, lo, base }).map_err(lib_err)?;
        let out = slice_mut(out, out_len, "out")?;
        for (dst, v) in out.iter_mut().zip(map.values.iter().flatten()) {
            *dst = *v;
        }
        Ok(())
    })
}

/// Per-sample causality maps from disease-causal embeddings laid out as
/// `batch × n × h`. With nonzero `normalize` the embeddings are first clamped
/// at 0 and divided by their maximum. Writes `batch × n × n` values.
///
/// # Safety
/// `q` must hold `batch·n·h` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn croc_causality_map(
    q: *const f64,
    batch: usize,
    n: usize,
    h: usize,
    normalize: i32,
    out: *mut f64,
    out_len: usize,
) -> CrocStatus {
    guard(|| {
        if batch == 0 || n == 0 || h == 0 {
            return Err(invalid("batch, n and h must be positive"));
        }
        check_out_len(batch * n * n, out_len)?;
        let values = slice(q, batch * n * h, "q")?;
        let t = Tensor::from_slice(values, (batch, n, h), &Device::Cpu).map_err(|e| lib_err(e.into()))?;
        let mut emb = FeatureEmbedding::new(t, Branch::Disease, EmbeddingKind::Causal).map_err(lib_err)?;
        if normalize != 0 {
            emb = prior::normalize_embeddings(&emb).map_err(lib_err)?;
        }
        let maps = prior::causality_map(&emb)
            .and_then(|m| Ok(m.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?))
            .map_err(lib_err)?;
        slice_mut(out, out_len, "out")?[..maps.len()].copy_from_slice(&maps);
        Ok(())
    })
}

unsafe fn metric(
    f: fn(&[f64], &[u8]) -> crocodile::Result<f64>,
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> CrocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice(scores, n, "scores")?;
        let y = slice(labels, n, "labels")?;
        *out = f(s, y).map_err(lib_err)?;
        Ok(())
    })
}

/// Area under the ROC curve with ties counted one half.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn croc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> CrocStatus {
    metric(eval::auc, scores, labels, n, out)
}

/// Step-interpolated average precision.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn croc_average_precision(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> CrocStatus {
    metric(eval::average_precision, scores, labels, n, out)
}

/// Relative drop in percent, `100 · (id − ood) / id`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn croc_drop(id_mean: f64, ood_mean: f64, out: *mut f64) -> CrocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = eval::drop(id_mean, ood_mean).map_err(lib_err)?;
        Ok(())
    })
}
