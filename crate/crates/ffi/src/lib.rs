//! C ABI over `prage-core`.
//!
//! Every fallible call returns a [`PrageStatus`]; on failure the message is
//! available from [`prage_last_error`] on the same thread until the next
//! failing call. Handles are opaque and must be released with their `_free`
//! function. Strings returned to the caller are freed with
//! [`prage_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prage::agreement::alpha_nominal;
use prage::embed::{Embedder, HashingEmbedder};
use prage::generator::{render_prompt, PromptTemplate};
use prage::metrics::{MetricKind, Scorer};
use prage::retriever::VectorIndex;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrageStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(PrageStatus, String);

impl From<prage::Error> for Failure {
    fn from(e: prage::Error) -> Self {
        let status = match &e {
            prage::Error::Io { .. } => PrageStatus::Io,
            prage::Error::IndexFormat(_) | prage::Error::Json(_) => PrageStatus::Format,
            _ => PrageStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PrageStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PrageStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrageStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside prage");
            PrageStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PrageStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PrageStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn str_array(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(Failure(PrageStatus::NullPointer, format!("{name} is null")));
    }
    (0..n)
        .map(|i| str_arg(*p.add(i), &format!("{name}[{i}]")).map(str::to_string))
        .collect()
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(PrageStatus::NullPointer, format!("{name} is null")))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("output contains a NUL byte"))
}

/// Message of the last failure on this thread, or null. Owned by the
/// library; valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn prage_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` is null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prage_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Hashing embedder handle.
pub struct PrageEmbedder(HashingEmbedder);

/// # Safety
/// `name` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prage_embedder_new(
    name: *const c_char,
    dim: usize,
    out: *mut *mut PrageEmbedder,
) -> PrageStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let name = str_arg(name, "name")?;
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        *out = Box::into_raw(Box::new(PrageEmbedder(HashingEmbedder::new(name, dim))));
        Ok(())
    })
}

/// # Safety
/// `e` is null or a handle from [`prage_embedder_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prage_embedder_free(e: *mut PrageEmbedder) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Writes the unit-length embedding of `text` into `buf`, which must hold
/// `len` floats with `len` equal to the embedder dimension.
///
/// # Safety
/// `e` is a live handle; `buf` points to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn prage_embedder_embed(
    e: *const PrageEmbedder,
    text: *const c_char,
    buf: *mut f32,
    len: usize,
) -> PrageStatus {
    guard(|| {
        let e = e
            .as_ref()
            .ok_or_else(|| Failure(PrageStatus::NullPointer, "embedder is null".into()))?;
        let text = str_arg(text, "text")?;
        if buf.is_null() {
            return Err(Failure(PrageStatus::NullPointer, "buf is null".into()));
        }
        if len != e.0.dim() {
            return Err(invalid(format!(
                "buffer holds {len} floats, dimension is {}",
                e.0.dim()
            )));
        }
        let v = e.0.embed_one(text);
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(&v.values);
        Ok(())
    })
}

/// Exhaustive cosine index handle.
pub struct PrageIndex(VectorIndex);

/// Embeds `n` texts with `e` and indexes them under `refs`.
///
/// # Safety
/// `refs` and `texts` point to `n` NUL-terminated strings each; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn prage_index_build(
    e: *const PrageEmbedder,
    refs: *const *const c_char,
    texts: *const *const c_char,
    n: usize,
    out: *mut *mut PrageIndex,
) -> PrageStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let e = e
            .as_ref()
            .ok_or_else(|| Failure(PrageStatus::NullPointer, "embedder is null".into()))?;
        let refs = str_array(refs, n, "refs")?;
        let texts = str_array(texts, n, "texts")?;
        let entries = refs
            .into_iter()
            .zip(texts.iter().map(|t| e.0.embed_one(t)))
            .collect();
        let index = VectorIndex::from_entries(e.0.dim(), entries)?;
        *out = Box::into_raw(Box::new(PrageIndex(index)));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prage_index_load(
    path: *const c_char,
    out: *mut *mut PrageIndex,
) -> PrageStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = str_arg(path, "path")?;
        *out = Box::into_raw(Box::new(PrageIndex(VectorIndex::load(Path::new(path))?)));
        Ok(())
    })
}

/// # Safety
/// `idx` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn prage_index_save(
    idx: *const PrageIndex,
    path: *const c_char,
) -> PrageStatus {
    guard(|| {
        let idx = idx
            .as_ref()
            .ok_or_else(|| Failure(PrageStatus::NullPointer, "index is null".into()))?;
        idx.0.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `idx` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prage_index_len(idx: *const PrageIndex) -> usize {
    idx.as_ref().map_or(0, |i| i.0.len())
}

/// # Safety
/// `idx` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prage_index_free(idx: *mut PrageIndex) {
    if !idx.is_null() {
        drop(Box::from_raw(idx));
    }
}

/// Top-`k` search for `text`. Writes up to `k` hits, best first, as
/// positions into the index (see [`prage_index_ref`]) and cosine scores;
/// the hit count goes to `n_out`.
///
/// # Safety
/// `idx` and `e` are live handles; `positions` and `scores` hold `k`
/// writable elements; `n_out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prage_index_search(
    idx: *const PrageIndex,
    e: *const PrageEmbedder,
    text: *const c_char,
    k: usize,
    positions: *mut usize,
    scores: *mut f64,
    n_out: *mut usize,
) -> PrageStatus {
    guard(|| {
        let n_out = out_ptr(n_out, "n_out")?;
        let idx = idx
            .as_ref()
            .ok_or_else(|| Failure(PrageStatus::NullPointer, "index is null".into()))?;
        let e = e
            .as_ref()
            .ok_or_else(|| Failure(PrageStatus::NullPointer, "embedder is null".into()))?;
        let text = str_arg(text, "text")?;
        if k > 0 && (positions.is_null() || scores.is_null()) {
            return Err(Failure(
                PrageStatus::NullPointer,
                "output buffers are null".into(),
            ));
        }
        let hits = idx.0.search(&e.0.embed_one(text), k)?;
        for (i, h) in hits.iter().enumerate() {
            *positions.add(i) = idx
                .0
                .refs()
                .iter()
                .position(|r| *r == h.chunk_ref)
                .expect("hit comes from the index");
            *scores.add(i) = h.score;
        }
        *n_out = hits.len();
        Ok(())
    })
}

/// Reference stored at `pos`, or null when out of range. Free with
/// [`prage_string_free`].
///
/// # Safety
/// `idx` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prage_index_ref(idx: *const PrageIndex, pos: usize) -> *mut c_char {
    idx.as_ref()
        .and_then(|i| i.0.refs().get(pos).cloned())
        .and_then(|r| CString::new(r).ok())
        .map_or(ptr::null_mut(), CString::into_raw)
}

/// Best-reference score: `metric` (e.g. "bleu", "rougeL") of `candidate`
/// against each of the `n` references, maximized. ROUGE values are F1.
///
/// # Safety
/// String arguments are NUL-terminated; `references` holds `n` of them;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prage_metric_best(
    metric: *const c_char,
    candidate: *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> PrageStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let metric: MetricKind = str_arg(metric, "metric")?.parse().map_err(invalid)?;
        if !MetricKind::LEXICAL.contains(&metric) {
            return Err(invalid(format!(
                "{metric} is not available through the C interface"
            )));
        }
        let candidate = str_arg(candidate, "candidate")?;
        let refs = str_array(references, n, "references")?;
        if refs.is_empty() {
            return Err(invalid("at least one reference is required"));
        }
        let rows = Scorer::lexical(&[metric]).score_references(candidate, &refs)?;
        *out = rows
            .iter()
            .map(|r| r[&metric])
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(())
    })
}

/// Nominal Krippendorff's alpha. `values` is a row-major `n_units` by
/// `n_coders` matrix; entries equal to `missing` are absent ratings.
///
/// # Safety
/// `values` holds `n_units * n_coders` integers; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prage_alpha_nominal(
    values: *const i32,
    n_units: usize,
    n_coders: usize,
    missing: i32,
    out: *mut f64,
) -> PrageStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let total = n_units
            .checked_mul(n_coders)
            .ok_or_else(|| invalid("matrix size overflows"))?;
        if total == 0 {
            return Err(invalid("empty rating matrix"));
        }
        if values.is_null() {
            return Err(Failure(PrageStatus::NullPointer, "values is null".into()));
        }
        let flat = std::slice::from_raw_parts(values, total);
        let units: Vec<Vec<i32>> = flat
            .chunks(n_coders)
            .map(|row| row.iter().copied().filter(|&v| v != missing).collect())
            .collect();
        *out = alpha_nominal(&units)?.value;
        Ok(())
    })
}

/// Renders the built-in French prompt for `term`. With `n_context == 0` the
/// base prompt is used, otherwise the retrieval prompt with the given
/// context items in rank order. `char_budget == 0` means unlimited.
///
/// # Safety
/// String arguments are NUL-terminated; `context` holds `n_context` of
/// them; `out` is writable. Free the result with [`prage_string_free`].
#[no_mangle]
pub unsafe extern "C" fn prage_render_prompt(
    term: *const c_char,
    context: *const *const c_char,
    n_context: usize,
    char_budget: usize,
    out: *mut *mut c_char,
) -> PrageStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let term = str_arg(term, "term")?;
        let items = str_array(context, n_context, "context")?;
        let budget = (char_budget > 0).then_some(char_budget);
        let rendered = if items.is_empty() {
            render_prompt(&PromptTemplate::base_fr(), term, None, budget)?
        } else {
            render_prompt(&PromptTemplate::rag_fr(), term, Some(&items), budget)?
        };
        *out = owned_string(rendered.text)?;
        Ok(())
    })
}
