//! C interface to the deterministic parts of tap-core: answer metrics, the
//! PHOC encoder and the object/OCR relation classifier.
//!
//! Every function returns a [`TapStatus`]. On failure the message is kept per
//! thread and can be read with [`tap_last_error`]. Handles are opaque and must
//! be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tap_core::evaluation::{anls, cider, vqa_accuracy};
use tap_core::spatial::{classify_relation, BoundingBox, RelativePosition};
use tap_core::text::PhocEncoder;
use tap_core::TapError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    BufferTooSmall = 4,
    Io = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(TapStatus, String);

impl From<TapError> for Failure {
    fn from(e: TapError) -> Self {
        let status = match e {
            TapError::Io { .. } => TapStatus::Io,
            _ => TapStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TapStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TapStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TapStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(TapStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(TapStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn strings(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    non_null(p, what)?;
    (0..n).map(|i| string(*p.add(i), what)).collect()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn tap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Leave-one-out VQA accuracy of `pred` against `n` human answers (n >= 10).
///
/// # Safety
/// `pred` must be a NUL-terminated string, `answers` an array of `n` such
/// strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tap_vqa_accuracy(
    pred: *const c_char,
    answers: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> TapStatus {
    guard(|| {
        non_null(out, "out")?;
        let pred = string(pred, "pred")?;
        let answers = strings(answers, n, "answers")?;
        *out = vqa_accuracy(&pred, &answers)?;
        Ok(())
    })
}

/// ANLS of `pred` against `n` ground truths with the given threshold.
///
/// # Safety
/// As for [`tap_vqa_accuracy`].
#[no_mangle]
pub unsafe extern "C" fn tap_anls(
    pred: *const c_char,
    gts: *const *const c_char,
    n: usize,
    threshold: f64,
    out: *mut f64,
) -> TapStatus {
    guard(|| {
        non_null(out, "out")?;
        let pred = string(pred, "pred")?;
        let gts = strings(gts, n, "gts")?;
        *out = anls(&pred, &gts, threshold)?;
        Ok(())
    })
}

/// Relation of an OCR box to an object box, as its index in
/// On, Cover, Overlap, N, NE, E, SE, S, SW, W, NW, Unrelated.
/// Boxes are `[x1, y1, x2, y2]` in image-normalized coordinates.
///
/// # Safety
/// `obj` and `ocr` must point to four doubles each; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tap_classify_relation(obj: *const f64, ocr: *const f64, out: *mut u32) -> TapStatus {
    guard(|| {
        non_null(obj, "obj")?;
        non_null(ocr, "ocr")?;
        non_null(out, "out")?;
        let b = |p: *const f64| {
            let v = std::slice::from_raw_parts(p, 4);
            BoundingBox::new(v[0], v[1], v[2], v[3])
        };
        let rel = classify_relation(&b(obj)?, &b(ocr)?);
        *out = rel as u32;
        Ok(())
    })
}

/// Number of relation classes reported by [`tap_classify_relation`].
#[no_mangle]
pub extern "C" fn tap_relation_count() -> u32 {
    RelativePosition::COUNT as u32
}

pub struct TapPhoc(PhocEncoder);

/// Encoder with the bundled bigram list.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tap_phoc_new(out: *mut *mut TapPhoc) -> TapStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(TapPhoc(PhocEncoder::default())));
        Ok(())
    })
}

/// Encoder with a bigram list read from `path`, one bigram per line.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tap_phoc_from_file(path: *const c_char, out: *mut *mut TapPhoc) -> TapStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = string(path, "path")?;
        *out = Box::into_raw(Box::new(TapPhoc(PhocEncoder::from_file(Path::new(&path))?)));
        Ok(())
    })
}

/// Length of the vectors produced by `enc`, or 0 for a null handle.
///
/// # Safety
/// `enc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tap_phoc_dim(enc: *const TapPhoc) -> usize {
    enc.as_ref().map_or(0, |e| e.0.dim())
}

/// Writes the 0/1 PHOC bits of `word` into `buf`, which must hold at least
/// [`tap_phoc_dim`] bytes.
///
/// # Safety
/// `enc` must be a live handle, `word` a NUL-terminated string and `buf`
/// writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tap_phoc_encode(enc: *const TapPhoc, word: *const c_char, buf: *mut u8, len: usize) -> TapStatus {
    guard(|| {
        non_null(enc, "enc")?;
        non_null(buf, "buf")?;
        let word = string(word, "word")?;
        let v = (*enc).0.encode(&word);
        if len < v.len() {
            return Err(Failure(TapStatus::BufferTooSmall, format!("need {} bytes, got {len}", v.len())));
        }
        ptr::copy_nonoverlapping(v.bits().as_ptr(), buf, v.len());
        Ok(())
    })
}

/// # Safety
/// `enc` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tap_phoc_free(enc: *mut TapPhoc) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Collects candidate captions with their references; CIDEr-D document
/// frequencies are computed over everything added.
#[derive(Default)]
pub struct TapCider {
    candidates: Vec<String>,
    references: Vec<Vec<String>>,
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tap_cider_new(out: *mut *mut TapCider) -> TapStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::default());
        Ok(())
    })
}

/// Adds one candidate with `n` references.
///
/// # Safety
/// `scorer` must be a live handle, `candidate` a NUL-terminated string and
/// `refs` an array of `n` such strings.
#[no_mangle]
pub unsafe extern "C" fn tap_cider_add(
    scorer: *mut TapCider,
    candidate: *const c_char,
    refs: *const *const c_char,
    n: usize,
) -> TapStatus {
    guard(|| {
        non_null(scorer, "scorer")?;
        let c = string(candidate, "candidate")?;
        let r = strings(refs, n, "refs")?;
        if r.is_empty() {
            return Err(Failure(TapStatus::InvalidArgument, "a candidate needs at least one reference".into()));
        }
        let s = &mut *scorer;
        s.candidates.push(c);
        s.references.push(r);
        Ok(())
    })
}

/// Number of candidates added so far, or 0 for a null handle.
///
/// # Safety
/// `scorer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tap_cider_len(scorer: *const TapCider) -> usize {
    scorer.as_ref().map_or(0, |s| s.candidates.len())
}

/// Writes one score per added candidate into `scores` and the corpus mean
/// into `mean` (which may be null).
///
/// # Safety
/// `scorer` must be a live handle and `scores` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tap_cider_compute(scorer: *const TapCider, scores: *mut f64, len: usize, mean: *mut f64) -> TapStatus {
    guard(|| {
        non_null(scorer, "scorer")?;
        let s = &*scorer;
        let v = cider(&s.candidates, &s.references)?;
        if !v.is_empty() {
            non_null(scores, "scores")?;
        }
        if len < v.len() {
            return Err(Failure(TapStatus::BufferTooSmall, format!("need {} scores, got {len}", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), scores, v.len());
        if !mean.is_null() {
            *mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        }
        Ok(())
    })
}

/// # Safety
/// `scorer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tap_cider_free(scorer: *mut TapCider) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}
