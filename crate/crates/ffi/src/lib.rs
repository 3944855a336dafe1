//! C ABI over `sood-core`.
//!
//! Every fallible function returns a [`SoodStatus`]; on failure the message is
//! available from [`sood_last_error_message`] on the same thread. Predictions
//! and selections are opaque handles owned by the caller and released with
//! their `_free` function.

// negated comparisons are used to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sood_core::geometry::{box_to_gaussian, gaussian_centerness, rotated_iou, rotated_nms};
use sood_core::pseudo_label::{
    ratio_select, sla_select, DensePrediction, PseudoLabelSet, RatioKey, SlaConfig,
};
use sood_core::soft_label::{ccsl_value, scale_factor, CcslParams, ExponentConvention};
use sood_core::{losses, sim, Error, Point2, RotatedBox, ScoredBox};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Shape = 4,
    Consistency = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoodRatioKey {
    Score = 0,
    Joint = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoodExponent {
    Root = 0,
    Power = 1,
}

/// Rotated box, angle in radians.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoodBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// One selected cell.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoodPseudoLabel {
    pub level: u32,
    pub cell: usize,
    pub class_index: usize,
    pub score: f64,
    pub centerness: f64,
    pub weight: f64,
}

/// Dense predictions for the five levels of one image.
pub struct SoodPredictions {
    levels: Vec<DensePrediction>,
}

/// Result of a pseudo-label selection.
pub struct SoodSelection {
    set: PseudoLabelSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into_bytes());
}

fn status_of(e: &Error) -> SoodStatus {
    match e {
        Error::Config(_) | Error::InvalidBox(_) | Error::Parse { .. } => {
            SoodStatus::InvalidArgument
        }
        Error::Shape { .. } => SoodStatus::Shape,
        Error::Consistency(_) => SoodStatus::Consistency,
        Error::Io(_) => SoodStatus::Io,
        Error::File { source, .. } => status_of(source),
        _ => SoodStatus::Domain,
    }
}

fn guard(f: impl FnOnce() -> Result<(), SoodStatus>) -> SoodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SoodStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".to_string());
            SoodStatus::Panic
        }
    }
}

fn fail(e: Error) -> SoodStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> SoodStatus {
    set_error(format!("{what} is null"));
    SoodStatus::NullPointer
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, SoodStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], SoodStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write<T>(p: *mut T, v: T, what: &str) -> Result<(), SoodStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

fn to_box(b: &SoodBox) -> Result<RotatedBox, SoodStatus> {
    RotatedBox::new(b.cx, b.cy, b.w, b.h, b.theta).map_err(fail)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sood_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `a`, `b` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sood_rotated_iou(
    a: *const SoodBox,
    b: *const SoodBox,
    out: *mut f64,
) -> SoodStatus {
    guard(|| {
        let a = to_box(deref(a, "a")?)?;
        let b = to_box(deref(b, "b")?)?;
        write(out, rotated_iou(&a, &b), "out")
    })
}

/// Greedy rotated NMS. Writes kept indices in descending score order to
/// `keep` (capacity `n`) and their count to `kept`.
///
/// # Safety
/// `boxes` and `scores` must hold `n` elements, `keep` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn sood_rotated_nms(
    boxes: *const SoodBox,
    scores: *const f64,
    n: usize,
    iou_thresh: f64,
    keep: *mut usize,
    kept: *mut usize,
) -> SoodStatus {
    guard(|| {
        let boxes = slice(boxes, n, "boxes")?;
        let scores = slice(scores, n, "scores")?;
        let scored = boxes
            .iter()
            .zip(scores)
            .map(|(b, &score)| {
                Ok(ScoredBox {
                    bbox: to_box(b)?,
                    score,
                })
            })
            .collect::<Result<Vec<_>, SoodStatus>>()?;
        let idx = rotated_nms(&scored, iou_thresh).map_err(fail)?;
        if n > 0 && keep.is_null() {
            return Err(null("keep"));
        }
        for (i, k) in idx.iter().enumerate() {
            *keep.add(i) = *k;
        }
        write(kept, idx.len(), "kept")
    })
}

/// `1 - squared Mahalanobis distance` of `(x, y)` under the box Gaussian.
///
/// # Safety
/// `b` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sood_gaussian_centerness(
    b: *const SoodBox,
    x: f64,
    y: f64,
    out: *mut f64,
) -> SoodStatus {
    guard(|| {
        let g = box_to_gaussian(&to_box(deref(b, "box")?)?).map_err(fail)?;
        write(
            out,
            gaussian_centerness(&g, Point2::new(x, y)).map_err(fail)?,
            "out",
        )
    })
}

/// Soft-label exponent of a box.
///
/// # Safety
/// `b` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sood_ccsl_gamma(
    b: *const SoodBox,
    image_w: f64,
    image_h: f64,
    beta: f64,
    convention: SoodExponent,
    out: *mut f64,
) -> SoodStatus {
    guard(|| {
        let params = CcslParams {
            beta_smooth: beta,
            image_w,
            image_h,
            convention: match convention {
                SoodExponent::Root => ExponentConvention::Root,
                SoodExponent::Power => ExponentConvention::Power,
            },
        };
        params.validate().map_err(fail)?;
        write(
            out,
            scale_factor(&to_box(deref(b, "box")?)?, &params).map_err(fail)?,
            "out",
        )
    })
}

/// Soft classification target at `(x, y)` for exponent `gamma`.
///
/// # Safety
/// `b` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sood_ccsl_value(
    b: *const SoodBox,
    x: f64,
    y: f64,
    gamma: f64,
    out: *mut f64,
) -> SoodStatus {
    guard(|| {
        let g = box_to_gaussian(&to_box(deref(b, "box")?)?).map_err(fail)?;
        write(
            out,
            ccsl_value(&g, Point2::new(x, y), gamma).map_err(fail)?,
            "out",
        )
    })
}

/// Quality focal loss and its derivative in `sigma`.
///
/// # Safety
/// `loss` and `grad` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sood_qfl(
    sigma: f64,
    y: f64,
    focusing: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> SoodStatus {
    guard(|| {
        let (l, g) = losses::qfl(sigma, y, focusing).map_err(fail)?;
        write(loss, l, "loss")?;
        write(grad, g, "grad")
    })
}

/// Binary cross-entropy (zero at `pred == target`) and its derivative.
///
/// # Safety
/// `loss` and `grad` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sood_bce(
    pred: f64,
    target: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> SoodStatus {
    guard(|| {
        let (l, g) = losses::bce(pred, target).map_err(fail)?;
        write(loss, l, "loss")?;
        write(grad, g, "grad")
    })
}

/// Smooth-L1 loss and its derivative in `pred`.
///
/// # Safety
/// `loss` and `grad` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sood_smooth_l1(
    pred: f64,
    target: f64,
    delta: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> SoodStatus {
    guard(|| {
        if !(delta > 0.0) {
            return Err(fail(Error::Config(format!(
                "delta must be positive, got {delta}"
            ))));
        }
        let (l, g) = losses::smooth_l1(pred, target, delta);
        write(loss, l, "loss")?;
        write(grad, g, "grad")
    })
}

/// `out[i] = m * teacher[i] + (1 - m) * student[i]`; `out` may alias `teacher`.
///
/// # Safety
/// All three arrays must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn sood_ema_update(
    teacher: *const f64,
    student: *const f64,
    n: usize,
    momentum: f64,
    out: *mut f64,
) -> SoodStatus {
    guard(|| {
        let t = slice(teacher, n, "teacher")?;
        let s = slice(student, n, "student")?;
        let v = sim::ema_update(t, s, momentum).map_err(fail)?;
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        ptr::copy(v.as_ptr(), out, n);
        Ok(())
    })
}

/// Empty prediction set; add the five levels with `sood_predictions_add_level`.
#[no_mangle]
pub extern "C" fn sood_predictions_new() -> *mut SoodPredictions {
    Box::into_raw(Box::new(SoodPredictions { levels: Vec::new() }))
}

/// Adds one level: `scores` is `width * height * num_classes` row-major,
/// `centerness` is `width * height`.
///
/// # Safety
/// `preds` must come from `sood_predictions_new`; arrays must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn sood_predictions_add_level(
    preds: *mut SoodPredictions,
    level: u32,
    width: usize,
    height: usize,
    num_classes: usize,
    scores: *const f64,
    centerness: *const f64,
) -> SoodStatus {
    guard(|| {
        let preds = preds.as_mut().ok_or_else(|| null("predictions"))?;
        let cells = width
            .checked_mul(height)
            .ok_or_else(|| fail(Error::Config("grid too large".to_string())))?;
        let n_scores = cells
            .checked_mul(num_classes)
            .ok_or_else(|| fail(Error::Config("grid too large".to_string())))?;
        let s = slice(scores, n_scores, "scores")?.to_vec();
        let c = slice(centerness, cells, "centerness")?.to_vec();
        let p = DensePrediction::new(level, width, height, num_classes, s, c, Vec::new())
            .map_err(fail)?;
        preds.levels.push(p);
        Ok(())
    })
}

/// Loads a JSON-lines prediction dump.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sood_predictions_from_jsonl(
    path: *const c_char,
    out: *mut *mut SoodPredictions,
) -> SoodStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(Error::Config("path is not UTF-8".to_string())))?;
        let levels = sood_core::cli::load_predictions(std::path::Path::new(path)).map_err(fail)?;
        write(
            out,
            Box::into_raw(Box::new(SoodPredictions { levels })),
            "out",
        )
    })
}

/// # Safety
/// `preds` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sood_predictions_free(preds: *mut SoodPredictions) {
    if !preds.is_null() {
        drop(Box::from_raw(preds));
    }
}

unsafe fn emit_selection(
    preds: *const SoodPredictions,
    out: *mut *mut SoodSelection,
    f: impl FnOnce(&[DensePrediction]) -> sood_core::Result<PseudoLabelSet>,
) -> Result<(), SoodStatus> {
    let preds = deref(preds, "predictions")?;
    let set = f(&preds.levels).map_err(fail)?;
    write(out, Box::into_raw(Box::new(SoodSelection { set })), "out")
}

/// Scale-aware selection: joint top-k over P3/P4 then the score threshold,
/// threshold only on P5-P7.
///
/// # Safety
/// `preds` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sood_sla_select(
    preds: *const SoodPredictions,
    score_thresh: f64,
    topk: usize,
    out: *mut *mut SoodSelection,
) -> SoodStatus {
    guard(|| {
        emit_selection(preds, out, |p| {
            sla_select(p, &SlaConfig::new(score_thresh, topk))
        })
    })
}

/// Global top `ceil(ratio * cells)` by score or joint confidence.
///
/// # Safety
/// `preds` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sood_ratio_select(
    preds: *const SoodPredictions,
    ratio: f64,
    key: SoodRatioKey,
    out: *mut *mut SoodSelection,
) -> SoodStatus {
    let key = match key {
        SoodRatioKey::Score => RatioKey::Score,
        SoodRatioKey::Joint => RatioKey::Joint,
    };
    guard(|| emit_selection(preds, out, |p| ratio_select(p, ratio, key)))
}

/// Number of selected cells; 0 for a null handle.
///
/// # Safety
/// `sel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sood_selection_len(sel: *const SoodSelection) -> usize {
    sel.as_ref().map_or(0, |s| s.set.n_pos())
}

/// Cells considered across all levels; 0 for a null handle.
///
/// # Safety
/// `sel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sood_selection_cells(sel: *const SoodSelection) -> usize {
    sel.as_ref().map_or(0, |s| s.set.n_all)
}

/// Entry `index`, ordered by `(level, cell)`.
///
/// # Safety
/// `sel` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sood_selection_get(
    sel: *const SoodSelection,
    index: usize,
    out: *mut SoodPseudoLabel,
) -> SoodStatus {
    guard(|| {
        let sel = deref(sel, "selection")?;
        let e = sel.set.entries.get(index).ok_or_else(|| {
            fail(Error::Config(format!(
                "index {index} out of range ({} entries)",
                sel.set.n_pos()
            )))
        })?;
        write(
            out,
            SoodPseudoLabel {
                level: e.level,
                cell: e.cell,
                class_index: e.class,
                score: e.score,
                centerness: e.centerness,
                weight: e.weight,
            },
            "out",
        )
    })
}

/// # Safety
/// `sel` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sood_selection_free(sel: *mut SoodSelection) {
    if !sel.is_null() {
        drop(Box::from_raw(sel));
    }
}

/// Library version, static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sood_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
