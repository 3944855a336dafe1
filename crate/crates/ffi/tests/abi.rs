use std::ffi::{CStr, CString};
use std::ptr;

use sood_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { sood_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

fn bx(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> SoodBox {
    SoodBox {
        cx,
        cy,
        w,
        h,
        theta,
    }
}

#[test]
fn iou_and_errors() {
    let a = bx(0.0, 0.0, 2.0, 1.0, 0.3);
    let mut out = -1.0;
    assert_eq!(
        unsafe { sood_rotated_iou(&a, &a, &mut out) },
        SoodStatus::Ok
    );
    assert!((out - 1.0).abs() < 1e-12);

    let u = bx(0.0, 0.0, 1.0, 1.0, 0.0);
    let v = bx(0.5, 0.0, 1.0, 1.0, 0.0);
    unsafe { sood_rotated_iou(&u, &v, &mut out) };
    assert!((out - 1.0 / 3.0).abs() < 1e-9);

    let bad = bx(0.0, 0.0, 0.0, 1.0, 0.0);
    assert_eq!(
        unsafe { sood_rotated_iou(&bad, &u, &mut out) },
        SoodStatus::InvalidArgument
    );
    assert!(last_error().contains("invalid box"));
    assert_eq!(
        unsafe { sood_rotated_iou(ptr::null(), &u, &mut out) },
        SoodStatus::NullPointer
    );
    assert!(last_error().contains("null"));
}

#[test]
fn error_message_truncates() {
    let mut out = 0.0;
    unsafe { sood_rotated_iou(ptr::null(), ptr::null(), &mut out) };
    let mut small = [1 as std::ffi::c_char; 3];
    let full = unsafe { sood_last_error_message(small.as_mut_ptr(), small.len()) };
    assert!(full > 2);
    assert_eq!(small[2], 0);
}

#[test]
fn nms_keeps_best() {
    let boxes = [
        bx(0.0, 0.0, 10.0, 4.0, 0.0),
        bx(0.5, 0.0, 10.0, 4.0, 0.0),
        bx(50.0, 50.0, 10.0, 4.0, 1.0),
    ];
    let scores = [0.6, 0.9, 0.5];
    let mut keep = [usize::MAX; 3];
    let mut kept = 0;
    let st = unsafe {
        sood_rotated_nms(
            boxes.as_ptr(),
            scores.as_ptr(),
            3,
            0.5,
            keep.as_mut_ptr(),
            &mut kept,
        )
    };
    assert_eq!(st, SoodStatus::Ok);
    assert_eq!(&keep[..kept], &[1, 2]);
    let st = unsafe {
        sood_rotated_nms(
            boxes.as_ptr(),
            scores.as_ptr(),
            3,
            1.5,
            keep.as_mut_ptr(),
            &mut kept,
        )
    };
    assert_eq!(st, SoodStatus::InvalidArgument);
}

#[test]
fn centerness_and_soft_label() {
    let b = bx(10.0, 10.0, 8.0, 4.0, 0.0);
    let mut c = 0.0;
    unsafe { sood_gaussian_centerness(&b, 10.0, 10.0, &mut c) };
    assert_eq!(c, 1.0);
    unsafe { sood_gaussian_centerness(&b, 12.0, 10.0, &mut c) };
    assert!((c - 0.75).abs() < 1e-9);

    let mut g = 0.0;
    let whole = bx(512.0, 512.0, 1024.0, 1024.0, 0.0);
    assert_eq!(
        unsafe { sood_ccsl_gamma(&whole, 1024.0, 1024.0, 0.2, SoodExponent::Root, &mut g) },
        SoodStatus::Ok
    );
    assert!((g - 1.0).abs() < 1e-12);
    let quarter = bx(512.0, 512.0, 512.0, 512.0, 0.0);
    unsafe { sood_ccsl_gamma(&quarter, 1024.0, 1024.0, 0.2, SoodExponent::Root, &mut g) };
    assert!((g - 0.25f64.powi(5)).abs() < 1e-15);
    unsafe { sood_ccsl_gamma(&quarter, 1024.0, 1024.0, 0.5, SoodExponent::Power, &mut g) };
    assert!((g - 0.5).abs() < 1e-12);

    let mut y = 0.0;
    unsafe { sood_ccsl_value(&b, 12.0, 10.0, 2.0, &mut y) };
    assert!((y - 0.5625).abs() < 1e-9);
    assert_eq!(
        unsafe { sood_ccsl_value(&b, 30.0, 10.0, 1.0, &mut y) },
        SoodStatus::Domain
    );
}

#[test]
fn losses_and_ema() {
    let (mut l, mut g) = (0.0, 0.0);
    unsafe { sood_qfl(0.3, 0.3, 2.0, &mut l, &mut g) };
    assert!(l.abs() < 1e-12);
    unsafe { sood_bce(0.5, 0.5, &mut l, &mut g) };
    assert!(l.abs() < 1e-12);
    unsafe { sood_smooth_l1(2.0, 0.0, 1.0, &mut l, &mut g) };
    assert_eq!((l, g), (1.5, 1.0));
    assert_eq!(
        unsafe { sood_smooth_l1(2.0, 0.0, 0.0, &mut l, &mut g) },
        SoodStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { sood_qfl(0.3, 1.5, 2.0, &mut l, &mut g) },
        SoodStatus::Domain
    );

    let mut t = [1.0, 2.0];
    let s = [3.0, 4.0];
    let st = unsafe { sood_ema_update(t.as_ptr(), s.as_ptr(), 2, 0.5, t.as_mut_ptr()) };
    assert_eq!(st, SoodStatus::Ok);
    assert_eq!(t, [2.0, 3.0]);
    assert_eq!(
        unsafe { sood_ema_update(t.as_ptr(), s.as_ptr(), 2, 1.0, t.as_mut_ptr()) },
        SoodStatus::InvalidArgument
    );
}

fn pyramid() -> *mut SoodPredictions {
    let h = sood_predictions_new();
    for (i, level) in (3u32..=7).enumerate() {
        let side = 1usize << (7 - i);
        let n = side * side;
        let scores: Vec<f64> = (0..n)
            .map(|c| ((c * 37 + i * 11) % 101) as f64 / 100.0)
            .collect();
        let cen: Vec<f64> = (0..n).map(|c| ((c * 53 + 7) % 97) as f64 / 96.0).collect();
        let st = unsafe {
            sood_predictions_add_level(h, level, side, side, 1, scores.as_ptr(), cen.as_ptr())
        };
        assert_eq!(st, SoodStatus::Ok);
    }
    h
}

#[test]
fn selection_handles_match_library() {
    let h = pyramid();
    let mut sel = ptr::null_mut();
    assert_eq!(
        unsafe { sood_sla_select(h, 0.5, 100, &mut sel) },
        SoodStatus::Ok
    );
    let n = unsafe { sood_selection_len(sel) };
    assert!(n > 0);
    assert_eq!(
        unsafe { sood_selection_cells(sel) },
        128 * 128 + 64 * 64 + 32 * 32 + 16 * 16 + 8 * 8
    );
    let mut prev = (0u32, 0usize);
    for i in 0..n {
        let mut e = SoodPseudoLabel {
            level: 0,
            cell: 0,
            class_index: 0,
            score: 0.0,
            centerness: 0.0,
            weight: 0.0,
        };
        assert_eq!(
            unsafe { sood_selection_get(sel, i, &mut e) },
            SoodStatus::Ok
        );
        assert!(e.score >= 0.5);
        assert!((e.level, e.cell) > prev || i == 0);
        prev = (e.level, e.cell);
    }
    let mut e = SoodPseudoLabel {
        level: 0,
        cell: 0,
        class_index: 0,
        score: 0.0,
        centerness: 0.0,
        weight: 0.0,
    };
    assert_eq!(
        unsafe { sood_selection_get(sel, n, &mut e) },
        SoodStatus::InvalidArgument
    );
    unsafe { sood_selection_free(sel) };

    let mut sel = ptr::null_mut();
    assert_eq!(
        unsafe { sood_ratio_select(h, 0.01, SoodRatioKey::Joint, &mut sel) },
        SoodStatus::Ok
    );
    assert_eq!(unsafe { sood_selection_len(sel) }, 219);
    unsafe { sood_selection_free(sel) };
    unsafe { sood_predictions_free(h) };
}

#[test]
fn incomplete_pyramid_is_rejected() {
    let h = sood_predictions_new();
    let s = [0.5; 4];
    unsafe { sood_predictions_add_level(h, 3, 2, 2, 1, s.as_ptr(), s.as_ptr()) };
    let mut sel = ptr::null_mut();
    assert_ne!(
        unsafe { sood_sla_select(h, 0.02, 10, &mut sel) },
        SoodStatus::Ok
    );
    assert!(sel.is_null());
    let bad = [2.0; 4];
    assert_eq!(
        unsafe { sood_predictions_add_level(h, 4, 2, 2, 1, bad.as_ptr(), s.as_ptr()) },
        SoodStatus::Domain
    );
    unsafe { sood_predictions_free(h) };
    unsafe { sood_predictions_free(ptr::null_mut()) };
    unsafe { sood_selection_free(ptr::null_mut()) };
}

#[test]
fn jsonl_loading_reports_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    std::fs::write(&path, "{\"level\": 3}\n").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { sood_predictions_from_jsonl(c.as_ptr(), &mut h) };
    assert_eq!(st, SoodStatus::InvalidArgument);
    let msg = last_error();
    assert!(msg.contains("p.jsonl") && msg.contains("line 1"), "{msg}");
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(sood_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
