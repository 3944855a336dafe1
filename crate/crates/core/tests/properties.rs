mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use sood_core::assignment::{
    all_sampling_assign, assign_pyramid, center_sampling_assign, gca_assign, AssignOptions,
    FeatureGrid, Sampling,
};
use sood_core::geometry::{
    box_to_gaussian, canonical_angle, gaussian_centerness, mahalanobis_sq, rotated_iou,
    rotated_nms, RotatedBox, ScoredBox,
};
use sood_core::ingest::{min_area_rect, tile_windows};
use sood_core::losses::{bce, qfl, smooth_l1};
use sood_core::pseudo_label::{ratio_count, ratio_select, sla_select, RatioKey, SlaConfig};
use sood_core::soft_label::{ccsl_value, scale_factor, CcslParams, ExponentConvention};
use sood_core::Point2;

fn arb_box() -> impl Strategy<Value = RotatedBox> {
    (
        0.0..200.0f64,
        0.0..200.0f64,
        1.0..80.0f64,
        1.0..80.0f64,
        -10.0..10.0f64,
    )
        .prop_map(|(cx, cy, w, h, t)| RotatedBox::new(cx, cy, w, h, t).unwrap())
}

fn arb_unit_box() -> impl Strategy<Value = RotatedBox> {
    (
        0.0..4.0f64,
        0.0..4.0f64,
        0.5..3.0f64,
        0.5..3.0f64,
        -3.2..3.2f64,
    )
        .prop_map(|(cx, cy, w, h, t)| RotatedBox::new(cx, cy, w, h, t).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn angle_is_canonical(t in -100.0..100.0f64) {
        let c = canonical_angle(t);
        prop_assert!((-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2).contains(&c));
        let k = ((t - c) / std::f64::consts::PI).round();
        prop_assert!((t - c - k * std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn covariance_matches_matrix_product(b in arb_box()) {
        let g = box_to_gaussian(&b).unwrap();
        let m = covariance(&b);
        let scale = b.w.max(b.h).powi(2);
        for i in 0..2 {
            for j in 0..2 {
                prop_assert!((g.sigma[i][j] - m[(i, j)]).abs() <= 1e-12 * scale);
            }
        }
        let (lo, hi) = g.eigenvalues();
        let (a, d) = (b.w * b.w / 4.0, b.h * b.h / 4.0);
        prop_assert!((lo - a.min(d)).abs() <= 1e-9 * scale);
        prop_assert!((hi - a.max(d)).abs() <= 1e-9 * scale);
    }

    #[test]
    fn mahalanobis_matches_linear_solve(b in arb_box(), x in -50.0..250.0f64, y in -50.0..250.0f64) {
        let g = box_to_gaussian(&b).unwrap();
        let got = mahalanobis_sq(&g, Point2::new(x, y)).unwrap();
        let want = mahalanobis_ref(&b, x, y);
        prop_assert!(close_rel(got, want, 1e-9, 1e-12), "{got} vs {want}");
    }

    #[test]
    fn swapped_parameterization_is_the_same_gaussian(b in arb_box()) {
        let g1 = box_to_gaussian(&b).unwrap();
        let g2 = box_to_gaussian(&b.swap_wh_rotate90()).unwrap();
        let scale = b.w.max(b.h).powi(2);
        for i in 0..2 {
            for j in 0..2 {
                prop_assert!((g1.sigma[i][j] - g2.sigma[i][j]).abs() <= 1e-9 * scale);
            }
        }
        prop_assert!((rotated_iou(&b, &b.swap_wh_rotate90()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn centerness_bounded_and_peaks_at_center(b in arb_box(), u in -1.5..1.5f64, v in -1.5..1.5f64) {
        let g = box_to_gaussian(&b).unwrap();
        prop_assert_eq!(gaussian_centerness(&g, b.center()).unwrap(), 1.0);
        let (s, c) = b.theta.sin_cos();
        let (du, dv) = (u * b.w / 2.0, v * b.h / 2.0);
        let p = Point2::new(b.cx + c * du - s * dv, b.cy + s * du + c * dv);
        let cen = gaussian_centerness(&g, p).unwrap();
        prop_assert!(cen <= 1.0);
        prop_assert!((cen - (1.0 - u * u - v * v)).abs() < 1e-9);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in arb_unit_box(), b in arb_unit_box()) {
        let ab = rotated_iou(&a, &b);
        let ba = rotated_iou(&b, &a);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_is_scale_and_translation_invariant(a in arb_unit_box(), b in arb_unit_box(), s in 0.1..50.0f64, dx in -100.0..100.0f64) {
        let base = rotated_iou(&a, &b);
        let shift = |r: &RotatedBox| RotatedBox { cx: r.cx + dx, ..*r };
        prop_assert!((rotated_iou(&a.scaled(s), &b.scaled(s)) - base).abs() < 1e-9);
        prop_assert!((rotated_iou(&shift(&a), &shift(&b)) - base).abs() < 1e-9);
    }

    #[test]
    fn nms_matches_pairwise_reference(
        raw in prop::collection::vec((arb_unit_box(), 0u8..6), 0..25),
        thr in 0.05..0.95f64,
    ) {
        let boxes: Vec<ScoredBox> = raw.iter().map(|(b, s)| ScoredBox { bbox: *b, score: *s as f64 / 5.0 }).collect();
        let got = rotated_nms(&boxes, thr).unwrap();
        prop_assert_eq!(&got, &brute_nms(&boxes, thr));
        for (i, &a) in got.iter().enumerate() {
            for &b in &got[i + 1..] {
                prop_assert!(rotated_iou(&boxes[a].bbox, &boxes[b].bbox) <= thr);
            }
        }
    }

    #[test]
    fn min_area_rect_recovers_box(b in arb_box()) {
        let r = min_area_rect(&b.corners()).unwrap();
        let want = b.long_side_form();
        let g1 = box_to_gaussian(&r).unwrap();
        let g2 = box_to_gaussian(&want).unwrap();
        let scale = b.w.max(b.h).powi(2);
        prop_assert!(r.w >= r.h);
        prop_assert!((r.area() - b.area()).abs() <= 1e-9 * scale);
        prop_assert!((r.cx - b.cx).abs() < 1e-9 * (1.0 + b.cx.abs()));
        for i in 0..2 {
            for j in 0..2 {
                prop_assert!((g1.sigma[i][j] - g2.sigma[i][j]).abs() <= 1e-7 * scale);
            }
        }
    }

    #[test]
    fn tiles_cover_every_pixel(w in 1u32..3000, h in 1u32..3000) {
        let wins = tile_windows(w as f64, h as f64, 1024.0, 200.0, "img").unwrap();
        for x in [0.0, w as f64 - 1.0, (w / 2) as f64] {
            for y in [0.0, h as f64 - 1.0, (h / 2) as f64] {
                prop_assert!(wins.iter().any(|t| t.contains(Point2::new(x, y))));
            }
        }
        let xs: BTreeSet<u64> = wins.iter().map(|t| t.x0.to_bits()).collect();
        for t in &wins {
            prop_assert!(t.x0 >= 0.0 && t.y0 >= 0.0);
            if w >= 1024 {
                prop_assert!(t.x0 + 1024.0 <= w as f64);
            }
        }
        prop_assert!(!xs.is_empty());
    }

    #[test]
    fn sampling_schemes_are_nested(b in arb_box()) {
        let grid = FeatureGrid::new(3, 256, 256).unwrap();
        let gca: BTreeSet<usize> = gca_assign(&[b], &grid).unwrap().positive_cells().collect();
        let all: BTreeSet<usize> = all_sampling_assign(&[b], &grid).unwrap().positive_cells().collect();
        let center: BTreeSet<usize> = center_sampling_assign(&[b], &grid, 1.5).unwrap().positive_cells().collect();
        prop_assert!(gca.is_subset(&all));
        prop_assert!(center.is_subset(&all));
        prop_assert_eq!(gca.into_iter().collect::<Vec<_>>(), brute_gca(&[b], &grid));
    }

    #[test]
    fn gca_targets_are_consistent(boxes in prop::collection::vec(arb_box(), 1..6)) {
        let grid = FeatureGrid::new(3, 256, 256).unwrap();
        let res = gca_assign(&boxes, &grid).unwrap();
        for (cell, t) in res.cells.iter().enumerate() {
            let p = grid.cell_point(cell);
            match t.box_id {
                Some(id) => {
                    let d = mahalanobis_ref(&boxes[id], p.x, p.y);
                    prop_assert!(d <= 1.0 + 1e-9);
                    prop_assert!((t.centerness - (1.0 - d).clamp(0.0, 1.0)).abs() < 1e-9);
                    prop_assert_eq!(t.label, Some(boxes[id].category.unwrap_or(0)));
                    // the winner is the smallest box containing the point
                    for (j, o) in boxes.iter().enumerate() {
                        if mahalanobis_ref(o, p.x, p.y) <= 1.0 {
                            prop_assert!(boxes[id].area() <= o.area() + 1e-9 || j == id);
                        }
                    }
                }
                None => {
                    prop_assert_eq!(t.centerness, 0.0);
                    prop_assert!(boxes.iter().all(|o| mahalanobis_ref(o, p.x, p.y) > 1.0));
                }
            }
        }
    }

    #[test]
    fn sla_matches_reference(seed in any::<u64>(), thr_i in 1usize..4, topk in 1usize..400) {
        let mut r = rng(seed);
        let preds = random_dump(&mut r, 24, 3);
        let thr = thr_i as f64 / 100.0;
        let got = sla_select(&preds, &SlaConfig::new(thr, topk)).unwrap();
        let got: Vec<_> = got.entries.iter().map(|e| (e.level, e.cell, e.class, e.weight)).collect();
        prop_assert_eq!(got, reference_sla(&preds, thr, topk));
    }

    #[test]
    fn sla_shrinks_with_threshold(seed in any::<u64>(), topk in 1usize..400) {
        let mut r = rng(seed);
        let preds = random_dump(&mut r, 24, 2);
        let mut prev: Option<BTreeSet<(u32, usize)>> = None;
        for thr in [0.01, 0.02, 0.03, 0.1] {
            let keys: BTreeSet<_> = sla_select(&preds, &SlaConfig::new(thr, topk)).unwrap().keys().into_iter().collect();
            if let Some(p) = &prev {
                prop_assert!(keys.is_subset(p));
            }
            prev = Some(keys);
        }
    }

    #[test]
    fn ratio_selects_exact_count(seed in any::<u64>(), ratio in 0.001..1.0f64) {
        let mut r = rng(seed);
        let preds = random_dump(&mut r, 16, 2);
        let n_all: usize = preds.iter().map(|p| p.len()).sum();
        let set = ratio_select(&preds, ratio, RatioKey::Score).unwrap();
        prop_assert_eq!(set.n_pos(), ratio_count(ratio, n_all));
        prop_assert_eq!(set.n_all, n_all);
        let min_in = set.entries.iter().map(|e| e.score).fold(f64::INFINITY, f64::min);
        let chosen: BTreeSet<_> = set.keys().into_iter().collect();
        for p in &preds {
            for c in 0..p.len() {
                if !chosen.contains(&(p.level, c)) {
                    prop_assert!(p.max_score(c).0 <= min_in);
                }
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences(s in 0.01..0.99f64, y in 0.0..1.0f64, d in -3.0..3.0f64) {
        let h = 1e-6;
        let (_, g) = qfl(s, y, 2.0).unwrap();
        let fd = central_diff(|x| qfl(x, y, 2.0).unwrap().0, s, h);
        prop_assert!(close_rel(g, fd, 1e-4, 1e-7), "qfl {g} vs {fd}");
        let (_, g) = bce(s, y).unwrap();
        let fd = central_diff(|x| bce(x, y).unwrap().0, s, h);
        prop_assert!(close_rel(g, fd, 1e-4, 1e-7), "bce {g} vs {fd}");
        let (_, g) = smooth_l1(d, 0.0, 1.0);
        let fd = central_diff(|x| smooth_l1(x, 0.0, 1.0).0, d, h);
        prop_assert!(close_rel(g, fd, 1e-4, 1e-7), "smooth_l1 {g} vs {fd}");
    }

    #[test]
    fn losses_vanish_at_target(y in 0.0..1.0f64) {
        prop_assert!(qfl(y, y, 2.0).unwrap().0.abs() < 1e-12);
        prop_assert!(bce(y, y).unwrap().0.abs() < 1e-9);
    }

    #[test]
    fn ccsl_monotone_in_base_and_gamma(b in arb_box(), u1 in 0.0..0.99f64, u2 in 0.0..0.99f64, g1 in 0.01..3.0f64, g2 in 0.01..3.0f64) {
        let g = box_to_gaussian(&b).unwrap();
        let (s, c) = b.theta.sin_cos();
        let at = |u: f64| Point2::new(b.cx + c * u * b.w / 2.0, b.cy + s * u * b.w / 2.0);
        let (near, far) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(ccsl_value(&g, at(near), lo).unwrap() + 1e-12 >= ccsl_value(&g, at(far), lo).unwrap());
        prop_assert!(ccsl_value(&g, at(far), lo).unwrap() + 1e-12 >= ccsl_value(&g, at(far), hi).unwrap());
        let y = ccsl_value(&g, at(far), hi).unwrap();
        prop_assert!((0.0..=1.0).contains(&y));
    }

    #[test]
    fn smaller_boxes_get_smaller_exponents(w in 1.0..500.0f64, h in 1.0..500.0f64, k in 1.01..2.0f64, beta in 0.05..2.0f64) {
        for convention in [ExponentConvention::Root, ExponentConvention::Power] {
            let p = CcslParams { beta_smooth: beta, convention, ..CcslParams::default() };
            let small = RotatedBox::new(0.0, 0.0, w, h, 0.0).unwrap();
            let big = RotatedBox::new(0.0, 0.0, w * k, h, 0.0).unwrap();
            prop_assert!(scale_factor(&small, &p).unwrap() <= scale_factor(&big, &p).unwrap());
        }
    }
}

#[test]
fn monte_carlo_iou_spot_checks() {
    let mut r = rng(99);
    for i in 0..20 {
        let a = random_box(&mut r, 6.0, 0.5, 4.0);
        let b = random_box(&mut r, 6.0, 0.5, 4.0);
        let mc = mc_iou(&a, &b, 200_000, i);
        assert!((rotated_iou(&a, &b) - mc).abs() < 0.02, "{a:?} {b:?}");
    }
}

#[test]
fn routed_assignment_only_uses_routed_boxes() {
    let grids = FeatureGrid::pyramid(512, 512).unwrap();
    let boxes = [
        RotatedBox::new(100.0, 100.0, 40.0, 10.0, 0.2).unwrap(),
        RotatedBox::new(300.0, 300.0, 200.0, 60.0, -0.4).unwrap(),
    ];
    let res = assign_pyramid(&boxes, &grids, Sampling::Gaussian, AssignOptions::default()).unwrap();
    for r in &res {
        for c in r.positive_cells() {
            let id = r.cells[c].box_id.unwrap();
            let want = if id == 0 { 3 } else { 5 };
            assert_eq!(r.grid.level, want);
        }
    }
    assert!(res[0].num_positive() > 0 && res[2].num_positive() > 0);
}
