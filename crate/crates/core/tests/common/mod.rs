//! Independent reference implementations used by the property and acceptance
//! tests. None of them call the code they check.
#![allow(dead_code)]

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sood_core::assignment::FeatureGrid;
use sood_core::geometry::{rotated_iou, RotatedBox, ScoredBox};
use sood_core::pseudo_label::DensePrediction;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(r: &mut ChaCha8Rng, extent: f64, min_side: f64, max_side: f64) -> RotatedBox {
    let w = r.random_range(min_side..max_side);
    let h = r.random_range(min_side..max_side);
    let t = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    RotatedBox::new(
        r.random_range(0.0..extent),
        r.random_range(0.0..extent),
        w,
        h,
        t,
    )
    .unwrap()
}

/// Covariance built as an explicit matrix product.
pub fn covariance(b: &RotatedBox) -> Matrix2<f64> {
    let (s, c) = b.theta.sin_cos();
    let rot = Matrix2::new(c, -s, s, c);
    let d = Matrix2::new(b.w * b.w / 4.0, 0.0, 0.0, b.h * b.h / 4.0);
    rot * d * rot.transpose()
}

/// Squared Mahalanobis distance via an LU solve.
pub fn mahalanobis_ref(b: &RotatedBox, x: f64, y: f64) -> f64 {
    let d = Vector2::new(x - b.cx, y - b.cy);
    let sol = covariance(b).lu().solve(&d).expect("invertible covariance");
    d.dot(&sol)
}

fn inside(b: &RotatedBox, x: f64, y: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u.abs() <= b.w / 2.0 && v.abs() <= b.h / 2.0
}

fn half_extent(b: &RotatedBox) -> (f64, f64) {
    let (s, c) = b.theta.sin_cos();
    (
        (b.w * c.abs() + b.h * s.abs()) / 2.0,
        (b.w * s.abs() + b.h * c.abs()) / 2.0,
    )
}

/// Monte-Carlo IoU from uniform samples over the union bounding rectangle.
pub fn mc_iou(a: &RotatedBox, b: &RotatedBox, samples: usize, seed: u64) -> f64 {
    let (ax, ay) = half_extent(a);
    let (bx, by) = half_extent(b);
    let x0 = (a.cx - ax).min(b.cx - bx);
    let x1 = (a.cx + ax).max(b.cx + bx);
    let y0 = (a.cy - ay).min(b.cy - by);
    let y1 = (a.cy + ay).max(b.cy + by);
    let mut r = rng(seed);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let x = x0 + (x1 - x0) * r.random::<f64>();
        let y = y0 + (y1 - y0) * r.random::<f64>();
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Greedy NMS by pairwise comparison against every kept box.
pub fn brute_nms(boxes: &[ScoredBox], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| rotated_iou(&boxes[k].bbox, &boxes[i].bbox) <= thresh)
        {
            kept.push(i);
        }
    }
    kept
}

/// Cells of `grid` inside at least one box ellipse.
pub fn brute_gca(boxes: &[RotatedBox], grid: &FeatureGrid) -> Vec<usize> {
    let s = grid.stride as f64;
    let mut out = Vec::new();
    for row in 0..grid.height {
        for col in 0..grid.width {
            let (x, y) = (s / 2.0 + col as f64 * s, s / 2.0 + row as f64 * s);
            if boxes.iter().any(|b| mahalanobis_ref(b, x, y) <= 1.0) {
                out.push(row * grid.width + col);
            }
        }
    }
    out
}

/// `(level, cell, class, weight)` of the reference scale-aware selection: full
/// sort of the low-level pool, no partial selection.
pub fn reference_sla(
    preds: &[DensePrediction],
    thr: f64,
    topk: usize,
) -> Vec<(u32, usize, usize, f64)> {
    struct Cand {
        level: u32,
        cell: usize,
        class: usize,
        score: f64,
        cen: f64,
    }
    let cands = |p: &DensePrediction| -> Vec<Cand> {
        (0..p.width * p.height)
            .map(|cell| {
                let row = &p.scores[cell * p.num_classes..(cell + 1) * p.num_classes];
                let mut class = 0;
                for k in 1..row.len() {
                    if row[k] > row[class] {
                        class = k;
                    }
                }
                Cand {
                    level: p.level,
                    cell,
                    class,
                    score: row[class],
                    cen: p.centerness[cell],
                }
            })
            .collect()
    };
    let mut low: Vec<Cand> = preds
        .iter()
        .filter(|p| p.level <= 4)
        .flat_map(cands)
        .collect();
    low.sort_by(|a, b| {
        (b.score * b.cen)
            .total_cmp(&(a.score * a.cen))
            .then(b.cen.total_cmp(&a.cen))
            .then(a.level.cmp(&b.level))
            .then(a.cell.cmp(&b.cell))
    });
    let mut out: Vec<(u32, usize, usize, f64)> = low
        .iter()
        .take(topk)
        .filter(|c| c.score >= thr)
        .map(|c| (c.level, c.cell, c.class, c.score * c.cen))
        .collect();
    for p in preds.iter().filter(|p| p.level >= 5) {
        for c in cands(p) {
            if c.score >= thr {
                out.push((c.level, c.cell, c.class, c.score));
            }
        }
    }
    out.sort_by_key(|e| (e.0, e.1));
    out
}

/// Random five-level dump with grids up to `max_side` square. Scores are
/// quantized so ties in joint confidence are common.
pub fn random_dump(
    r: &mut ChaCha8Rng,
    max_side: usize,
    num_classes: usize,
) -> Vec<DensePrediction> {
    (3u32..=7)
        .map(|level| {
            let w = r.random_range(1..=max_side);
            let h = r.random_range(1..=max_side);
            let n = w * h;
            let scores = (0..n * num_classes)
                .map(|_| {
                    if r.random::<f64>() < 0.6 {
                        0.0
                    } else {
                        (r.random_range(0..=40) as f64) / 40.0 * 0.2
                    }
                })
                .collect();
            let cen = (0..n)
                .map(|_| r.random_range(0..=20) as f64 / 20.0)
                .collect();
            DensePrediction::new(level, w, h, num_classes, scores, cen, Vec::new()).unwrap()
        })
        .collect()
}

/// Central finite difference.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - b| <= rel * max(|a|, |b|)` with an absolute floor for values near 0.
pub fn close_rel(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) || (a - b).abs() <= abs_floor
}
