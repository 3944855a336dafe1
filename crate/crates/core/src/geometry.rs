//! Rotated-box algebra.
//!
//! Boxes use the "le90" convention: `theta` is measured counter-clockwise from
//! the x-axis to the `w` edge and is kept in `[-pi/2, pi/2)`. A box is also
//! modelled as a 2D Gaussian whose 1-sigma ellipse is the rectangle's
//! inscribed ellipse, which is what the label assigners test membership
//! against.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sides shorter than this are rejected at construction.
pub const MIN_SIDE: f64 = 1e-6;

/// Gaussians whose covariance condition number exceeds this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Intersections below this area (px^2) are reported as empty.
const MIN_INTERSECTION: f64 = 1e-12;

/// Relative slack for closed-rectangle membership; absorbs rounding at corners.
const MEMBERSHIP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }
}

/// Wraps an angle into `[-pi/2, pi/2)`.
pub fn canonical_angle(theta: f64) -> f64 {
    let mut t = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    if t < -FRAC_PI_2 {
        t += PI;
    }
    t
}

/// An oriented rectangle `(cx, cy, w, h, theta)` with optional class and difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<u8>,
}

impl RotatedBox {
    /// Builds a box, canonicalizing `theta`. Non-finite values and sides below
    /// [`MIN_SIDE`] are rejected.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(cx.is_finite()
            && cy.is_finite()
            && w.is_finite()
            && h.is_finite()
            && theta.is_finite())
        {
            return Err(Error::InvalidBox(format!(
                "non-finite parameters ({cx}, {cy}, {w}, {h}, {theta})"
            )));
        }
        if w < MIN_SIDE || h < MIN_SIDE {
            return Err(Error::InvalidBox(format!(
                "sides must be at least {MIN_SIDE} px, got w={w} h={h}"
            )));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta: canonical_angle(theta),
            category: None,
            difficulty: None,
        })
    }

    pub fn with_category(mut self, category: usize) -> Self {
        self.category = Some(category);
        self
    }

    pub fn with_difficulty(mut self, difficulty: u8) -> Self {
        self.difficulty = Some(difficulty);
        self
    }

    /// Re-checks the invariants of a box built through its public fields.
    pub fn validate(&self) -> Result<()> {
        Self::new(self.cx, self.cy, self.w, self.h, self.theta).map(|_| ())
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn max_side(&self) -> f64 {
        self.w.max(self.h)
    }

    /// The same rectangle written as `(h, w, theta + pi/2)`.
    pub fn swap_wh_rotate90(&self) -> Self {
        Self {
            w: self.h,
            h: self.w,
            theta: canonical_angle(self.theta + FRAC_PI_2),
            ..*self
        }
    }

    /// The representation with `w >= h`. Squares keep `theta` in `[-pi/4, pi/4)`.
    pub fn long_side_form(&self) -> Self {
        let square = (self.w - self.h).abs() <= 1e-9 * self.w.max(self.h);
        let mut b = if self.w < self.h && !square {
            self.swap_wh_rotate90()
        } else {
            *self
        };
        if square && !(-PI / 4.0..PI / 4.0).contains(&b.theta) {
            b = b.swap_wh_rotate90();
        }
        b
    }

    /// Scales center and sides about the origin.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            cx: self.cx * s,
            cy: self.cy * s,
            w: self.w * s,
            h: self.h * s,
            ..*self
        }
    }

    /// Corners in counter-clockwise order (in a y-up frame).
    pub fn corners(&self) -> [Point2; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| Point2::new(self.cx + c * u - s * v, self.cy + s * u + c * v))
    }

    /// Offsets of `p` from the center expressed along the box's `w` and `h` axes.
    pub fn local_coords(&self, p: Point2) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p.x - self.cx, p.y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: RotatedBox,
    pub score: f64,
}

/// Mean and covariance of the Gaussian fitted to a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    pub mu: Point2,
    pub sigma: [[f64; 2]; 2],
}

impl Gaussian2D {
    pub fn det(&self) -> f64 {
        self.sigma[0][0] * self.sigma[1][1] - self.sigma[0][1] * self.sigma[1][0]
    }

    /// Eigenvalues of the (symmetric) covariance, ascending.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_tr = 0.5 * (self.sigma[0][0] + self.sigma[1][1]);
        let det = self.det();
        let disc = (half_tr * half_tr - det).max(0.0).sqrt();
        (half_tr - disc, half_tr + disc)
    }

    /// Closed-form inverse of the covariance.
    pub fn precision(&self) -> Result<[[f64; 2]; 2]> {
        let (lo, hi) = self.eigenvalues();
        if !(lo > 0.0) || !hi.is_finite() || hi / lo > MAX_CONDITION {
            return Err(Error::DegenerateGaussian(format!(
                "covariance eigenvalues ({lo:e}, {hi:e})"
            )));
        }
        let det = self.det();
        let [[a, b], [c, d]] = self.sigma;
        Ok([[d / det, -b / det], [-c / det, a / det]])
    }
}

/// Gaussian with `mu` at the box center and `sigma = R diag(w^2/4, h^2/4) R^T`.
pub fn box_to_gaussian(b: &RotatedBox) -> Result<Gaussian2D> {
    b.validate()?;
    let (s, c) = b.theta.sin_cos();
    let (a, d) = (b.w * b.w / 4.0, b.h * b.h / 4.0);
    let sxx = a * c * c + d * s * s;
    let syy = a * s * s + d * c * c;
    let sxy = (a - d) * c * s;
    Ok(Gaussian2D {
        mu: b.center(),
        sigma: [[sxx, sxy], [sxy, syy]],
    })
}

/// Squared Mahalanobis distance `(p - mu)^T sigma^-1 (p - mu)`.
pub fn mahalanobis_sq(g: &Gaussian2D, p: Point2) -> Result<f64> {
    let inv = g.precision()?;
    Ok(quadratic_form(&inv, g.mu, p))
}

pub(crate) fn quadratic_form(inv: &[[f64; 2]; 2], mu: Point2, p: Point2) -> f64 {
    let (dx, dy) = (p.x - mu.x, p.y - mu.y);
    dx * (inv[0][0] * dx + inv[0][1] * dy) + dy * (inv[1][0] * dx + inv[1][1] * dy)
}

/// `1 - mahalanobis_sq`. Unclamped: negative outside the ellipse.
pub fn gaussian_centerness(g: &Gaussian2D, p: Point2) -> Result<f64> {
    Ok(1.0 - mahalanobis_sq(g, p)?)
}

/// Closed-rectangle membership.
pub fn point_in_rotated_box(b: &RotatedBox, p: Point2) -> bool {
    let (u, v) = b.local_coords(p);
    let slack = MEMBERSHIP_SLACK * b.w.max(b.h);
    u.abs() <= b.w / 2.0 + slack && v.abs() <= b.h / 2.0 + slack
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[Point2]) -> f64 {
    signed_area(poly).abs()
}

fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n).map(|i| poly[i].cross(poly[(i + 1) % n])).sum();
    0.5 * twice
}

/// Sutherland-Hodgman clip of `subject` against a convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let edge = b.sub(a);
        let side = |p: Point2| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Point2, q: Point2, sp: f64, sq: f64) -> Point2 {
    let t = sp / (sp - sq);
    Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Area of the intersection of two rotated rectangles.
pub fn intersection_area(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let inter = clip_convex(&a.corners(), &b.corners());
    let area = polygon_area(&inter);
    if area < MIN_INTERSECTION {
        0.0
    } else {
        area
    }
}

/// Exact IoU via convex polygon clipping.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    // cheap reject on circumscribed circles
    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    let reach = 0.5 * (a.w.hypot(a.h) + b.w.hypot(b.h));
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    // clip in a's frame so the result does not depend on argument order
    let inter = if a.area() <= b.area() {
        intersection_area(a, b)
    } else {
        intersection_area(b, a)
    };
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy rotated NMS. Returns kept indices in descending score order; equal
/// scores keep the lower input index first. A box is suppressed when its IoU
/// with an already kept box exceeds `iou_thresh`.
pub fn rotated_nms(boxes: &[ScoredBox], iou_thresh: f64) -> Result<Vec<usize>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::Config(format!(
            "NMS IoU threshold must lie in (0, 1), got {iou_thresh}"
        )));
    }
    if let Some(i) = boxes.iter().position(|b| !b.score.is_finite()) {
        return Err(Error::Domain(format!("box {i} has a non-finite score")));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| desc_score(boxes[i].score, boxes[j].score).then(i.cmp(&j)));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| rotated_iou(&boxes[k].bbox, &boxes[i].bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub(crate) fn desc_score(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bx(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, t).unwrap()
    }

    #[test]
    fn canonical_angle_range() {
        for t in [-10.0, -FRAC_PI_2, -1.0, 0.0, 1.0, FRAC_PI_2, PI, 7.5] {
            let c = canonical_angle(t);
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(&c), "{t} -> {c}");
            let k = ((t - c) / PI).round();
            assert_abs_diff_eq!(t - c, k * PI, epsilon = 1e-12);
        }
        assert_eq!(canonical_angle(FRAC_PI_2), -FRAC_PI_2);
    }

    #[test]
    fn rejects_degenerate_and_non_finite() {
        assert!(matches!(
            RotatedBox::new(0.0, 0.0, 0.0, 1.0, 0.0),
            Err(Error::InvalidBox(_))
        ));
        assert!(RotatedBox::new(0.0, 0.0, 1.0, 1e-7, 0.0).is_err());
        assert!(RotatedBox::new(f64::NAN, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(RotatedBox::new(0.0, 0.0, 1.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn gaussian_axis_aligned() {
        let g = box_to_gaussian(&bx(0.0, 0.0, 2.0, 4.0, 0.0)).unwrap();
        assert_eq!(g.mu, Point2::new(0.0, 0.0));
        assert_eq!(g.sigma, [[1.0, 0.0], [0.0, 4.0]]);
    }

    #[test]
    fn gaussian_quarter_turn() {
        let g = box_to_gaussian(&bx(0.0, 0.0, 2.0, 4.0, FRAC_PI_2)).unwrap();
        assert_abs_diff_eq!(g.sigma[0][0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.sigma[1][1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.sigma[0][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_matches_explicit_product() {
        // R * diag * R^T multiplied out entry by entry
        let t = PI / 6.0;
        let (c, s) = (t.cos(), t.sin());
        let r = [[c, -s], [s, c]];
        let lam = [9.0, 1.0];
        let mut expect = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    expect[i][j] += r[i][k] * lam[k] * r[j][k];
                }
            }
        }
        let g = box_to_gaussian(&bx(5.0, 3.0, 6.0, 2.0, t)).unwrap();
        assert_eq!(g.mu, Point2::new(5.0, 3.0));
        for (row, want) in g.sigma.iter().zip(&expect) {
            for (x, y) in row.iter().zip(want) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(g.det(), 36.0 * 4.0 / 16.0, epsilon = 1e-9);
    }

    #[test]
    fn mahalanobis_anchors() {
        let g = box_to_gaussian(&bx(0.0, 0.0, 2.0, 4.0, 0.0)).unwrap();
        assert_eq!(mahalanobis_sq(&g, g.mu).unwrap(), 0.0);
        assert_abs_diff_eq!(
            mahalanobis_sq(&g, Point2::new(1.0, 0.0)).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            mahalanobis_sq(&g, Point2::new(0.0, 2.0)).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn centerness_anchors() {
        let b = bx(10.0, -4.0, 20.0, 6.0, 0.0);
        let g = box_to_gaussian(&b).unwrap();
        assert_eq!(gaussian_centerness(&g, b.center()).unwrap(), 1.0);
        let edge = Point2::new(b.cx + b.w / 2.0, b.cy);
        assert_abs_diff_eq!(gaussian_centerness(&g, edge).unwrap(), 0.0, epsilon = 1e-9);
        let half = Point2::new(b.cx + b.w / 4.0, b.cy);
        assert_abs_diff_eq!(gaussian_centerness(&g, half).unwrap(), 0.75, epsilon = 1e-9);
        // outside the ellipse the raw value goes negative
        let far = Point2::new(b.cx + b.w, b.cy);
        assert!(gaussian_centerness(&g, far).unwrap() < 0.0);
    }

    #[test]
    fn singular_gaussian_rejected() {
        let g = Gaussian2D {
            mu: Point2::new(0.0, 0.0),
            sigma: [[1.0, 1.0], [1.0, 1.0]],
        };
        assert!(matches!(
            mahalanobis_sq(&g, Point2::new(1.0, 0.0)),
            Err(Error::DegenerateGaussian(_))
        ));
        let thin = Gaussian2D {
            mu: Point2::new(0.0, 0.0),
            sigma: [[1e13, 0.0], [0.0, 1e-1]],
        };
        assert!(thin.precision().is_err());
    }

    #[test]
    fn iou_analytic_cases() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_abs_diff_eq!(rotated_iou(&a, &a), 1.0, epsilon = 1e-12);
        let far = bx(1000.0, 0.0, 10.0, 10.0, 0.3);
        assert_eq!(rotated_iou(&a, &far), 0.0);
        let shifted = bx(0.5, 0.0, 1.0, 1.0, 0.0);
        assert_abs_diff_eq!(rotated_iou(&a, &shifted), 1.0 / 3.0, epsilon = 1e-12);
        // touching edges share no area
        let touching = bx(1.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_iou(&a, &touching), 0.0);
    }

    #[test]
    fn iou_rotated_square_in_square() {
        // a square rotated 45 degrees inside a larger axis-aligned one
        let outer = bx(0.0, 0.0, 4.0, 4.0, 0.0);
        let inner = bx(0.0, 0.0, 2.0, 2.0, PI / 4.0);
        assert_abs_diff_eq!(rotated_iou(&outer, &inner), 4.0 / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn nms_basic() {
        let b = bx(0.0, 0.0, 10.0, 4.0, 0.2);
        assert!(rotated_nms(&[], 0.5).unwrap().is_empty());
        let one = [ScoredBox {
            bbox: b,
            score: 0.3,
        }];
        assert_eq!(rotated_nms(&one, 0.5).unwrap(), vec![0]);
        let two = [
            ScoredBox {
                bbox: b,
                score: 0.8,
            },
            ScoredBox {
                bbox: b,
                score: 0.9,
            },
        ];
        assert_eq!(rotated_nms(&two, 0.5).unwrap(), vec![1]);
        let tie = [
            ScoredBox {
                bbox: b,
                score: 0.9,
            },
            ScoredBox {
                bbox: b,
                score: 0.9,
            },
        ];
        assert_eq!(rotated_nms(&tie, 0.5).unwrap(), vec![0]);
        assert!(rotated_nms(&one, 1.0).is_err());
    }

    #[test]
    fn membership_closed() {
        let b = bx(3.0, 4.0, 10.0, 2.0, 0.7);
        assert!(point_in_rotated_box(&b, b.center()));
        for c in b.corners() {
            assert!(point_in_rotated_box(&b, c));
        }
        let (s, c) = b.theta.sin_cos();
        let out = Point2::new(b.cx + c * 5.1, b.cy + s * 5.1);
        assert!(!point_in_rotated_box(&b, out));
    }

    #[test]
    fn long_side_form_square() {
        let sq = bx(1.0, 1.0, 2.0, 2.0, 1.2);
        let l = sq.long_side_form();
        assert!((-PI / 4.0..PI / 4.0).contains(&l.theta));
        let tall = bx(0.0, 0.0, 2.0, 5.0, 0.1).long_side_form();
        assert_eq!((tall.w, tall.h), (5.0, 2.0));
    }
}
