//! Supervised label assignment over FPN grids.
//!
//! Three membership rules share one target definition so they can be compared
//! directly: Gaussian center assignment (inscribed ellipse), FCOS-style center
//! sampling, and all-sampling (whole rectangle).

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_to_gaussian, point_in_rotated_box, quadratic_form, Point2, RotatedBox};

pub const MIN_LEVEL: u32 = 3;
pub const MAX_LEVEL: u32 = 7;
pub const LEVELS: [u32; 5] = [3, 4, 5, 6, 7];

/// Size range `(lo, hi]` routed to each level, P3..P7.
pub const LEVEL_RANGES: [(f64, f64); 5] = [
    (0.0, 64.0),
    (64.0, 128.0),
    (128.0, 256.0),
    (256.0, 512.0),
    (512.0, f64::INFINITY),
];

pub const DEFAULT_CENTER_RADIUS: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub level: u32,
    pub stride: u32,
    pub width: usize,
    pub height: usize,
    pub image_w: u32,
    pub image_h: u32,
}

impl FeatureGrid {
    pub fn new(level: u32, image_w: u32, image_h: u32) -> Result<Self> {
        if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
            return Err(Error::Config(format!(
                "FPN level must be in 3..=7, got {level}"
            )));
        }
        if image_w == 0 || image_h == 0 {
            return Err(Error::Config(
                "image dimensions must be positive".to_string(),
            ));
        }
        let stride = 1u32 << level;
        Ok(Self {
            level,
            stride,
            width: image_w.div_ceil(stride) as usize,
            height: image_h.div_ceil(stride) as usize,
            image_w,
            image_h,
        })
    }

    /// Grids for P3..P7 of one image.
    pub fn pyramid(image_w: u32, image_h: u32) -> Result<Vec<Self>> {
        LEVELS
            .iter()
            .map(|&l| Self::new(l, image_w, image_h))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image-space location of cell `(row, col)`.
    pub fn point(&self, row: usize, col: usize) -> Point2 {
        let s = self.stride as f64;
        Point2::new(s / 2.0 + col as f64 * s, s / 2.0 + row as f64 * s)
    }

    pub fn cell_point(&self, cell: usize) -> Point2 {
        self.point(cell / self.width, cell % self.width)
    }

    /// Inclusive range of columns (or rows) whose points fall in `[lo, hi]`.
    fn index_span(&self, lo: f64, hi: f64, count: usize) -> Option<(usize, usize)> {
        let s = self.stride as f64;
        let first = ((lo - s / 2.0) / s).ceil().max(0.0);
        let last = ((hi - s / 2.0) / s).floor().min(count as f64 - 1.0);
        (first <= last).then_some((first as usize, last as usize))
    }
}

/// Row-major image-space points of a grid.
pub fn grid_points(grid: &FeatureGrid) -> Vec<Point2> {
    (0..grid.height)
        .flat_map(|r| (0..grid.width).map(move |c| grid.point(r, c)))
        .collect()
}

pub fn level_for_size(max_side: f64) -> u32 {
    let idx = LEVEL_RANGES
        .iter()
        .position(|&(lo, hi)| max_side > lo && max_side <= hi)
        .unwrap_or(0);
    MIN_LEVEL + idx as u32
}

fn level_range(level: u32) -> (f64, f64) {
    LEVEL_RANGES[(level - MIN_LEVEL) as usize]
}

/// Indices of the boxes routed to each grid, by `max(w, h)`.
pub fn assign_boxes_to_levels(boxes: &[RotatedBox], grids: &[FeatureGrid]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); grids.len()];
    for (i, b) in boxes.iter().enumerate() {
        let level = level_for_size(b.max_side());
        if let Some(g) = grids.iter().position(|g| g.level == level) {
            out[g].push(i);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    Gaussian,
    Center { radius_factor: f64 },
    All,
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampling::Gaussian => f.write_str("gca"),
            Sampling::Center { .. } => f.write_str("center"),
            Sampling::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssignOptions {
    /// Drop positives whose largest side distance falls outside the level's
    /// size range (FCOS "limit range").
    pub limit_range: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellTarget {
    /// Class index; `None` is background.
    pub label: Option<usize>,
    pub centerness: f64,
    /// `(dcx/stride, dcy/stride, ln(w/stride), ln(h/stride), theta)` toward the assigned box.
    pub regression: Option<[f64; 5]>,
    pub box_id: Option<usize>,
}

impl CellTarget {
    pub const BACKGROUND: CellTarget = CellTarget {
        label: None,
        centerness: 0.0,
        regression: None,
        box_id: None,
    };

    pub fn is_positive(&self) -> bool {
        self.box_id.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub grid: FeatureGrid,
    pub sampling: Sampling,
    pub cells: Vec<CellTarget>,
}

impl AssignmentResult {
    pub fn positive_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_positive())
            .map(|(i, _)| i)
    }

    pub fn num_positive(&self) -> usize {
        self.cells.iter().filter(|c| c.is_positive()).count()
    }
}

struct Candidate {
    area: f64,
    raw_centerness: f64,
    id: usize,
}

impl Candidate {
    /// Smaller box first, then larger centerness, then lower index.
    fn beats(&self, other: &Candidate) -> bool {
        self.area
            .total_cmp(&other.area)
            .then(other.raw_centerness.total_cmp(&self.raw_centerness))
            .then(self.id.cmp(&other.id))
            .is_lt()
    }
}

/// Assigns the boxes listed in `routed` (indices into `boxes`) to one grid.
pub fn assign_level(
    boxes: &[RotatedBox],
    routed: &[usize],
    grid: &FeatureGrid,
    sampling: Sampling,
    opts: AssignOptions,
) -> Result<AssignmentResult> {
    if let Sampling::Center { radius_factor } = sampling {
        if !(radius_factor > 0.0) {
            return Err(Error::Config(format!(
                "center-sampling radius factor must be positive, got {radius_factor}"
            )));
        }
    }
    let stride = grid.stride as f64;
    let mut cells = vec![CellTarget::BACKGROUND; grid.len()];
    let mut owners: Vec<Option<Candidate>> = (0..grid.len()).map(|_| None).collect();

    for &id in routed {
        let b = boxes
            .get(id)
            .ok_or_else(|| Error::Consistency(format!("box index {id} out of range")))?;
        let g = box_to_gaussian(b)?;
        let inv = g.precision()?;

        let corners = b.corners();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for c in corners {
            x0 = x0.min(c.x);
            x1 = x1.max(c.x);
            y0 = y0.min(c.y);
            y1 = y1.max(c.y);
        }
        // small pad so points exactly on the boundary stay candidates
        let pad = 1e-9 * b.max_side();
        let (Some((c0, c1)), Some((r0, r1))) = (
            grid.index_span(x0 - pad, x1 + pad, grid.width),
            grid.index_span(y0 - pad, y1 + pad, grid.height),
        ) else {
            continue;
        };

        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = grid.point(row, col);
                let d = quadratic_form(&inv, g.mu, p);
                let member = match sampling {
                    Sampling::Gaussian => d <= 1.0,
                    Sampling::Center { radius_factor } => {
                        let r = radius_factor * stride;
                        (p.x - b.cx).abs() <= r
                            && (p.y - b.cy).abs() <= r
                            && point_in_rotated_box(b, p)
                    }
                    Sampling::All => point_in_rotated_box(b, p),
                };
                if !member || (opts.limit_range && !within_level_range(b, p, grid.level)) {
                    continue;
                }
                let cand = Candidate {
                    area: b.area(),
                    raw_centerness: 1.0 - d,
                    id,
                };
                let cell = row * grid.width + col;
                if owners[cell].as_ref().is_none_or(|cur| cand.beats(cur)) {
                    cells[cell] = CellTarget {
                        label: Some(b.category.unwrap_or(0)),
                        centerness: (1.0 - d).clamp(0.0, 1.0),
                        regression: Some([
                            (b.cx - p.x) / stride,
                            (b.cy - p.y) / stride,
                            (b.w / stride).ln(),
                            (b.h / stride).ln(),
                            b.theta,
                        ]),
                        box_id: Some(id),
                    };
                    owners[cell] = Some(cand);
                }
            }
        }
    }

    Ok(AssignmentResult {
        grid: *grid,
        sampling,
        cells,
    })
}

fn within_level_range(b: &RotatedBox, p: Point2, level: u32) -> bool {
    let (u, v) = b.local_coords(p);
    let reach = (b.w / 2.0 + u.abs()).max(b.h / 2.0 + v.abs());
    let (lo, hi) = level_range(level);
    reach > lo && reach <= hi
}

fn all_ids(boxes: &[RotatedBox]) -> Vec<usize> {
    (0..boxes.len()).collect()
}

/// Gaussian center assignment of every box in `boxes` to `grid`.
pub fn gca_assign(boxes: &[RotatedBox], grid: &FeatureGrid) -> Result<AssignmentResult> {
    assign_level(
        boxes,
        &all_ids(boxes),
        grid,
        Sampling::Gaussian,
        AssignOptions::default(),
    )
}

pub fn center_sampling_assign(
    boxes: &[RotatedBox],
    grid: &FeatureGrid,
    radius_factor: f64,
) -> Result<AssignmentResult> {
    assign_level(
        boxes,
        &all_ids(boxes),
        grid,
        Sampling::Center { radius_factor },
        AssignOptions::default(),
    )
}

pub fn all_sampling_assign(boxes: &[RotatedBox], grid: &FeatureGrid) -> Result<AssignmentResult> {
    assign_level(
        boxes,
        &all_ids(boxes),
        grid,
        Sampling::All,
        AssignOptions::default(),
    )
}

/// Routes boxes to levels, then assigns each level independently.
pub fn assign_pyramid(
    boxes: &[RotatedBox],
    grids: &[FeatureGrid],
    sampling: Sampling,
    opts: AssignOptions,
) -> Result<Vec<AssignmentResult>> {
    let routed = assign_boxes_to_levels(boxes, grids);
    grids
        .iter()
        .zip(&routed)
        .map(|(g, ids)| assign_level(boxes, ids, g, sampling, opts))
        .collect()
}

/// CSV dump `level,row,col,label,centerness,box_id`; background cells carry
/// `-1` for label and box id.
pub fn write_assignment_csv<W: Write>(out: &mut W, results: &[AssignmentResult]) -> Result<()> {
    writeln!(out, "level,row,col,label,centerness,box_id")?;
    for res in results {
        for (i, c) in res.cells.iter().enumerate() {
            let (row, col) = (i / res.grid.width, i % res.grid.width);
            let label = c.label.map_or(-1, |l| l as i64);
            let id = c.box_id.map_or(-1, |l| l as i64);
            writeln!(
                out,
                "{},{},{},{},{},{}",
                res.grid.level, row, col, label, c.centerness, id
            )?;
        }
    }
    Ok(())
}
