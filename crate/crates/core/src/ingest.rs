//! DOTA annotation ingestion, quad-to-box conversion, image tiling and
//! aspect-ratio statistics.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Point2, RotatedBox};

/// Class names of DOTA-v1.5 in their conventional index order.
pub const DOTA_V15_CLASSES: [&str; 16] = [
    "plane",
    "baseball-diamond",
    "bridge",
    "ground-track-field",
    "small-vehicle",
    "large-vehicle",
    "ship",
    "tennis-court",
    "basketball-court",
    "storage-tank",
    "soccer-ball-field",
    "roundabout",
    "harbor",
    "swimming-pool",
    "helicopter",
    "container-crane",
];

pub const DEFAULT_TILE_SIZE: f64 = 1024.0;
pub const DEFAULT_TILE_OVERLAP: f64 = 200.0;

/// Name <-> class-index vocabulary. Unknown names are appended on first use.
#[derive(Debug, Clone, Default)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn dota_v15() -> Self {
        Self {
            names: DOTA_V15_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn resolve(&mut self, name: &str) -> usize {
        match self.index_of(name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadAnnotation {
    pub corners: [Point2; 4],
    pub category: String,
    pub difficulty: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseIssue {
    pub line: usize,
    pub message: String,
}

impl From<ParseIssue> for Error {
    fn from(p: ParseIssue) -> Self {
        Error::Parse {
            line: p.line,
            message: p.message,
        }
    }
}

/// Result of parsing one annotation file: every valid record plus one issue per
/// rejected line.
#[derive(Debug, Clone, Default)]
pub struct ParsedAnnotations {
    pub annotations: Vec<QuadAnnotation>,
    pub issues: Vec<ParseIssue>,
}

fn is_header(line: &str) -> bool {
    let lower = line.to_ascii_lowercase();
    lower.starts_with("imagesource") || lower.starts_with("gsd")
}

/// Parses DOTA v1.x label text. Never stops at a bad line; I/O failures are the
/// only hard errors.
pub fn parse_dota<R: BufRead>(reader: R) -> Result<ParsedAnnotations> {
    let mut out = ParsedAnnotations::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || is_header(trimmed) {
            continue;
        }
        match parse_record(trimmed) {
            Ok(q) => out.annotations.push(q),
            Err(message) => out.issues.push(ParseIssue {
                line: lineno,
                message,
            }),
        }
    }
    Ok(out)
}

pub fn parse_dota_str(text: &str) -> ParsedAnnotations {
    parse_dota(text.as_bytes()).expect("reading from memory cannot fail")
}

fn parse_record(line: &str) -> std::result::Result<QuadAnnotation, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 10 {
        return Err(format!("expected 10 fields, found {}", fields.len()));
    }
    let mut coords = [0.0f64; 8];
    for (i, tok) in fields[..8].iter().enumerate() {
        let v: f64 = tok
            .parse()
            .map_err(|_| format!("coordinate {} is not a number: {tok:?}", i + 1))?;
        if !v.is_finite() {
            return Err(format!("coordinate {} is not finite", i + 1));
        }
        coords[i] = v;
    }
    let difficulty = match fields[9] {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("difficulty must be 0 or 1, found {other:?}")),
    };
    let corners = [0, 1, 2, 3].map(|k| Point2::new(coords[2 * k], coords[2 * k + 1]));
    if is_self_intersecting(&corners) {
        return Err("quadrilateral is self-intersecting".to_string());
    }
    Ok(QuadAnnotation {
        corners,
        category: fields[8].to_string(),
        difficulty,
    })
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn segments_cross(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// True when a pair of opposite edges properly crosses (a "bow-tie").
pub fn is_self_intersecting(c: &[Point2; 4]) -> bool {
    segments_cross(c[0], c[1], c[2], c[3]) || segments_cross(c[1], c[2], c[3], c[0])
}

/// Reads one annotation file, tagging errors with its path.
pub fn read_dota_file(path: &Path) -> Result<ParsedAnnotations> {
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_dota(std::io::BufReader::new(file)).map_err(|e| e.in_file(path))
}

/// Every `*.txt` file under `dir`, sorted by path.
pub fn annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::from(e).in_file(dir))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Convex hull (Andrew's monotone chain), counter-clockwise, starting from the
/// lexicographically smallest point. Independent of input order.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && orient(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && orient(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Minimum-area enclosing rectangle over the hull edges (rotating calipers).
/// The result is in long-side form: `w >= h`, `theta` in `[-pi/2, pi/2)`.
pub fn min_area_rect(points: &[Point2]) -> Result<RotatedBox> {
    let hull = convex_hull(points);
    let hull_area = crate::geometry::polygon_area(&hull);
    let extent = hull
        .iter()
        .flat_map(|p| [p.x.abs(), p.y.abs()])
        .fold(1.0f64, f64::max);
    if hull.len() < 3 || hull_area <= 1e-12 * extent * extent {
        return Err(Error::DegenerateAnnotation(
            "points are collinear or coincident".to_string(),
        ));
    }

    let n = hull.len();
    let mut best: Option<(f64, RotatedBox)> = None;
    for i in 0..n {
        let (p, q) = (hull[i], hull[(i + 1) % n]);
        let len = (q.x - p.x).hypot(q.y - p.y);
        let (ex, ey) = ((q.x - p.x) / len, (q.y - p.y) / len);
        let (nx, ny) = (-ey, ex);
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for h in &hull {
            let u = h.x * ex + h.y * ey;
            let v = h.x * nx + h.y * ny;
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let (w, hgt) = (umax - umin, vmax - vmin);
        let area = w * hgt;
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let (um, vm) = (0.5 * (umin + umax), 0.5 * (vmin + vmax));
            let cx = um * ex + vm * nx;
            let cy = um * ey + vm * ny;
            let b = RotatedBox::new(cx, cy, w, hgt, ey.atan2(ex))
                .map_err(|e| Error::DegenerateAnnotation(e.to_string()))?;
            best = Some((area, b));
        }
    }
    Ok(best
        .expect("hull has at least three edges")
        .1
        .long_side_form())
}

/// Converts a DOTA quadrilateral to a rotated box, resolving its category
/// through `classes`.
pub fn quad_to_rotated_box(q: &QuadAnnotation, classes: &mut ClassMap) -> Result<RotatedBox> {
    let b = min_area_rect(&q.corners)?;
    Ok(b.with_category(classes.resolve(&q.category))
        .with_difficulty(q.difficulty))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileWindow {
    pub x0: f64,
    pub y0: f64,
    pub size: f64,
    pub source_image: String,
}

impl TileWindow {
    /// Half-open containment `[x0, x0 + size) x [y0, y0 + size)`.
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x0 && p.x < self.x0 + self.size && p.y >= self.y0 && p.y < self.y0 + self.size
    }
}

/// Window origins along one axis: multiples of the stride, the last one
/// clamped so the window ends at the image edge.
pub fn tile_origins(extent: f64, size: f64, overlap: f64) -> Result<Vec<f64>> {
    if !(size > 0.0) || !(overlap >= 0.0) || overlap >= size {
        return Err(Error::Config(format!(
            "tile overlap ({overlap}) must be non-negative and smaller than the tile size ({size})"
        )));
    }
    if !(extent >= 1.0) {
        return Err(Error::Config(format!(
            "image extent must be >= 1, got {extent}"
        )));
    }
    let stride = size - overlap;
    let mut origins = Vec::new();
    let mut x = 0.0;
    loop {
        if x + size >= extent {
            origins.push((extent - size).max(0.0));
            break;
        }
        origins.push(x);
        x += stride;
    }
    Ok(origins)
}

/// Row-major grid of tiles covering an image.
pub fn tile_windows(
    image_w: f64,
    image_h: f64,
    size: f64,
    overlap: f64,
    source_image: &str,
) -> Result<Vec<TileWindow>> {
    let xs = tile_origins(image_w, size, overlap)?;
    let ys = tile_origins(image_h, size, overlap)?;
    Ok(ys
        .iter()
        .flat_map(|&y0| {
            xs.iter().map(move |&x0| TileWindow {
                x0,
                y0,
                size,
                source_image: source_image.to_string(),
            })
        })
        .collect())
}

/// For each window, the boxes whose center it contains, translated into
/// window coordinates.
pub fn assign_annotations_to_tiles(
    boxes: &[RotatedBox],
    windows: &[TileWindow],
) -> Vec<Vec<RotatedBox>> {
    windows
        .iter()
        .map(|win| {
            boxes
                .iter()
                .filter(|b| win.contains(b.center()))
                .map(|b| RotatedBox {
                    cx: b.cx - win.x0,
                    cy: b.cy - win.y0,
                    ..*b
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CategoryRatio {
    pub count: usize,
    pub below_half: usize,
}

/// Histogram of `min(w, h) / max(w, h)` over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectRatioStats {
    pub bins: Vec<RatioBin>,
    pub per_category: BTreeMap<String, CategoryRatio>,
    ratios: Vec<f64>,
}

impl AspectRatioStats {
    pub fn total(&self) -> usize {
        self.ratios.len()
    }

    /// Fraction of instances with ratio strictly below `t`.
    pub fn fraction_below(&self, t: f64) -> f64 {
        let below = self.ratios.partition_point(|&r| r < t);
        below as f64 / self.ratios.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ratio_bin_low,ratio_bin_high,count\n");
        for b in &self.bins {
            s.push_str(&format!("{},{},{}\n", b.low, b.high, b.count));
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let per_category: serde_json::Map<String, serde_json::Value> = self
            .per_category
            .iter()
            .map(|(k, c)| {
                (
                    k.clone(),
                    serde_json::json!({
                        "count": c.count,
                        "fraction_below_0.5": c.below_half as f64 / c.count as f64,
                    }),
                )
            })
            .collect();
        serde_json::json!({
            "total": self.total(),
            "fraction_below_0.5": self.fraction_below(0.5),
            "per_category": per_category,
        })
    }
}

pub fn aspect_ratio(b: &RotatedBox) -> f64 {
    b.w.min(b.h) / b.w.max(b.h)
}

/// Bins `(k/n, (k+1)/n]`; instances without a resolvable category are
/// counted under `"unknown"`.
pub fn aspect_ratio_stats(
    boxes: &[RotatedBox],
    bins: usize,
    classes: &ClassMap,
) -> Result<AspectRatioStats> {
    if boxes.is_empty() {
        return Err(Error::EmptyDataset("no boxes to summarize".to_string()));
    }
    if bins == 0 {
        return Err(Error::Config(
            "histogram needs at least one bin".to_string(),
        ));
    }
    let mut hist: Vec<RatioBin> = (0..bins)
        .map(|k| RatioBin {
            low: k as f64 / bins as f64,
            high: (k + 1) as f64 / bins as f64,
            count: 0,
        })
        .collect();
    let mut per_category: BTreeMap<String, CategoryRatio> = BTreeMap::new();
    let mut ratios = Vec::with_capacity(boxes.len());
    for b in boxes {
        let r = aspect_ratio(b);
        let k = ((r * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        hist[k].count += 1;
        let name = b
            .category
            .and_then(|c| classes.name(c))
            .unwrap_or("unknown")
            .to_string();
        let entry = per_category.entry(name).or_default();
        entry.count += 1;
        if r < 0.5 {
            entry.below_half += 1;
        }
        ratios.push(r);
    }
    ratios.sort_by(f64::total_cmp);
    Ok(AspectRatioStats {
        bins: hist,
        per_category,
        ratios,
    })
}

/// Boxes of every annotation file in a directory plus the per-file issues.
#[derive(Debug, Default)]
pub struct DatasetLoad {
    pub boxes: Vec<RotatedBox>,
    pub issues: Vec<(PathBuf, ParseIssue)>,
    pub files: usize,
}

pub fn load_dataset(
    dir: &Path,
    classes: &mut ClassMap,
    exclude_difficult: bool,
) -> Result<DatasetLoad> {
    let mut load = DatasetLoad::default();
    for path in annotation_files(dir)? {
        let parsed = read_dota_file(&path)?;
        load.files += 1;
        for issue in parsed.issues {
            load.issues.push((path.clone(), issue));
        }
        for q in parsed.annotations {
            if exclude_difficult && q.difficulty == 1 {
                continue;
            }
            match quad_to_rotated_box(&q, classes) {
                Ok(b) => load.boxes.push(b),
                Err(e) => load.issues.push((
                    path.clone(),
                    ParseIssue {
                        line: 0,
                        message: e.to_string(),
                    },
                )),
            }
        }
    }
    Ok(load)
}
