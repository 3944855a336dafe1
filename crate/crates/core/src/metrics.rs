//! Evaluation kernels: pixel-level recall/precision of pseudo-label
//! selections, pseudo-box precision across IoU thresholds, score/centerness
//! heatmaps and per-category box recall/precision.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use serde::Serialize;

use crate::assignment::AssignmentResult;
use crate::error::{Error, Result};
use crate::geometry::{desc_score, rotated_iou, RotatedBox, ScoredBox};
use crate::pseudo_label::PseudoLabelSet;

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PixelPRResult {
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PixelPRResult {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        Self {
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
            tp,
            fp,
            fn_,
        }
    }
}

/// Selected cells versus the positive cells of a ground-truth assignment.
/// With `class_aware`, a selected cell also needs the ground-truth label.
pub fn pixel_pr(
    selected: &PseudoLabelSet,
    gt: &[AssignmentResult],
    class_aware: bool,
) -> Result<PixelPRResult> {
    let mut gt_cells: BTreeMap<(u32, usize), usize> = BTreeMap::new();
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for a in gt {
        if sizes.insert(a.grid.level, a.cells.len()).is_some() {
            return Err(Error::Consistency(format!(
                "level {} appears twice in the ground truth",
                a.grid.level
            )));
        }
        for cell in a.positive_cells() {
            gt_cells.insert((a.grid.level, cell), a.cells[cell].label.unwrap_or(0));
        }
    }
    let mut tp = 0;
    let mut seen = HashSet::new();
    for e in &selected.entries {
        match sizes.get(&e.level) {
            Some(&n) if e.cell < n => {}
            _ => {
                return Err(Error::Consistency(format!(
                    "selected cell {} of level {} is not on the ground-truth grids",
                    e.cell, e.level
                )))
            }
        }
        if !seen.insert((e.level, e.cell)) {
            return Err(Error::Consistency(format!(
                "cell {} of level {} selected twice",
                e.cell, e.level
            )));
        }
        if let Some(&label) = gt_cells.get(&(e.level, e.cell)) {
            if !class_aware || label == e.class {
                tp += 1;
            }
        }
    }
    let fp = selected.entries.len() - tp;
    let fn_ = gt_cells.len() - tp;
    Ok(PixelPRResult::from_counts(tp, fp, fn_))
}

/// Greedy matching: predictions in descending score order (ties by index),
/// each takes the unmatched ground truth with the highest IoU `>= thresh`.
/// Returns the matched ground-truth index per prediction.
pub fn greedy_match(preds: &[ScoredBox], gts: &[RotatedBox], thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| desc_score(preds[a].score, preds[b].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut matched = vec![None; preds.len()];
    for i in order {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = rotated_iou(&preds[i].bbox, g);
            if iou >= thresh && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            matched[i] = Some(j);
        }
    }
    matched
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision (and recall) of the predictions scoring at least `score_floor`,
/// one point per IoU threshold.
pub fn precision_at_iou(
    preds: &[ScoredBox],
    gts: &[RotatedBox],
    thresholds: &[f64],
    score_floor: f64,
) -> Result<Vec<PrPoint>> {
    if thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0))
        || thresholds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::Config(
            "IoU thresholds must be strictly ascending in (0, 1)".to_string(),
        ));
    }
    let kept: Vec<ScoredBox> = preds
        .iter()
        .filter(|p| p.score >= score_floor)
        .copied()
        .collect();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let m = greedy_match(&kept, gts, t).iter().flatten().count();
            PrPoint {
                threshold: t,
                precision: ratio(m, kept.len()),
                recall: ratio(m, gts.len()),
            }
        })
        .collect())
}

pub fn write_pr_curve_csv<W: Write>(out: &mut W, points: &[PrPoint]) -> Result<()> {
    writeln!(out, "threshold,precision,recall")?;
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    Ok(())
}

/// 2D histogram over `(score, centerness)` with the Pearson correlation of the
/// raw pairs. `counts[i][j]` is score bin `i`, centerness bin `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap2D {
    pub bins: usize,
    pub counts: Vec<Vec<usize>>,
    pub pearson_r: f64,
}

impl Heatmap2D {
    pub fn score_marginal(&self) -> Vec<usize> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn centerness_marginal(&self) -> Vec<usize> {
        (0..self.bins)
            .map(|j| self.counts.iter().map(|row| row[j]).sum())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

/// Bin index of a `[0, 1]` value; `1.0` falls in the last bin.
pub fn unit_bin(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor() as usize).min(bins - 1)
}

pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} samples",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a coordinate has zero variance".to_string(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn score_centerness_heatmap(samples: &[(f64, f64)], bins: usize) -> Result<Heatmap2D> {
    if bins == 0 {
        return Err(Error::Config("heatmap needs at least one bin".to_string()));
    }
    if let Some(s) = samples
        .iter()
        .find(|(a, b)| !(0.0..=1.0).contains(a) || !(0.0..=1.0).contains(b))
    {
        return Err(Error::Domain(format!("sample {s:?} lies outside [0, 1]^2")));
    }
    let pearson_r = pearson(samples)?;
    let mut counts = vec![vec![0usize; bins]; bins];
    for &(s, c) in samples {
        counts[unit_bin(s, bins)][unit_bin(c, bins)] += 1;
    }
    Ok(Heatmap2D {
        bins,
        counts,
        pearson_r,
    })
}

pub fn write_heatmap_csv<W: Write>(out: &mut W, h: &Heatmap2D) -> Result<()> {
    writeln!(out, "score_bin,centerness_bin,count")?;
    for (i, row) in h.counts.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            writeln!(out, "{i},{j},{c}")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CategoryPr {
    pub recall: f64,
    pub precision: f64,
    pub matched: usize,
    pub predictions: usize,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CategoryReport {
    pub rows: BTreeMap<usize, CategoryPr>,
    /// Indices of predictions whose category is not among the known ones.
    pub excluded: Vec<usize>,
}

/// Greedy matching within each category. Known categories are those in
/// `categories` plus every category present in the ground truth; predictions
/// outside that set are reported and skipped. Boxes without a category count
/// as category 0.
pub fn per_category_box_pr(
    preds: &[ScoredBox],
    gts: &[RotatedBox],
    iou_thresh: f64,
    categories: &[usize],
) -> CategoryReport {
    let cat = |b: &RotatedBox| b.category.unwrap_or(0);
    let known: BTreeSet<usize> = categories
        .iter()
        .copied()
        .chain(gts.iter().map(cat))
        .collect();
    let mut report = CategoryReport::default();
    for (i, p) in preds.iter().enumerate() {
        if !known.contains(&cat(&p.bbox)) {
            report.excluded.push(i);
        }
    }
    for &c in &known {
        let p: Vec<ScoredBox> = preds
            .iter()
            .filter(|p| cat(&p.bbox) == c)
            .copied()
            .collect();
        let g: Vec<RotatedBox> = gts.iter().filter(|g| cat(g) == c).copied().collect();
        let matched = greedy_match(&p, &g, iou_thresh).iter().flatten().count();
        report.rows.insert(
            c,
            CategoryPr {
                recall: ratio(matched, g.len()),
                precision: ratio(matched, p.len()),
                matched,
                predictions: p.len(),
                ground_truth: g.len(),
            },
        );
    }
    report
}

pub fn write_category_csv<W: Write>(
    out: &mut W,
    report: &CategoryReport,
    name: impl Fn(usize) -> String,
) -> Result<()> {
    writeln!(out, "category,recall,precision")?;
    for (c, r) in &report.rows {
        writeln!(out, "{},{},{}", name(*c), r.recall, r.precision)?;
    }
    Ok(())
}
