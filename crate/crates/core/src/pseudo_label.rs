//! Pixel-level pseudo-label selection from dense teacher predictions.
//!
//! Low FPN levels (P3, P4) use a coarse-to-fine rule: rank by joint confidence
//! (max class score times centerness), keep the top-k, then drop candidates
//! below the score threshold. High levels (P5-P7) predict systematically lower
//! scores, so they are filtered by the score threshold alone.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::assignment::LEVELS;
use crate::error::{Error, Result};
use crate::geometry::{desc_score, rotated_nms, RotatedBox, ScoredBox};

/// Teacher (or student) output over one FPN level.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePrediction {
    pub level: u32,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// `cells x num_classes`, row-major over cells.
    pub scores: Vec<f64>,
    pub centerness: Vec<f64>,
    /// Decoded box per cell; empty when the dump carries no boxes.
    pub boxes: Vec<RotatedBox>,
}

impl DensePrediction {
    pub fn new(
        level: u32,
        width: usize,
        height: usize,
        num_classes: usize,
        scores: Vec<f64>,
        centerness: Vec<f64>,
        boxes: Vec<RotatedBox>,
    ) -> Result<Self> {
        let pred = Self {
            level,
            width,
            height,
            num_classes,
            scores,
            centerness,
            boxes,
        };
        pred.validate()?;
        Ok(pred)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.num_classes == 0 {
            return Err(Error::Config(
                "prediction needs at least one class".to_string(),
            ));
        }
        if self.scores.len() != n * self.num_classes {
            return Err(Error::Shape {
                expected: n * self.num_classes,
                actual: self.scores.len(),
            });
        }
        if self.centerness.len() != n {
            return Err(Error::Shape {
                expected: n,
                actual: self.centerness.len(),
            });
        }
        if !self.boxes.is_empty() && self.boxes.len() != n {
            return Err(Error::Shape {
                expected: n,
                actual: self.boxes.len(),
            });
        }
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.scores.iter().all(unit) || !self.centerness.iter().all(unit) {
            return Err(Error::Domain(format!(
                "level {}: scores and centerness must lie in [0, 1]",
                self.level
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_scores(&self, cell: usize) -> &[f64] {
        &self.scores[cell * self.num_classes..(cell + 1) * self.num_classes]
    }

    /// Max class score and its class (first class wins ties).
    pub fn max_score(&self, cell: usize) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, &s) in self.cell_scores(cell).iter().enumerate() {
            if s > best.0 {
                best = (s, k);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellConfidence {
    pub joint: f64,
    pub score: f64,
    pub class: usize,
    pub centerness: f64,
}

/// Per-cell `max_class_score * centerness`, with the argmax class.
pub fn joint_confidence(pred: &DensePrediction) -> Vec<CellConfidence> {
    (0..pred.len())
        .map(|cell| {
            let (score, class) = pred.max_score(cell);
            let centerness = pred.centerness[cell];
            CellConfidence {
                joint: score * centerness,
                score,
                class,
                centerness,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopkScope {
    /// One top-k pool over P3 and P4 together.
    #[default]
    Joint,
    /// Separate top-k per low level.
    PerLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaConfig {
    pub topk: usize,
    pub score_thresh: f64,
    pub low_levels: Vec<u32>,
    pub high_levels: Vec<u32>,
    pub topk_scope: TopkScope,
}

impl Default for SlaConfig {
    fn default() -> Self {
        Self {
            topk: 2000,
            score_thresh: 0.02,
            low_levels: vec![3, 4],
            high_levels: vec![5, 6, 7],
            topk_scope: TopkScope::Joint,
        }
    }
}

impl SlaConfig {
    pub fn new(score_thresh: f64, topk: usize) -> Self {
        Self {
            topk,
            score_thresh,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 {
            return Err(Error::Config("topk must be at least 1".to_string()));
        }
        if !(self.score_thresh > 0.0 && self.score_thresh < 1.0) {
            return Err(Error::Config(format!(
                "score threshold must lie in (0, 1), got {}",
                self.score_thresh
            )));
        }
        let mut all: Vec<u32> = self
            .low_levels
            .iter()
            .chain(&self.high_levels)
            .copied()
            .collect();
        all.sort_unstable();
        if all != LEVELS {
            return Err(Error::Config(
                "low and high levels must partition P3..P7".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabel {
    pub level: u32,
    pub cell: usize,
    pub class: usize,
    /// Teacher max class score, used as the classification target.
    pub score: f64,
    pub centerness: f64,
    /// Localization weight applied to the centerness and regression losses.
    pub weight: f64,
    pub teacher_box: Option<RotatedBox>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    /// Sorted by `(level, cell)`.
    pub entries: Vec<PseudoLabel>,
    /// Cells across every level considered.
    pub n_all: usize,
}

impl PseudoLabelSet {
    pub fn n_pos(&self) -> usize {
        self.entries.len()
    }

    pub fn keys(&self) -> Vec<(u32, usize)> {
        self.entries.iter().map(|e| (e.level, e.cell)).collect()
    }

    fn from_unsorted(mut entries: Vec<PseudoLabel>, n_all: usize) -> Self {
        entries.sort_by_key(|e| (e.level, e.cell));
        Self { entries, n_all }
    }
}

/// Looks up each of P3..P7 exactly once.
fn by_level(preds: &[DensePrediction]) -> Result<[&DensePrediction; 5]> {
    let mut slots: [Option<&DensePrediction>; 5] = [None; 5];
    for p in preds {
        p.validate()?;
        let idx = LEVELS
            .iter()
            .position(|&l| l == p.level)
            .ok_or_else(|| Error::Config(format!("unexpected FPN level {}", p.level)))?;
        if slots[idx].replace(p).is_some() {
            return Err(Error::Config(format!("level {} given twice", p.level)));
        }
    }
    let mut out = Vec::with_capacity(5);
    for (i, s) in slots.into_iter().enumerate() {
        out.push(s.ok_or_else(|| Error::Config(format!("missing prediction for P{}", LEVELS[i])))?);
    }
    Ok(out.try_into().expect("five levels"))
}

fn make_entry(
    pred: &DensePrediction,
    cell: usize,
    conf: &CellConfidence,
    weight: f64,
) -> PseudoLabel {
    PseudoLabel {
        level: pred.level,
        cell,
        class: conf.class,
        score: conf.score,
        centerness: conf.centerness,
        weight,
        teacher_box: pred.boxes.get(cell).copied(),
    }
}

/// Joint confidence descending, then centerness descending, then `(level, cell)`.
fn rank_low(a: &(u32, usize, CellConfidence), b: &(u32, usize, CellConfidence)) -> Ordering {
    desc_score(a.2.joint, b.2.joint)
        .then(desc_score(a.2.centerness, b.2.centerness))
        .then(a.0.cmp(&b.0))
        .then(a.1.cmp(&b.1))
}

/// Scale-aware selection over all five levels of one image.
pub fn sla_select(preds: &[DensePrediction], cfg: &SlaConfig) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    let levels = by_level(preds)?;
    let n_all = levels.iter().map(|p| p.len()).sum();
    let mut entries = Vec::new();

    let low: Vec<&DensePrediction> = levels
        .iter()
        .copied()
        .filter(|p| cfg.low_levels.contains(&p.level))
        .collect();
    let pools: Vec<Vec<&DensePrediction>> = match cfg.topk_scope {
        TopkScope::Joint => vec![low],
        TopkScope::PerLevel => low.into_iter().map(|p| vec![p]).collect(),
    };
    for pool in pools {
        let mut cands: Vec<(u32, usize, CellConfidence)> = pool
            .iter()
            .flat_map(|p| {
                joint_confidence(p)
                    .into_iter()
                    .enumerate()
                    .map(move |(cell, c)| (p.level, cell, c))
            })
            .collect();
        let k = cfg.topk.min(cands.len());
        if k < cands.len() {
            cands.select_nth_unstable_by(k, rank_low);
            cands.truncate(k);
        }
        for (level, cell, conf) in cands {
            if conf.score >= cfg.score_thresh {
                let pred = pool.iter().find(|p| p.level == level).expect("pool level");
                entries.push(make_entry(pred, cell, &conf, conf.score * conf.centerness));
            }
        }
    }

    for pred in levels.iter().filter(|p| cfg.high_levels.contains(&p.level)) {
        for (cell, conf) in joint_confidence(pred).iter().enumerate() {
            if conf.score >= cfg.score_thresh {
                entries.push(make_entry(pred, cell, conf, conf.score));
            }
        }
    }
    Ok(PseudoLabelSet::from_unsorted(entries, n_all))
}

/// Ranking key for the fixed-ratio baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioKey {
    /// Max class score (Dense Teacher).
    Score,
    /// Max class score times centerness.
    Joint,
}

/// `ceil(ratio * n)`, tolerant of representation error in `ratio`.
pub fn ratio_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let k = if (x - x.round()).abs() <= 1e-9 * x.max(1.0) {
        x.round()
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

/// Global top `ceil(ratio * N_all)` cells across every given level.
pub fn ratio_select(
    preds: &[DensePrediction],
    ratio: f64,
    key: RatioKey,
) -> Result<PseudoLabelSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let mut cands: Vec<(f64, u32, usize, CellConfidence, &DensePrediction)> = Vec::new();
    for p in preds {
        p.validate()?;
        for (cell, c) in joint_confidence(p).into_iter().enumerate() {
            let k = match key {
                RatioKey::Score => c.score,
                RatioKey::Joint => c.joint,
            };
            cands.push((k, p.level, cell, c, p));
        }
    }
    let n_all = cands.len();
    let k = ratio_count(ratio, n_all);
    let cmp = |a: &(f64, u32, usize, CellConfidence, &DensePrediction),
               b: &(f64, u32, usize, CellConfidence, &DensePrediction)| {
        desc_score(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if k < cands.len() {
        cands.select_nth_unstable_by(k, cmp);
        cands.truncate(k);
    }
    let entries = cands
        .into_iter()
        .map(|(_, _, cell, c, p)| make_entry(p, cell, &c, c.score))
        .collect();
    Ok(PseudoLabelSet::from_unsorted(entries, n_all))
}

/// Dense Teacher baseline: top `ratio` of cells by max class score.
pub fn score_ratio_select(preds: &[DensePrediction], ratio: f64) -> Result<PseudoLabelSet> {
    ratio_select(preds, ratio, RatioKey::Score)
}

/// Post-processed pseudo-boxes: cells with max score `>= score_thresh`,
/// class-agnostic rotated NMS. Boxes carry the argmax class.
pub fn pseudo_boxes(
    preds: &[DensePrediction],
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<ScoredBox>> {
    let mut cands = Vec::new();
    for p in preds {
        p.validate()?;
        if p.boxes.is_empty() {
            return Err(Error::Consistency(format!(
                "level {} carries no decoded boxes",
                p.level
            )));
        }
        for cell in 0..p.len() {
            let (score, class) = p.max_score(cell);
            if score >= score_thresh {
                cands.push(ScoredBox {
                    bbox: p.boxes[cell].with_category(class),
                    score,
                });
            }
        }
    }
    let keep = rotated_nms(&cands, nms_iou)?;
    Ok(keep.into_iter().map(|i| cands[i]).collect())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ScoresField {
    PerCell(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    level: u32,
    h: usize,
    w: usize,
    scores: ScoresField,
    centerness: Vec<f64>,
    #[serde(default)]
    boxes: Vec<[f64; 5]>,
}

impl PredictionRecord {
    fn into_prediction(self) -> Result<DensePrediction> {
        let n = self.h * self.w;
        let (num_classes, scores) = match self.scores {
            ScoresField::PerCell(rows) => {
                let k = rows.first().map_or(1, Vec::len);
                if rows.iter().any(|r| r.len() != k) {
                    return Err(Error::Domain("ragged score rows".to_string()));
                }
                (k, rows.into_iter().flatten().collect())
            }
            ScoresField::Flat(v) => (1, v),
        };
        let boxes = self
            .boxes
            .into_iter()
            .map(|[cx, cy, w, h, t]| RotatedBox::new(cx, cy, w, h, t))
            .collect::<Result<Vec<_>>>()?;
        if scores.len() != n * num_classes {
            return Err(Error::Shape {
                expected: n * num_classes,
                actual: scores.len(),
            });
        }
        DensePrediction::new(
            self.level,
            self.w,
            self.h,
            num_classes,
            scores,
            self.centerness,
            boxes,
        )
    }

    fn from_prediction(p: &DensePrediction) -> Self {
        Self {
            level: p.level,
            h: p.height,
            w: p.width,
            scores: ScoresField::PerCell(
                p.scores
                    .chunks(p.num_classes)
                    .map(<[f64]>::to_vec)
                    .collect(),
            ),
            centerness: p.centerness.clone(),
            boxes: p
                .boxes
                .iter()
                .map(|b| [b.cx, b.cy, b.w, b.h, b.theta])
                .collect(),
        }
    }
}

/// Reads a JSON-lines prediction dump (one record per level). Errors name the line.
pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<DensePrediction>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = || -> Result<DensePrediction> {
            let rec: PredictionRecord = serde_json::from_str(&line)?;
            rec.into_prediction()
        };
        out.push(parse().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(out: &mut W, preds: &[DensePrediction]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut *out, &PredictionRecord::from_prediction(p))?;
        writeln!(out)?;
    }
    Ok(())
}

pub const SELECTION_CSV_HEADER: &str = "level,cell,class,score,centerness,weight";

pub fn write_selection_csv<W: Write>(out: &mut W, set: &PseudoLabelSet) -> Result<()> {
    writeln!(out, "{SELECTION_CSV_HEADER}")?;
    for e in &set.entries {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.level, e.cell, e.class, e.score, e.centerness, e.weight
        )?;
    }
    Ok(())
}

/// Reads a selection CSV back. `n_all` is not stored in the file and is left 0.
pub fn read_selection_csv<R: BufRead>(reader: R) -> Result<PseudoLabelSet> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if lineno == 1 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let err = |m: &str| Error::Parse {
            line: lineno,
            message: m.to_string(),
        };
        if f.len() != 6 {
            return Err(err("expected 6 fields"));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| err("non-numeric field"))
        };
        let int = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| err("non-integer field"))
        };
        entries.push(PseudoLabel {
            level: int(f[0])? as u32,
            cell: int(f[1])?,
            class: int(f[2])?,
            score: num(f[3])?,
            centerness: num(f[4])?,
            weight: num(f[5])?,
            teacher_box: None,
        });
    }
    Ok(PseudoLabelSet::from_unsorted(entries, 0))
}
