//! Synthetic teacher-student harness: random oriented scenes, a noisy dense
//! teacher derived from ground truth, selection-strategy ablations and the
//! EMA parameter update.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{
    assign_pyramid, AssignOptions, AssignmentResult, FeatureGrid, Sampling, MIN_LEVEL,
};
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::losses::pairwise_sum;
use crate::metrics::{pixel_pr, PixelPRResult};
use crate::pseudo_label::{
    ratio_select, sla_select, DensePrediction, PseudoLabelSet, RatioKey, SlaConfig,
};

/// Maximum pairwise IoU between generated objects.
pub const MAX_SCENE_IOU: f64 = 0.3;
/// Placement attempts per object before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleDistribution {
    #[default]
    Uniform,
    AxisAligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Long side, sampled log-uniformly.
    pub min_size: f64,
    pub max_size: f64,
    /// Short side over long side, sampled uniformly.
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub angle: AngleDistribution,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 1024,
            min_objects: 60,
            max_objects: 120,
            min_size: 16.0,
            max_size: 256.0,
            min_aspect: 0.1,
            max_aspect: 1.0,
            angle: AngleDistribution::Uniform,
            num_classes: 16,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "image size and class count must be positive".to_string(),
            ));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("empty object count range".to_string()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size.is_finite()) {
            return Err(Error::Config(
                "size range must be positive and non-empty".to_string(),
            ));
        }
        if !(self.min_aspect > 0.0 && self.min_aspect <= self.max_aspect && self.max_aspect <= 1.0)
        {
            return Err(Error::Config(
                "aspect range must be non-empty within (0, 1]".to_string(),
            ));
        }
        if self.min_size > self.image_size as f64 {
            return Err(Error::Config("objects cannot fit in the image".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Center jitter std as a fraction of `min(w, h)`.
    pub center_sigma: f64,
    /// Log-space std of width and height.
    pub size_sigma: f64,
    /// Radians.
    pub angle_sigma: f64,
    pub score_tp_mean: f64,
    pub score_tp_std: f64,
    pub score_fp_mean: f64,
    pub score_fp_std: f64,
    pub centerness_noise_std: f64,
    /// Expected false-positive spikes per background cell.
    pub fp_rate: f64,
    /// Score multiplier for true positives on P3..P7.
    pub level_attenuation: [f64; 5],
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            center_sigma: 0.1,
            size_sigma: 0.1,
            angle_sigma: 0.05,
            score_tp_mean: 0.5,
            score_tp_std: 0.2,
            score_fp_mean: 0.05,
            score_fp_std: 0.05,
            centerness_noise_std: 0.1,
            fp_rate: 0.002,
            level_attenuation: [1.0, 0.9, 0.7, 0.5, 0.35],
            seed: 0,
        }
    }
}

impl NoiseModel {
    /// No jitter, no false positives, no attenuation.
    pub fn exact() -> Self {
        Self {
            center_sigma: 0.0,
            size_sigma: 0.0,
            angle_sigma: 0.0,
            score_tp_std: 0.0,
            score_fp_std: 0.0,
            centerness_noise_std: 0.0,
            fp_rate: 0.0,
            level_attenuation: [1.0; 5],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stds = [
            self.center_sigma,
            self.size_sigma,
            self.angle_sigma,
            self.score_tp_std,
            self.score_fp_std,
            self.centerness_noise_std,
        ];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(
                "noise standard deviations must be finite and >= 0".to_string(),
            ));
        }
        if !(0.0..=0.1).contains(&self.fp_rate) {
            return Err(Error::Config(format!(
                "fp_rate must lie in [0, 0.1], got {}",
                self.fp_rate
            )));
        }
        if ![self.score_tp_mean, self.score_fp_mean]
            .iter()
            .all(|m| (0.0..=1.0).contains(m))
        {
            return Err(Error::Config("score means must lie in [0, 1]".to_string()));
        }
        if !self.level_attenuation.iter().all(|a| *a > 0.0 && *a <= 1.0) {
            return Err(Error::Config(
                "level attenuation factors must lie in (0, 1]".to_string(),
            ));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + std * z
}

/// Random scene with every box inside the image and pairwise IoU capped at
/// [`MAX_SCENE_IOU`].
pub fn generate_scene(cfg: &SceneConfig) -> Result<Vec<RotatedBox>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let size = cfg.image_size as f64;
    let (ln_lo, ln_hi) = (cfg.min_size.ln(), cfg.max_size.ln());
    let mut boxes: Vec<RotatedBox> = Vec::with_capacity(count);
    for placed in 0..count {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let long = (ln_lo + (ln_hi - ln_lo) * rng.random::<f64>()).exp();
            let aspect = cfg.min_aspect + (cfg.max_aspect - cfg.min_aspect) * rng.random::<f64>();
            let theta = match cfg.angle {
                AngleDistribution::Uniform => {
                    -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * rng.random::<f64>()
                }
                AngleDistribution::AxisAligned => 0.0,
            };
            let (w, h) = (long, long * aspect);
            let (c, s) = (theta.cos().abs(), theta.sin().abs());
            let ex = (w * c + h * s) / 2.0;
            let ey = (w * s + h * c) / 2.0;
            if 2.0 * ex > size || 2.0 * ey > size {
                continue;
            }
            let cx = ex + (size - 2.0 * ex) * rng.random::<f64>();
            let cy = ey + (size - 2.0 * ey) * rng.random::<f64>();
            let category = rng.random_range(0..cfg.num_classes);
            let b = RotatedBox::new(cx, cy, w, h, theta)?.with_category(category);
            if boxes.iter().all(|o| rotated_iou(o, &b) <= MAX_SCENE_IOU) {
                boxes.push(b);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Placement {
                requested: count,
                placed,
            });
        }
    }
    Ok(boxes)
}

fn jitter_box(b: &RotatedBox, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> Result<RotatedBox> {
    let scale = b.w.min(b.h) * noise.center_sigma;
    let cx = normal(rng, b.cx, scale);
    let cy = normal(rng, b.cy, scale);
    let w = b.w * normal(rng, 0.0, noise.size_sigma).exp();
    let h = b.h * normal(rng, 0.0, noise.size_sigma).exp();
    let theta = normal(rng, b.theta, noise.angle_sigma);
    let mut out = RotatedBox::new(cx, cy, w, h, theta)?;
    out.category = b.category;
    Ok(out)
}

/// Dense teacher output for one image. Cells positive under the level-routed
/// Gaussian assignment carry a jittered copy of their box, a class score drawn
/// around `score_tp_mean` and attenuated per level, and the true centerness
/// plus noise. Background cells spike with probability `fp_rate`.
pub fn simulate_teacher(
    boxes: &[RotatedBox],
    grids: &[FeatureGrid],
    num_classes: usize,
    noise: &NoiseModel,
) -> Result<Vec<DensePrediction>> {
    noise.validate()?;
    let gt = assign_pyramid(boxes, grids, Sampling::Gaussian, AssignOptions::default())?;
    simulate_teacher_from(boxes, &gt, num_classes, noise)
}

/// [`simulate_teacher`] over an existing Gaussian assignment.
pub fn simulate_teacher_from(
    boxes: &[RotatedBox],
    gt: &[AssignmentResult],
    num_classes: usize,
    noise: &NoiseModel,
) -> Result<Vec<DensePrediction>> {
    noise.validate()?;
    if num_classes == 0 {
        return Err(Error::Config("need at least one class".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(1);
    let mut out = Vec::with_capacity(gt.len());
    for a in gt {
        let grid = a.grid;
        let att = noise.level_attenuation[(grid.level - MIN_LEVEL) as usize];
        let n = grid.len();
        let s = grid.stride as f64;
        let mut scores = vec![0.0; n * num_classes];
        let mut centerness = vec![0.0; n];
        let mut pred_boxes = Vec::with_capacity(n);
        for (cell, target) in a.cells.iter().enumerate() {
            if let Some(id) = target.box_id {
                let b = &boxes[id];
                let class = b.category.unwrap_or(0).min(num_classes - 1);
                let raw = normal(&mut rng, noise.score_tp_mean, noise.score_tp_std).clamp(0.0, 1.0);
                scores[cell * num_classes + class] = att * raw;
                centerness[cell] =
                    normal(&mut rng, target.centerness, noise.centerness_noise_std).clamp(0.0, 1.0);
                pred_boxes.push(jitter_box(b, noise, &mut rng)?);
            } else {
                if rng.random::<f64>() < noise.fp_rate {
                    let class = rng.random_range(0..num_classes);
                    scores[cell * num_classes + class] =
                        normal(&mut rng, noise.score_fp_mean, noise.score_fp_std).clamp(0.0, 1.0);
                }
                centerness[cell] =
                    normal(&mut rng, 0.0, noise.centerness_noise_std).clamp(0.0, 1.0);
                let p = grid.cell_point(cell);
                pred_boxes.push(RotatedBox::new(p.x, p.y, 2.0 * s, 2.0 * s, 0.0)?);
            }
        }
        out.push(DensePrediction::new(
            grid.level,
            grid.width,
            grid.height,
            num_classes,
            scores,
            centerness,
            pred_boxes,
        )?);
    }
    Ok(out)
}

/// `m * teacher + (1 - m) * student`, element-wise.
pub fn ema_update(teacher: &[f64], student: &[f64], momentum: f64) -> Result<Vec<f64>> {
    if teacher.len() != student.len() {
        return Err(Error::Shape {
            expected: teacher.len(),
            actual: student.len(),
        });
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    if teacher.iter().chain(student).any(|v| !v.is_finite()) {
        return Err(Error::Domain("parameters must be finite".to_string()));
    }
    Ok(teacher
        .iter()
        .zip(student)
        .map(|(t, s)| momentum * t + (1.0 - momentum) * s)
        .collect())
}

/// Pseudo-label selection strategy compared in an ablation.
///
/// Text form: `sla:THR:TOPK`, `score_ratio:R` or `joint_ratio:R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Sla { score_thresh: f64, topk: usize },
    ScoreRatio { ratio: f64 },
    JointRatio { ratio: f64 },
}

impl Strategy {
    pub fn select(&self, preds: &[DensePrediction]) -> Result<PseudoLabelSet> {
        match *self {
            Strategy::Sla { score_thresh, topk } => {
                sla_select(preds, &SlaConfig::new(score_thresh, topk))
            }
            Strategy::ScoreRatio { ratio } => ratio_select(preds, ratio, RatioKey::Score),
            Strategy::JointRatio { ratio } => ratio_select(preds, ratio, RatioKey::Joint),
        }
    }

    /// The selector rows of the SLA ablation table.
    pub fn table_defaults() -> Vec<Strategy> {
        let mut v = vec![
            Strategy::ScoreRatio { ratio: 0.01 },
            Strategy::ScoreRatio { ratio: 0.03 },
            Strategy::JointRatio { ratio: 0.03 },
        ];
        for topk in [1500, 2000] {
            for score_thresh in [0.01, 0.02, 0.03] {
                v.push(Strategy::Sla { score_thresh, topk });
            }
        }
        v
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Sla { score_thresh, topk } => write!(f, "sla:{score_thresh}:{topk}"),
            Strategy::ScoreRatio { ratio } => write!(f, "score_ratio:{ratio}"),
            Strategy::JointRatio { ratio } => write!(f, "joint_ratio:{ratio}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "bad strategy '{s}' (expected sla:THR:TOPK, score_ratio:R or joint_ratio:R)"
            ))
        };
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<f64>().map_err(|_| bad());
        let strategy = match parts.as_slice() {
            ["sla", thr, topk] => Strategy::Sla {
                score_thresh: num(thr)?,
                topk: topk.parse().map_err(|_| bad())?,
            },
            ["score_ratio", r] => Strategy::ScoreRatio { ratio: num(r)? },
            ["joint_ratio", r] => Strategy::JointRatio { ratio: num(r)? },
            _ => return Err(bad()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::Sla { score_thresh, topk } => SlaConfig::new(score_thresh, topk).validate(),
            Strategy::ScoreRatio { ratio } | Strategy::JointRatio { ratio } => {
                if ratio > 0.0 && ratio <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "ratio must lie in (0, 1], got {ratio}"
                    )))
                }
            }
        }
    }
}

/// Flat simulator configuration, one key per scene or noise field. The scene
/// and teacher seeds of repetition `r` are both `seed + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub image_size: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub angle: AngleDistribution,
    pub num_classes: usize,
    pub seed: u64,
    pub center_sigma: f64,
    pub size_sigma: f64,
    pub angle_sigma: f64,
    pub score_tp_mean: f64,
    pub score_tp_std: f64,
    pub score_fp_mean: f64,
    pub score_fp_std: f64,
    pub centerness_noise_std: f64,
    pub fp_rate: f64,
    pub level_attenuation: [f64; 5],
    pub repetitions: usize,
    /// Strategy strings; empty means the ablation-table defaults.
    pub strategies: Vec<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::from_parts(
            &SceneConfig::default(),
            &NoiseModel::default(),
            100,
            Vec::new(),
        )
    }
}

impl SimConfig {
    pub fn from_parts(
        scene: &SceneConfig,
        noise: &NoiseModel,
        repetitions: usize,
        strategies: Vec<String>,
    ) -> Self {
        Self {
            image_size: scene.image_size,
            min_objects: scene.min_objects,
            max_objects: scene.max_objects,
            min_size: scene.min_size,
            max_size: scene.max_size,
            min_aspect: scene.min_aspect,
            max_aspect: scene.max_aspect,
            angle: scene.angle,
            num_classes: scene.num_classes,
            seed: scene.seed,
            center_sigma: noise.center_sigma,
            size_sigma: noise.size_sigma,
            angle_sigma: noise.angle_sigma,
            score_tp_mean: noise.score_tp_mean,
            score_tp_std: noise.score_tp_std,
            score_fp_mean: noise.score_fp_mean,
            score_fp_std: noise.score_fp_std,
            centerness_noise_std: noise.centerness_noise_std,
            fp_rate: noise.fp_rate,
            level_attenuation: noise.level_attenuation,
            repetitions,
            strategies,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_toml_str(&text).map_err(|e| e.in_file(path))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn scene(&self, repetition: usize) -> SceneConfig {
        SceneConfig {
            image_size: self.image_size,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size: self.min_size,
            max_size: self.max_size,
            min_aspect: self.min_aspect,
            max_aspect: self.max_aspect,
            angle: self.angle,
            num_classes: self.num_classes,
            seed: self.rep_seed(repetition),
        }
    }

    pub fn noise(&self, repetition: usize) -> NoiseModel {
        NoiseModel {
            center_sigma: self.center_sigma,
            size_sigma: self.size_sigma,
            angle_sigma: self.angle_sigma,
            score_tp_mean: self.score_tp_mean,
            score_tp_std: self.score_tp_std,
            score_fp_mean: self.score_fp_mean,
            score_fp_std: self.score_fp_std,
            centerness_noise_std: self.centerness_noise_std,
            fp_rate: self.fp_rate,
            level_attenuation: self.level_attenuation,
            seed: self.rep_seed(repetition),
        }
    }

    pub fn rep_seed(&self, repetition: usize) -> u64 {
        self.seed.wrapping_add(repetition as u64)
    }

    pub fn parsed_strategies(&self) -> Result<Vec<Strategy>> {
        if self.strategies.is_empty() {
            return Ok(Strategy::table_defaults());
        }
        self.strategies.iter().map(|s| s.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene(0).validate()?;
        self.noise(0).validate()?;
        if self.repetitions == 0 {
            return Err(Error::Config("need at least one repetition".to_string()));
        }
        self.parsed_strategies()?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Pixel recall/precision of every strategy on one seeded scene.
pub fn run_repetition(
    cfg: &SimConfig,
    strategies: &[Strategy],
    repetition: usize,
) -> Result<Vec<PixelPRResult>> {
    let boxes = generate_scene(&cfg.scene(repetition))?;
    let grids = FeatureGrid::pyramid(cfg.image_size, cfg.image_size)?;
    let gt = assign_pyramid(&boxes, &grids, Sampling::Gaussian, AssignOptions::default())?;
    let preds = simulate_teacher_from(&boxes, &gt, cfg.num_classes, &cfg.noise(repetition))?;
    strategies
        .iter()
        .map(|s| pixel_pr(&s.select(&preds)?, &gt, false))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub repetitions: usize,
}

/// Mean and sample standard deviation, summed in sorted order so the result
/// does not depend on how repetitions were scheduled.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = pairwise_sum(&v) / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (pairwise_sum(&sq) / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

/// Every strategy on `cfg.repetitions` seeded scenes, in parallel.
pub fn run_ablation(cfg: &SimConfig, strategies: &[Strategy]) -> Result<Ablation> {
    cfg.validate()?;
    if strategies.is_empty() {
        return Err(Error::Config("need at least one strategy".to_string()));
    }
    for s in strategies {
        s.validate()?;
    }
    let per_rep: Vec<Vec<PixelPRResult>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(cfg, strategies, r))
        .collect::<Result<_>>()?;
    let rows = strategies
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let recall: Vec<f64> = per_rep.iter().map(|r| r[i].recall).collect();
            let precision: Vec<f64> = per_rep.iter().map(|r| r[i].precision).collect();
            let (recall_mean, recall_std) = mean_std(&recall);
            let (precision_mean, precision_std) = mean_std(&precision);
            AblationRow {
                strategy: s.to_string(),
                recall_mean,
                recall_std,
                precision_mean,
                precision_std,
                repetitions: cfg.repetitions,
            }
        })
        .collect();
    Ok(Ablation {
        rows,
        seeds: (0..cfg.repetitions).map(|r| cfg.rep_seed(r)).collect(),
    })
}

pub fn write_ablation_csv<W: Write>(out: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(
        out,
        "strategy,recall_mean,recall_std,precision_mean,precision_std,repetitions"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.strategy,
            r.recall_mean,
            r.recall_std,
            r.precision_mean,
            r.precision_std,
            r.repetitions
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub config: SimConfig,
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
}

impl RunManifest {
    pub fn new(cfg: &SimConfig, strategies: &[Strategy], ablation: &Ablation) -> Self {
        Self {
            config_sha256: cfg.hash(),
            config: cfg.clone(),
            strategies: strategies.iter().map(ToString::to_string).collect(),
            seeds: ablation.seeds.clone(),
        }
    }
}
