//! Scalar losses with analytic derivatives and the per-image aggregations.
//!
//! Reductions use [`pairwise_sum`] over cells in index order, so a fixed
//! input order gives bit-identical results and any reordering changes the
//! value only by rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside logarithms.
pub const EPS: f64 = 1e-7;

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn ln_clamped(p: f64) -> f64 {
    p.max(EPS).ln()
}

/// Quality focal loss `-|y - s|^f * [(1 - y) ln(1 - s) + y ln s]` and its
/// derivative with respect to `s`.
pub fn qfl(sigma: f64, y: f64, focusing: f64) -> Result<(f64, f64)> {
    check_unit("QFL target", y)?;
    if !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "QFL prediction must be finite, got {sigma}"
        )));
    }
    let s = sigma.clamp(EPS, 1.0 - EPS);
    // the modulating factor uses the unclamped prediction so that s == y costs 0
    let diff = sigma.clamp(0.0, 1.0) - y;
    let d = diff.abs();
    let bce = (1.0 - y) * (1.0 - s).ln() + y * s.ln();
    let dbce = -(1.0 - y) / (1.0 - s) + y / s;
    let modulate = d.powf(focusing);
    let loss = -modulate * bce;
    let dmod = if d == 0.0 || focusing == 0.0 {
        0.0
    } else {
        focusing * d.powf(focusing - 1.0) * diff.signum()
    };
    let grad = -(dmod * bce + modulate * dbce);
    Ok((loss.max(0.0), grad))
}

/// Binary cross-entropy measured from its minimum: the usual BCE minus the
/// target's entropy, so a prediction equal to the target costs exactly zero.
/// The derivative is that of plain BCE.
pub fn bce(pred: f64, target: f64) -> Result<(f64, f64)> {
    check_unit("BCE target", target)?;
    if !pred.is_finite() {
        return Err(Error::Domain(format!(
            "BCE prediction must be finite, got {pred}"
        )));
    }
    let p = pred.clamp(0.0, 1.0);
    let mut loss = 0.0;
    if target > 0.0 {
        loss += target * (target.ln() - ln_clamped(p));
    }
    if target < 1.0 {
        loss += (1.0 - target) * ((1.0 - target).ln() - ln_clamped(1.0 - p));
    }
    let pc = p.clamp(EPS, 1.0 - EPS);
    let grad = -target / pc + (1.0 - target) / (1.0 - pc);
    Ok((loss.max(0.0), grad))
}

/// Huber-style smooth L1 on `d = pred - target`.
pub fn smooth_l1(pred: f64, target: f64, delta: f64) -> (f64, f64) {
    let d = pred - target;
    if d.abs() < delta {
        (0.5 * d * d / delta, d / delta)
    } else {
        (d.abs() - 0.5 * delta, d.signum())
    }
}

/// Sum with pairwise (cascade) reduction in index order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if v.len() <= BLOCK {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the centerness and regression terms in the unsupervised loss.
    pub alpha: f64,
    /// Weight of the unsupervised loss in the total.
    pub unsup_weight: f64,
    pub qfl_focusing: f64,
    pub smooth_l1_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            unsup_weight: 1.0,
            qfl_focusing: 2.0,
            smooth_l1_delta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.unsup_weight >= 0.0
            && self.qfl_focusing >= 0.0
            && self.smooth_l1_delta > 0.0
            && [
                self.alpha,
                self.unsup_weight,
                self.qfl_focusing,
                self.smooth_l1_delta,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid loss configuration {self:?}"
            )))
        }
    }
}

/// Centerness and regression supervision for one positive cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveSample {
    pub cell: usize,
    /// Localization weight; 1 on the supervised branch.
    #[serde(default = "one")]
    pub weight: f64,
    pub centerness_pred: f64,
    pub centerness_target: f64,
    pub reg_pred: [f64; 5],
    pub reg_target: [f64; 5],
}

fn one() -> f64 {
    1.0
}

/// Predictions and targets for one image, all levels flattened together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBatch {
    pub num_classes: usize,
    /// `cells x num_classes` class probabilities.
    pub cls_pred: Vec<f64>,
    /// `cells x num_classes` soft targets.
    pub cls_target: Vec<f64>,
    pub positives: Vec<PositiveSample>,
}

impl LossBatch {
    pub fn n_all(&self) -> usize {
        self.cls_pred
            .len()
            .checked_div(self.num_classes)
            .unwrap_or(0)
    }

    pub fn n_pos(&self) -> usize {
        self.positives.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("batch needs at least one class".to_string()));
        }
        if self.cls_pred.is_empty() {
            return Err(Error::EmptyDataset("batch has no cells".to_string()));
        }
        if !self.cls_pred.len().is_multiple_of(self.num_classes) {
            return Err(Error::Shape {
                expected: self.n_all() * self.num_classes,
                actual: self.cls_pred.len(),
            });
        }
        if self.cls_target.len() != self.cls_pred.len() {
            return Err(Error::Shape {
                expected: self.cls_pred.len(),
                actual: self.cls_target.len(),
            });
        }
        let n_all = self.n_all();
        let mut seen = std::collections::HashSet::new();
        for p in &self.positives {
            if p.cell >= n_all || !seen.insert(p.cell) {
                return Err(Error::Consistency(format!(
                    "positive cell {} is out of range or repeated",
                    p.cell
                )));
            }
            if !(p.weight >= 0.0 && p.weight.is_finite()) {
                return Err(Error::Domain(format!(
                    "weight {} of cell {} is invalid",
                    p.weight, p.cell
                )));
            }
        }
        Ok(())
    }
}

/// Loss terms of one branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub cls: f64,
    pub cen: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.cen + self.reg
    }
}

/// Summed classification loss over every cell and class.
fn cls_sum(batch: &LossBatch, cfg: &LossConfig) -> Result<f64> {
    let per_cell = batch
        .cls_pred
        .chunks(batch.num_classes)
        .zip(batch.cls_target.chunks(batch.num_classes))
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(&s, &y)| qfl(s, y, cfg.qfl_focusing).map(|(l, _)| l))
                .sum::<Result<f64>>()
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&per_cell))
}

/// Weighted centerness and regression sums over positives.
fn positive_sums(batch: &LossBatch, cfg: &LossConfig) -> Result<(f64, f64)> {
    let mut cen = Vec::with_capacity(batch.n_pos());
    let mut reg = Vec::with_capacity(batch.n_pos());
    for p in &batch.positives {
        let (c, _) = bce(p.centerness_pred, p.centerness_target)?;
        let r: f64 = p
            .reg_pred
            .iter()
            .zip(&p.reg_target)
            .map(|(&a, &b)| smooth_l1(a, b, cfg.smooth_l1_delta).0)
            .sum();
        cen.push(p.weight * c);
        reg.push(p.weight * r);
    }
    Ok((pairwise_sum(&cen), pairwise_sum(&reg)))
}

/// `(1/N_all) sum QFL + (alpha/N_pos) sum w (BCE + smooth-L1)`; the second
/// part is 0 when there are no positives.
pub fn unsupervised_loss(batch: &LossBatch, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    batch.validate()?;
    let cls = cls_sum(batch, cfg)? / batch.n_all() as f64;
    let (cen, reg) = positive_sums(batch, cfg)?;
    let n_pos = batch.n_pos();
    let scale = if n_pos == 0 {
        0.0
    } else {
        cfg.alpha / n_pos as f64
    };
    Ok(LossTerms {
        cls,
        cen: scale * cen,
        reg: scale * reg,
    })
}

/// Classification over all cells, centerness and regression over positives,
/// each normalized by `max(N_pos, 1)`.
pub fn supervised_loss(batch: &LossBatch, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    batch.validate()?;
    let norm = batch.n_pos().max(1) as f64;
    let cls = cls_sum(batch, cfg)? / norm;
    let (cen, reg) = positive_sums(batch, cfg)?;
    Ok(LossTerms {
        cls,
        cen: cen / norm,
        reg: reg / norm,
    })
}

/// Per-term breakdown of `L = L_sup + unsup_weight * L_unsup`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub cen: f64,
    pub reg: f64,
    pub sup: f64,
    pub unsup: f64,
    pub total: f64,
}

pub fn total_loss(
    supervised: &LossBatch,
    unsupervised: Option<&LossBatch>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let sup = supervised_loss(supervised, cfg)?;
    let unsup = match unsupervised {
        Some(b) => unsupervised_loss(b, cfg)?,
        None => LossTerms::default(),
    };
    let lam = cfg.unsup_weight;
    Ok(LossBreakdown {
        cls: sup.cls + lam * unsup.cls,
        cen: sup.cen + lam * unsup.cen,
        reg: sup.reg + lam * unsup.reg,
        sup: sup.total(),
        unsup: unsup.total(),
        total: sup.total() + lam * unsup.total(),
    })
}
