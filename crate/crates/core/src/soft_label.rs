//! Centerness-based soft classification targets.
//!
//! A positive cell's one-hot class entry is replaced by
//! `y = (1 - mahalanobis_sq)^gamma`, where `gamma` grows with the box's share
//! of the image. Small boxes get a small exponent, which pulls all of their
//! targets toward 1 and keeps the in-box target variance low.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentResult;
use crate::error::{Error, Result};
use crate::geometry::{box_to_gaussian, mahalanobis_sq, Gaussian2D, Point2, RotatedBox};

/// Slack on the ellipse test before a point counts as outside.
const BOUNDARY_SLACK: f64 = 1e-9;

/// Bases below this are rounding noise at the ellipse boundary and map to 0.
const BOUNDARY_SNAP: f64 = 1e-12;

/// How the smoothing parameter enters the exponent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentConvention {
    /// `gamma = x^(1/beta)`.
    #[default]
    Root,
    /// `gamma = x^beta`.
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcslParams {
    pub beta_smooth: f64,
    pub image_w: f64,
    pub image_h: f64,
    pub convention: ExponentConvention,
}

impl Default for CcslParams {
    fn default() -> Self {
        Self {
            beta_smooth: 0.2,
            image_w: 1024.0,
            image_h: 1024.0,
            convention: ExponentConvention::Root,
        }
    }
}

impl CcslParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.image_w >= 1.0 && self.image_h >= 1.0) {
            return Err(Error::Config(format!(
                "image size must be at least 1x1, got {}x{}",
                self.image_w, self.image_h
            )));
        }
        if !(self.beta_smooth >= 0.0) || !self.beta_smooth.is_finite() {
            return Err(Error::Config(format!(
                "smoothing beta must be finite and non-negative, got {}",
                self.beta_smooth
            )));
        }
        Ok(())
    }
}

/// `gamma` for a box. `beta = 0` means plain centerness (`gamma = 1`).
pub fn scale_factor(b: &RotatedBox, params: &CcslParams) -> Result<f64> {
    params.validate()?;
    if params.beta_smooth == 0.0 {
        return Ok(1.0);
    }
    let x = (b.w * b.h / (params.image_w * params.image_h)).min(1.0);
    Ok(match params.convention {
        ExponentConvention::Root => x.powf(1.0 / params.beta_smooth),
        ExponentConvention::Power => x.powf(params.beta_smooth),
    })
}

/// `y = clamp(1 - mahalanobis_sq, 0, 1)^gamma` for a point inside the ellipse.
pub fn ccsl_value(g: &Gaussian2D, p: Point2, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let d = mahalanobis_sq(g, p)?;
    if d > 1.0 + BOUNDARY_SLACK {
        return Err(Error::Domain(format!(
            "point ({}, {}) lies outside the box ellipse (distance^2 = {d})",
            p.x, p.y
        )));
    }
    Ok(soft_value(1.0 - d, gamma))
}

fn soft_value(base: f64, gamma: f64) -> f64 {
    if base < BOUNDARY_SNAP {
        return 0.0;
    }
    base.min(1.0).powf(gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SoftTarget {
    pub class: usize,
    pub y: f64,
}

/// Per-cell soft targets for one grid; `None` cells keep an all-zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub level: u32,
    pub cells: Vec<Option<SoftTarget>>,
}

impl SoftTargets {
    /// Dense target vector for one cell.
    pub fn target_vector(&self, cell: usize, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        if let Some(t) = self.cells[cell] {
            if t.class < num_classes {
                v[t.class] = t.y;
            }
        }
        v
    }
}

/// Soft targets for an assignment made against `boxes`.
///
/// Each positive cell's centerness is recomputed from its assigned box and
/// must match the stored target; anything else means the assignment was made
/// against different boxes. Cells outside the ellipse (possible under
/// rectangle-based sampling) get `y = 0`.
pub fn build_soft_targets(
    assignment: &AssignmentResult,
    boxes: &[RotatedBox],
    params: &CcslParams,
) -> Result<SoftTargets> {
    params.validate()?;
    let grid = &assignment.grid;
    let mut cells = vec![None; assignment.cells.len()];
    for (cell, target) in assignment.cells.iter().enumerate() {
        let Some(id) = target.box_id else { continue };
        let b = boxes.get(id).ok_or_else(|| {
            Error::Consistency(format!(
                "cell {cell} refers to box {id}, only {} given",
                boxes.len()
            ))
        })?;
        let g = box_to_gaussian(b)?;
        let base = 1.0 - mahalanobis_sq(&g, grid.cell_point(cell))?;
        if (base.clamp(0.0, 1.0) - target.centerness).abs() > 1e-9 {
            return Err(Error::Consistency(format!(
                "cell {cell}: centerness {} does not match box {id} ({base})",
                target.centerness
            )));
        }
        let gamma = scale_factor(b, params)?;
        cells[cell] = Some(SoftTarget {
            class: target.label.unwrap_or(0),
            y: soft_value(base, gamma),
        });
    }
    Ok(SoftTargets {
        level: grid.level,
        cells,
    })
}

/// CSV dump `level,cell,class,y` of the positive cells.
pub fn write_soft_targets_csv<W: Write>(out: &mut W, targets: &[SoftTargets]) -> Result<()> {
    writeln!(out, "level,cell,class,y")?;
    for t in targets {
        for (cell, st) in t.cells.iter().enumerate() {
            if let Some(st) = st {
                writeln!(out, "{},{},{},{}", t.level, cell, st.class, st.y)?;
            }
        }
    }
    Ok(())
}
