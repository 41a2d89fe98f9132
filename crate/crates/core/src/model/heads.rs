//! Anchor-free decoder heads and the point lattice they predict on.
//!
//! Both heads are small convolution stacks whose parameters are shared by
//! every pyramid level. The classification head emits `C` logits per
//! position; the regression head emits the distances from the position to
//! the event start and end, in units of the level stride.

use serde::{Deserialize, Serialize};

use super::backbone::{conv, conv_specs, layer_norm, ln_specs, Pyramid};
use super::params::{Bound, Init, ParamSpec};
use crate::error::{Result, TslError};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Convolutions per head, counting the output layer.
    pub num_layers: usize,
    /// Initial foreground probability encoded in the classifier bias.
    pub prior_prob: f64,
    /// Regression range multiplier: level `k` owns `[base·s_{k-1}, base·s_k)`.
    pub range_base: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_layers: 3,
            prior_prob: 0.01,
            range_base: 4.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(TslError::Config(
                "head num_layers must be at least 1".into(),
            ));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(TslError::Config(format!(
                "prior_prob {} outside (0, 1)",
                self.prior_prob
            )));
        }
        if self.range_base.is_nan() || self.range_base <= 0.0 {
            return Err(TslError::Config("range_base must be positive".into()));
        }
        Ok(())
    }

    /// Classifier bias `−ln((1 − π)/π)`, so that `sigmoid(bias) = π`.
    pub fn prior_bias(&self) -> f64 {
        -((1.0 - self.prior_prob) / self.prior_prob).ln()
    }

    pub fn param_specs(&self, d_model: usize, num_classes: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (head, out) in [("cls_head", num_classes), ("reg_head", 2)] {
            for j in 0..self.num_layers - 1 {
                conv_specs(&mut specs, &format!("{head}.conv{j}"), 3, d_model, d_model);
                ln_specs(&mut specs, &format!("{head}.ln{j}"), d_model);
            }
            let name = format!("{head}.out");
            specs.push(ParamSpec::new(
                format!("{name}.weight"),
                &[3, d_model, out],
                Init::Normal(0.01),
            ));
            let bias = if head == "cls_head" {
                self.prior_bias()
            } else {
                0.0
            };
            specs.push(ParamSpec::new(
                format!("{name}.bias"),
                &[out],
                Init::Const(bias),
            ));
        }
        specs
    }
}

/// Point timestamps and regression range of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPoints {
    pub stride: usize,
    /// `(i + 0.5) · stride`, in input-grid units.
    pub timestamps: Vec<f64>,
    /// Half-open range `[lo, hi)` of the larger boundary distance, in
    /// input-grid units, for which this level is responsible.
    pub range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub levels: Vec<LevelPoints>,
}

impl PointSet {
    pub fn num_points(&self) -> usize {
        self.levels.iter().map(|l| l.timestamps.len()).sum()
    }
}

/// Lays out the point lattice for levels given as `(length, stride)`.
pub fn generate_points_for(levels: &[(usize, usize)], range_base: f64) -> PointSet {
    let n = levels.len();
    let levels = levels
        .iter()
        .enumerate()
        .map(|(k, &(len, stride))| {
            let lo = if k == 0 {
                0.0
            } else {
                range_base * levels[k - 1].1 as f64
            };
            let hi = if k + 1 == n {
                f64::INFINITY
            } else {
                range_base * stride as f64
            };
            LevelPoints {
                stride,
                timestamps: (0..len).map(|i| (i as f64 + 0.5) * stride as f64).collect(),
                range: (lo, hi),
            }
        })
        .collect();
    PointSet { levels }
}

pub fn generate_points(pyramid: &Pyramid, range_base: f64) -> PointSet {
    let shape: Vec<(usize, usize)> = pyramid.levels.iter().map(|l| (l.len(), l.stride)).collect();
    generate_points_for(&shape, range_base)
}

/// Head outputs of one pyramid level, on the tape.
#[derive(Clone, Debug)]
pub struct LevelHead {
    pub cls_logits: Var,
    pub reg_raw: Var,
    /// `softplus(reg_raw)`: start and end distances in stride units.
    pub distances: Var,
    pub stride: usize,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub levels: Vec<LevelHead>,
}

/// Plain-value copy of one level's head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelValues {
    pub cls_logits: Tensor,
    pub distances: Tensor,
    pub stride: usize,
    pub mask: Vec<bool>,
}

impl HeadOutput {
    pub fn values(&self, tape: &Tape) -> Vec<LevelValues> {
        self.levels
            .iter()
            .map(|l| LevelValues {
                cls_logits: tape.value(l.cls_logits).clone(),
                distances: tape.value(l.distances).clone(),
                stride: l.stride,
                mask: l.mask.clone(),
            })
            .collect()
    }
}

fn head_stack(
    tape: &mut Tape,
    p: &Bound,
    head: &str,
    cfg: &HeadConfig,
    eps: f64,
    x: Var,
    mask: &[bool],
) -> Result<Var> {
    let mut h = x;
    for j in 0..cfg.num_layers - 1 {
        h = conv(tape, p, &format!("{head}.conv{j}"), h, 1)?;
        h = tape.mask_rows(h, mask)?;
        h = layer_norm(tape, p, &format!("{head}.ln{j}"), h, eps)?;
        h = tape.relu(h);
        h = tape.mask_rows(h, mask)?;
    }
    let out = conv(tape, p, &format!("{head}.out"), h, 1)?;
    tape.mask_rows(out, mask)
}

/// Classification logits (`T^ℓ × C`) for every level.
pub fn classify(
    tape: &mut Tape,
    p: &Bound,
    pyramid: &Pyramid,
    cfg: &HeadConfig,
    eps: f64,
) -> Result<Vec<Var>> {
    pyramid
        .levels
        .iter()
        .map(|l| head_stack(tape, p, "cls_head", cfg, eps, l.features, &l.mask))
        .collect()
}

/// Raw regression outputs and their softplus distances (`T^ℓ × 2`).
pub fn regress(
    tape: &mut Tape,
    p: &Bound,
    pyramid: &Pyramid,
    cfg: &HeadConfig,
    eps: f64,
) -> Result<Vec<(Var, Var)>> {
    pyramid
        .levels
        .iter()
        .map(|l| {
            let raw = head_stack(tape, p, "reg_head", cfg, eps, l.features, &l.mask)?;
            Ok((raw, tape.softplus(raw)))
        })
        .collect()
}

pub fn run_heads(
    tape: &mut Tape,
    p: &Bound,
    pyramid: &Pyramid,
    cfg: &HeadConfig,
    eps: f64,
) -> Result<HeadOutput> {
    let cls = classify(tape, p, pyramid, cfg, eps)?;
    let reg = regress(tape, p, pyramid, cfg, eps)?;
    let levels = pyramid
        .levels
        .iter()
        .zip(cls)
        .zip(reg)
        .map(|((level, cls_logits), (reg_raw, distances))| LevelHead {
            cls_logits,
            reg_raw,
            distances,
            stride: level.stride,
            mask: level.mask.clone(),
        })
        .collect();
    Ok(HeadOutput { levels })
}
