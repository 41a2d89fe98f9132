//! Training objective.
//!
//! ```text
//! L = ( Σ_t L_cls(t) + λ_reg Σ_t 𝕀_t L_reg(t) ) / max(T₊, 1)
//! ```
//!
//! `L_cls` is a sigmoid focal loss summed over the `C` classes of each
//! point, `L_reg` a DIoU loss on the predicted boundary distances, `𝕀_t`
//! marks points assigned to an event and `T₊ = Σ_t 𝕀_t`.

use serde::{Deserialize, Serialize};

use crate::data::Event;
use crate::error::{Result, TslError};
use crate::model::{HeadOutput, PointSet};
use crate::tensor::{sigmoid, softplus, CustomOp, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_reg: f64,
    /// Centre-sampling radius in strides.
    pub center_radius: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            lambda_reg: 1.0,
            center_radius: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.alpha)
            && self.gamma >= 0.0
            && self.lambda_reg >= 0.0
            && self.center_radius > 0.0;
        if !ok {
            return Err(TslError::Config(format!(
                "invalid loss configuration {self:?}"
            )));
        }
        Ok(())
    }
}

/// Training targets of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAssignment {
    /// `T^ℓ × C` one-hot rows (all zero for background).
    pub class_targets: Tensor,
    pub positive: Vec<bool>,
    /// `(d_start, d_end)` in stride units; zero for background points.
    pub reg_targets: Vec<(f64, f64)>,
    /// Index of the assigned event.
    pub source: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub levels: Vec<LevelAssignment>,
    pub num_positive: usize,
}

/// Assigns every point to at most one event.
///
/// Event times are converted from seconds to grid units with `stride_sec`.
/// A point `t` on a level with stride `s` is positive for event `[a, b]`
/// when `t` lies in `[centre − ρs, centre + ρs] ∩ [a, b]` and
/// `max(t − a, b − t)` falls in the level's regression range. When several
/// events qualify the shortest wins, then the earlier start, then the lower
/// label. `valid` masks (one per level) exclude padded points.
pub fn assign_targets(
    points: &PointSet,
    events: &[Event],
    stride_sec: f64,
    num_classes: usize,
    center_radius: f64,
    valid: Option<&[Vec<bool>]>,
) -> Assignment {
    let grid: Vec<(f64, f64)> = events
        .iter()
        .map(|e| (e.start_sec / stride_sec, e.end_sec / stride_sec))
        .collect();
    let mut num_positive = 0;
    let levels = points
        .levels
        .iter()
        .enumerate()
        .map(|(li, level)| {
            let n = level.timestamps.len();
            let stride = level.stride as f64;
            let (lo, hi) = level.range;
            let mut class_targets = Tensor::zeros(&[n, num_classes]);
            let mut positive = vec![false; n];
            let mut reg_targets = vec![(0.0, 0.0); n];
            let mut source = vec![None; n];
            for (i, &t) in level.timestamps.iter().enumerate() {
                if valid.is_some_and(|v| !v[li][i]) {
                    continue;
                }
                let mut best: Option<(usize, (f64, f64, usize))> = None;
                for (k, (ev, &(a, b))) in events.iter().zip(&grid).enumerate() {
                    let centre = 0.5 * (a + b);
                    let win_lo = (centre - center_radius * stride).max(a);
                    let win_hi = (centre + center_radius * stride).min(b);
                    if t < win_lo || t > win_hi {
                        continue;
                    }
                    let reach = (t - a).max(b - t);
                    if reach < lo || reach >= hi {
                        continue;
                    }
                    let key = (b - a, a, ev.label);
                    let better = match &best {
                        None => true,
                        Some((_, bk)) => key.partial_cmp(bk) == Some(std::cmp::Ordering::Less),
                    };
                    if better {
                        best = Some((k, key));
                    }
                }
                if let Some((k, _)) = best {
                    let (a, b) = grid[k];
                    positive[i] = true;
                    source[i] = Some(k);
                    reg_targets[i] = ((t - a) / stride, (b - t) / stride);
                    class_targets.data_mut()[i * num_classes + events[k].label] = 1.0;
                    num_positive += 1;
                }
            }
            LevelAssignment {
                class_targets,
                positive,
                reg_targets,
                source,
            }
        })
        .collect();
    Assignment {
        levels,
        num_positive,
    }
}

/// Focal loss of one logit and its derivative with respect to the logit.
///
/// With `p_t = σ(±z)` (sign by target) and `α_t = α` or `1 − α`:
/// `loss = −α_t (1 − p_t)^γ log p_t`.
pub fn focal_term(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let sign = if positive { 1.0 } else { -1.0 };
    let alpha_t = if positive { alpha } else { 1.0 - alpha };
    let zt = sign * logit;
    let pt = sigmoid(zt);
    let one_minus = sigmoid(-zt);
    let neg_log_pt = softplus(-zt);
    let modulator = one_minus.powf(gamma);
    let loss = alpha_t * modulator * neg_log_pt;
    let grad = sign * alpha_t * modulator * (-gamma * pt * neg_log_pt - one_minus);
    (loss, grad)
}

/// Per-element focal losses and their sum. `targets` holds 0/1 values.
pub fn focal_loss(
    logits: &Tensor,
    targets: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<(Vec<f64>, f64)> {
    if logits.shape() != targets.shape() {
        return Err(TslError::Dimension {
            op: "focal_loss",
            lhs: logits.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let per: Vec<f64> = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &y)| focal_term(z, y > 0.5, alpha, gamma).0)
        .collect();
    let sum = per.iter().sum();
    Ok((per, sum))
}

/// `1 − DIoU` between intervals `pred = [ps, pe]` and `target = [gs, ge]`,
/// with its gradient with respect to `(ps, pe)`.
///
/// Returns zero (and zero gradient) when the enclosing interval is a single
/// point.
pub fn diou_with_grad(pred: (f64, f64), target: (f64, f64)) -> (f64, f64, f64) {
    let (ps, pe) = pred;
    let (gs, ge) = target;
    let enclosing = pe.max(ge) - ps.min(gs);
    if enclosing <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let inter_raw = pe.min(ge) - ps.max(gs);
    let inter = inter_raw.max(0.0);
    let union = (pe - ps) + (ge - gs) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let delta = 0.5 * (ps + pe) - 0.5 * (gs + ge);
    let c2 = enclosing * enclosing;
    let loss = 1.0 - iou + delta * delta / c2;

    let di_dpe = if inter_raw > 0.0 && pe < ge { 1.0 } else { 0.0 };
    let di_dps = if inter_raw > 0.0 && ps > gs {
        -1.0
    } else {
        0.0
    };
    let diou = |di: f64, du: f64| {
        if union > 0.0 {
            (di * union - inter * du) / (union * union)
        } else {
            0.0
        }
    };
    let diou_dpe = diou(di_dpe, 1.0 - di_dpe);
    let diou_dps = diou(di_dps, -1.0 - di_dps);
    let dc_dpe = if pe > ge { 1.0 } else { 0.0 };
    let dc_dps = if ps < gs { -1.0 } else { 0.0 };
    let pen = |dc: f64| delta / c2 - 2.0 * delta * delta * dc / (c2 * enclosing);
    (loss, -diou_dps + pen(dc_dps), -diou_dpe + pen(dc_dpe))
}

/// `1 − DIoU` between two intervals given as `(start, end)`.
pub fn diou_loss(pred: (f64, f64), target: (f64, f64)) -> f64 {
    diou_with_grad(pred, target).0
}

/// DIoU loss between distance pairs measured from a shared anchor point.
pub fn diou_loss_distances(pred: (f64, f64), target: (f64, f64)) -> f64 {
    diou_loss((-pred.0, pred.1), (-target.0, target.1))
}

struct FocalOp {
    targets: Vec<bool>,
    weights: Vec<f64>,
    alpha: f64,
    gamma: f64,
}

impl CustomOp for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((&z, &y), &w)| {
                if w == 0.0 {
                    0.0
                } else {
                    grad[0] * w * focal_term(z, y, self.alpha, self.gamma).1
                }
            })
            .collect();
        vec![Some(g)]
    }
}

/// Summed focal loss over the rows of `logits` whose `row_mask` is set.
pub fn focal_loss_op(
    tape: &mut Tape,
    logits: Var,
    targets: &Tensor,
    row_mask: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let value = tape.value(logits);
    if value.shape() != targets.shape() || row_mask.len() != value.rows() {
        return Err(TslError::Dimension {
            op: "focal_loss",
            lhs: value.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let c = value.cols();
    let weights: Vec<f64> = row_mask
        .iter()
        .flat_map(|&keep| std::iter::repeat_n(if keep { 1.0 } else { 0.0 }, c))
        .collect();
    let targets: Vec<bool> = targets.data().iter().map(|&y| y > 0.5).collect();
    let sum = value
        .data()
        .iter()
        .zip(&targets)
        .zip(&weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((&z, &y), _)| focal_term(z, y, alpha, gamma).0)
        .sum();
    let op = FocalOp {
        targets,
        weights,
        alpha,
        gamma,
    };
    Ok(tape.custom(&[logits], Tensor::scalar(sum), Box::new(op)))
}

struct DiouOp {
    targets: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl CustomOp for DiouOp {
    fn name(&self) -> &'static str {
        "diou_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let d = inputs[0].data();
        let mut g = vec![0.0; d.len()];
        for (i, (&target, &w)) in self.targets.iter().zip(&self.weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let (_, d_start, d_end) =
                diou_with_grad((-d[2 * i], d[2 * i + 1]), (-target.0, target.1));
            g[2 * i] = -grad[0] * w * d_start;
            g[2 * i + 1] = grad[0] * w * d_end;
        }
        vec![Some(g)]
    }
}

/// Weighted sum of DIoU losses for rows of `distances` (`N × 2`, start and
/// end distances from each point).
pub fn diou_loss_op(
    tape: &mut Tape,
    distances: Var,
    targets: &[(f64, f64)],
    weights: &[f64],
) -> Result<Var> {
    let value = tape.value(distances);
    if value.shape() != [targets.len(), 2] || weights.len() != targets.len() {
        return Err(TslError::Dimension {
            op: "diou_loss",
            lhs: value.shape().to_vec(),
            rhs: vec![targets.len(), 2],
        });
    }
    let d = value.data();
    let sum = targets
        .iter()
        .zip(weights)
        .enumerate()
        .filter(|(_, (_, &w))| w != 0.0)
        .map(|(i, (&t, &w))| w * diou_loss_distances((d[2 * i], d[2 * i + 1]), t))
        .sum();
    let op = DiouOp {
        targets: targets.to_vec(),
        weights: weights.to_vec(),
    };
    Ok(tape.custom(&[distances], Tensor::scalar(sum), Box::new(op)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Focal loss summed over points and classes.
    pub cls: f64,
    /// DIoU loss summed over positive points.
    pub reg: f64,
    pub num_positive: usize,
    pub total: f64,
    pub lambda_reg: f64,
}

/// Builds the normalised training loss on the tape.
pub fn total_loss(
    tape: &mut Tape,
    heads: &HeadOutput,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if heads.levels.len() != assignment.levels.len() {
        return Err(TslError::Dimension {
            op: "total_loss",
            lhs: vec![heads.levels.len()],
            rhs: vec![assignment.levels.len()],
        });
    }
    let mut cls_terms = Vec::with_capacity(heads.levels.len());
    let mut reg_terms = Vec::with_capacity(heads.levels.len());
    for (level, target) in heads.levels.iter().zip(&assignment.levels) {
        cls_terms.push(focal_loss_op(
            tape,
            level.cls_logits,
            &target.class_targets,
            &level.mask,
            cfg.alpha,
            cfg.gamma,
        )?);
        let weights: Vec<f64> = target
            .positive
            .iter()
            .map(|&p| if p { 1.0 } else { 0.0 })
            .collect();
        reg_terms.push(diou_loss_op(
            tape,
            level.distances,
            &target.reg_targets,
            &weights,
        )?);
    }
    let cls = sum_scalars(tape, &cls_terms)?;
    let reg = sum_scalars(tape, &reg_terms)?;
    let weighted = tape.scale(reg, cfg.lambda_reg);
    let combined = tape.add(cls, weighted)?;
    let norm = assignment.num_positive.max(1) as f64;
    let total = tape.scale(combined, 1.0 / norm);
    let breakdown = LossBreakdown {
        cls: tape.value(cls).data()[0],
        reg: tape.value(reg).data()[0],
        num_positive: assignment.num_positive,
        total: tape.value(total).data()[0],
        lambda_reg: cfg.lambda_reg,
    };
    Ok((total, breakdown))
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut iter = terms.iter().copied();
    let first = iter
        .next()
        .ok_or_else(|| TslError::EmptyInput("no pyramid levels to sum".into()))?;
    iter.try_fold(first, |acc, v| tape.add(acc, v))
}
