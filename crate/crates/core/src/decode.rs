//! Turning head outputs into scored intervals.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{LevelValues, PointSet};
use crate::tensor::sigmoid;

/// A labelled, scored time interval, either ground truth (score 1) or a
/// prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub video_id: String,
    pub label: usize,
    pub score: f64,
    pub start_sec: f64,
    pub end_sec: f64,
}

impl Interval {
    pub fn new(
        video_id: impl Into<String>,
        label: usize,
        score: f64,
        start_sec: f64,
        end_sec: f64,
    ) -> Self {
        Interval {
            video_id: video_id.into(),
            label,
            score,
            start_sec,
            end_sec,
        }
    }

    pub fn len(&self) -> f64 {
        self.end_sec - self.start_sec
    }

    /// Temporal IoU; zero for disjoint or zero-length pairs.
    pub fn tiou(&self, other: &Interval) -> f64 {
        interval_iou(
            (self.start_sec, self.end_sec),
            (other.start_sec, other.end_sec),
        )
    }
}

pub(crate) fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Descending score, then earlier start, then lower label, then earlier end.
pub(crate) fn rank_order(a: &Interval, b: &Interval) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_sec.total_cmp(&b.start_sec))
        .then(a.label.cmp(&b.label))
        .then(a.end_sec.total_cmp(&b.end_sec))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMethod {
    Gaussian,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub pre_nms_topk: usize,
    pub nms_method: NmsMethod,
    pub sigma: f64,
    /// Hard NMS drops candidates whose IoU with a kept one is at least this.
    pub iou_thresh: f64,
    pub min_score: f64,
    /// Kept detections per (video, class) group.
    pub max_out: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_thresh: 0.001,
            pre_nms_topk: 2000,
            nms_method: NmsMethod::Gaussian,
            sigma: 0.5,
            iou_thresh: 0.5,
            min_score: 0.001,
            max_out: 200,
        }
    }
}

/// Converts per-level logits and distances into candidate intervals.
///
/// A point at grid time `t` on a level with stride `s` and distances
/// `(d_s, d_e)` yields `[(t − d_s·s)·stride_sec, (t + d_e·s)·stride_sec]`,
/// clamped to `[0, duration_sec]`. Candidates scoring below `score_thresh`
/// are skipped, the best `pre_nms_topk` are kept, and empty intervals are
/// dropped.
pub fn recover_intervals(
    video_id: &str,
    levels: &[LevelValues],
    points: &PointSet,
    stride_sec: f64,
    duration_sec: f64,
    cfg: &DecodeConfig,
) -> Vec<Interval> {
    let mut out = Vec::new();
    for (level, pts) in levels.iter().zip(&points.levels) {
        let c = level.cls_logits.cols();
        let stride = level.stride as f64;
        for (i, &t) in pts.timestamps.iter().enumerate() {
            if !level.mask[i] {
                continue;
            }
            let (ds, de) = (level.distances.get2(i, 0), level.distances.get2(i, 1));
            let start = ((t - ds * stride) * stride_sec).clamp(0.0, duration_sec);
            let end = ((t + de * stride) * stride_sec).clamp(0.0, duration_sec);
            for label in 0..c {
                let score = sigmoid(level.cls_logits.get2(i, label));
                if score < cfg.score_thresh {
                    continue;
                }
                out.push(Interval::new(video_id, label, score, start, end));
            }
        }
    }
    out.sort_by(rank_order);
    out.truncate(cfg.pre_nms_topk);
    out.retain(|iv| iv.end_sec > iv.start_sec);
    out
}

/// Soft-NMS applied independently to every (video, label) group.
///
/// Repeatedly keeps the best remaining candidate and rescales the rest by
/// `exp(−IoU²/σ)` (Gaussian) or drops those with IoU ≥ `iou_thresh`
/// (hard). Candidates falling below `min_score` are discarded. The output
/// is sorted by video id, then by descending score, earlier start, lower
/// label and earlier end.
pub fn soft_nms(preds: &[Interval], cfg: &DecodeConfig) -> Vec<Interval> {
    let mut groups: BTreeMap<(&str, usize), Vec<Interval>> = BTreeMap::new();
    for p in preds {
        groups
            .entry((&p.video_id, p.label))
            .or_default()
            .push(p.clone());
    }
    let mut by_video: BTreeMap<String, Vec<Interval>> = BTreeMap::new();
    for ((video, _), mut group) in groups {
        group.retain(|p| p.score >= cfg.min_score);
        let mut kept = Vec::new();
        while !group.is_empty() && kept.len() < cfg.max_out {
            let best = (0..group.len())
                .min_by(|&a, &b| rank_order(&group[a], &group[b]))
                .expect("non-empty");
            let top = group.swap_remove(best);
            for other in group.iter_mut() {
                let iou = top.tiou(other);
                match cfg.nms_method {
                    NmsMethod::Gaussian => other.score *= (-(iou * iou) / cfg.sigma).exp(),
                    NmsMethod::Hard => {
                        if iou >= cfg.iou_thresh {
                            other.score = 0.0;
                        }
                    }
                }
            }
            group.retain(|p| p.score >= cfg.min_score && p.score > 0.0);
            kept.push(top);
        }
        by_video.entry(video.to_owned()).or_default().extend(kept);
    }
    by_video
        .into_values()
        .flat_map(|mut v| {
            v.sort_by(rank_order);
            v
        })
        .collect()
}
