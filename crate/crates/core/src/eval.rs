//! Detection mAP over temporal-IoU thresholds.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decode::Interval;
use crate::error::{Result, TslError};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

pub fn tiou(a: &Interval, b: &Interval) -> f64 {
    a.tiou(b)
}

/// Sorts predictions by descending score, earlier start first among equal
/// scores, and input order after that.
fn ranked(preds: &[Interval]) -> Vec<&Interval> {
    let mut order: Vec<&Interval> = preds.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start_sec.total_cmp(&b.start_sec))
    });
    order
}

/// Average precision of one class at matching threshold `tau`.
///
/// Each prediction, in rank order, claims the unmatched ground truth of its
/// video with the highest tIoU, provided that tIoU reaches `tau`; lower GT
/// index wins ties. AP is the area under the precision envelope
/// (all-point interpolation). Returns 0 when there is no ground truth.
pub fn average_precision(preds: &[Interval], gts: &[Interval], tau: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(&g.video_id).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    let order = ranked(preds);
    let mut hits = Vec::with_capacity(order.len());
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for &gi in by_video.get(p.video_id.as_str()).into_iter().flatten() {
            if matched[gi] {
                continue;
            }
            let iou = p.tiou(&gts[gi]);
            if iou >= tau && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
        }
        hits.push(best.is_some());
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (rank, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let n_gt = gts.len() as f64;
    hits.iter()
        .zip(&precision)
        .filter(|(hit, _)| **hit)
        .fold(0.0, |ap, (_, &p)| ap + p / n_gt)
}

/// Straightforward re-derivation of [`average_precision`] for testing.
///
/// Matching scans every ground truth for every prediction; the integral
/// walks recall levels `k / n_gt` and takes, for each, the best precision
/// at any rank whose recall reaches that level.
pub fn oracle_ap(preds: &[Interval], gts: &[Interval], tau: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // insertion sort keeps input order among exact ties
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (&preds[order[j - 1]], &preds[order[j]]);
            let swap = b.score > a.score || (b.score == a.score && b.start_sec < a.start_sec);
            if !swap {
                break;
            }
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut taken = vec![false; gts.len()];
    let mut cum_tp = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for &pi in &order {
        let p = &preds[pi];
        let mut best_gt = None;
        let mut best_iou = -1.0;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.video_id != p.video_id {
                continue;
            }
            let inter = (p.end_sec.min(g.end_sec) - p.start_sec.max(g.start_sec)).max(0.0);
            let union = (p.end_sec - p.start_sec) + (g.end_sec - g.start_sec) - inter;
            let iou = if union > 0.0 { inter / union } else { 0.0 };
            if iou >= tau && iou > best_iou {
                best_iou = iou;
                best_gt = Some(gi);
            }
        }
        if let Some(gi) = best_gt {
            taken[gi] = true;
            tp += 1;
        }
        cum_tp.push(tp);
    }
    let n_gt = gts.len();
    let mut area = 0.0;
    for k in 1..=n_gt {
        let mut best = 0.0f64;
        let mut reached = false;
        for (rank, &t) in cum_tp.iter().enumerate() {
            if t >= k {
                reached = true;
                best = best.max(t as f64 / (rank + 1) as f64);
            }
        }
        if reached {
            area += best / n_gt as f64;
        }
    }
    area
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// mAP at each threshold, as a fraction.
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
    /// `per_class_ap[label][k]`: AP of `label` at `thresholds[k]`; only
    /// classes with ground truth appear.
    pub per_class_ap: BTreeMap<usize, Vec<f64>>,
    pub num_ground_truth: usize,
    pub num_predictions: usize,
}

impl EvalReport {
    /// A report holding only per-threshold values, averaged.
    pub fn from_per_threshold(thresholds: &[f64], maps: &[f64]) -> Self {
        EvalReport {
            thresholds: thresholds.to_vec(),
            map_per_threshold: maps.to_vec(),
            average_map: maps.iter().sum::<f64>() / maps.len() as f64,
            per_class_ap: BTreeMap::new(),
            num_ground_truth: 0,
            num_predictions: 0,
        }
    }

    /// Header and one row: `@τ` columns then `Avg`, as percentages with
    /// one decimal.
    pub fn table(&self, row_label: &str) -> String {
        let width = row_label.len().max(6);
        let mut header = format!("{:<width$}", "Method");
        let mut row = format!("{row_label:<width$}");
        for (tau, map) in self.thresholds.iter().zip(&self.map_per_threshold) {
            let _ = write!(header, " {:>6}", format!("@{tau}"));
            let _ = write!(row, " {:>6}", percent(*map));
        }
        let _ = write!(header, " {:>6}", "Avg");
        let _ = write!(row, " {:>6}", percent(self.average_map));
        format!("{header}\n{row}\n")
    }
}

/// Fraction to a one-decimal percentage string.
pub fn percent(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

/// mAP per threshold over classes that have ground truth, and their mean.
pub fn mean_ap(preds: &[Interval], gts: &[Interval], thresholds: &[f64]) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(TslError::EmptyGroundTruth);
    }
    let mut gt_by_class: BTreeMap<usize, Vec<Interval>> = BTreeMap::new();
    for g in gts {
        gt_by_class.entry(g.label).or_default().push(g.clone());
    }
    let mut pred_by_class: BTreeMap<usize, Vec<Interval>> = BTreeMap::new();
    for p in preds {
        pred_by_class.entry(p.label).or_default().push(p.clone());
    }
    let per_class_ap: BTreeMap<usize, Vec<f64>> = gt_by_class
        .iter()
        .map(|(&label, class_gts)| {
            let class_preds = pred_by_class.get(&label).map(Vec::as_slice).unwrap_or(&[]);
            let aps = thresholds
                .iter()
                .map(|&tau| average_precision(class_preds, class_gts, tau))
                .collect();
            (label, aps)
        })
        .collect();
    let n_classes = per_class_ap.len() as f64;
    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|k| per_class_ap.values().map(|aps| aps[k]).sum::<f64>() / n_classes)
        .collect();
    let average_map = map_per_threshold.iter().sum::<f64>() / thresholds.len() as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        map_per_threshold,
        average_map,
        per_class_ap,
        num_ground_truth: gts.len(),
        num_predictions: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(video: &str, score: f64, s: f64, e: f64) -> Interval {
        Interval::new(video, 0, score, s, e)
    }

    #[test]
    fn ap_examples() {
        let gt = vec![iv("a", 1.0, 0.0, 10.0)];
        assert_eq!(average_precision(&[iv("a", 0.9, 0.0, 9.0)], &gt, 0.5), 1.0);

        let preds = vec![iv("a", 0.9, 20.0, 30.0), iv("a", 0.5, 0.0, 10.0)];
        assert_eq!(average_precision(&preds, &gt, 0.5), 0.5);
        assert_eq!(oracle_ap(&preds, &gt, 0.5), 0.5);

        assert_eq!(average_precision(&[], &gt, 0.5), 0.0);
        assert_eq!(oracle_ap(&[], &gt, 0.5), 0.0);
    }

    #[test]
    fn predictions_only_match_their_video() {
        let gt = vec![iv("a", 1.0, 0.0, 10.0)];
        assert_eq!(average_precision(&[iv("b", 0.9, 0.0, 10.0)], &gt, 0.1), 0.0);
    }

    #[test]
    fn reported_rows_average() {
        let rows = [
            ([16.2, 13.5, 10.8, 8.4, 5.8], "10.9"),
            ([18.8, 17.6, 15.9, 13.9, 11.3], "15.5"),
            ([41.7, 38.2, 34.6, 30.3, 20.7], "33.1"),
        ];
        for (vals, want) in rows {
            let fracs: Vec<f64> = vals.iter().map(|v| v / 100.0).collect();
            let r = EvalReport::from_per_threshold(&DEFAULT_THRESHOLDS, &fracs);
            assert_eq!(percent(r.average_map), want);
        }
        let r = EvalReport::from_per_threshold(&DEFAULT_THRESHOLDS, &[0.37; 5]);
        assert!((r.average_map - 0.37).abs() < 1e-15);
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let gts = vec![Interval::new("a", 0, 1.0, 0.0, 5.0)];
        let preds = vec![
            Interval::new("a", 0, 0.9, 0.0, 5.0),
            Interval::new("a", 3, 0.9, 0.0, 5.0),
        ];
        let r = mean_ap(&preds, &gts, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.average_map, 1.0);
        assert_eq!(r.per_class_ap.len(), 1);
        assert!(matches!(
            mean_ap(&preds, &[], &DEFAULT_THRESHOLDS),
            Err(TslError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn table_layout() {
        let r = EvalReport::from_per_threshold(
            &DEFAULT_THRESHOLDS,
            &[0.417, 0.382, 0.346, 0.303, 0.207],
        );
        let t = r.table("ours");
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("@0.1") && lines[0].ends_with("Avg"));
        assert!(lines[1].ends_with("33.1"));
        assert_eq!(lines[0].len(), lines[1].len());
    }
}
