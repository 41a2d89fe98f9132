//! Ground-truth annotation and prediction JSON files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::Interval;
use crate::error::{Result, TslError};

pub const DEFAULT_NUM_CLASSES: usize = 17;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub label: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.end_sec - self.start_sec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub duration_sec: f64,
    pub events: Vec<Event>,
}

/// Contents of an annotation file: the class vocabulary and every video's
/// events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub class_names: Vec<String>,
    pub videos: Vec<VideoAnnotation>,
}

impl Annotations {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoAnnotation> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(TslError::Validation("class_names is empty".into()));
        }
        let c = self.num_classes();
        let mut seen = HashSet::new();
        for video in &self.videos {
            let id = &video.video_id;
            if !seen.insert(id.as_str()) {
                return Err(TslError::Validation(format!("duplicate video id {id}")));
            }
            if !(video.duration_sec.is_finite() && video.duration_sec > 0.0) {
                return Err(TslError::Validation(format!(
                    "{id}: duration_sec must be positive, got {}",
                    video.duration_sec
                )));
            }
            for (i, ev) in video.events.iter().enumerate() {
                if ev.label >= c {
                    return Err(TslError::Validation(format!(
                        "{id} event {i}: label {} out of range for {c} classes",
                        ev.label
                    )));
                }
                let ordered = ev.start_sec.is_finite()
                    && ev.end_sec.is_finite()
                    && 0.0 <= ev.start_sec
                    && ev.start_sec < ev.end_sec
                    && ev.end_sec <= video.duration_sec;
                if !ordered {
                    return Err(TslError::Validation(format!(
                        "{id} event {i}: need 0 <= start ({}) < end ({}) <= duration ({})",
                        ev.start_sec, ev.end_sec, video.duration_sec
                    )));
                }
            }
        }
        Ok(())
    }

    /// Keeps only the listed videos, in the order given.
    pub fn subset(&self, ids: &[String]) -> Annotations {
        Annotations {
            class_names: self.class_names.clone(),
            videos: ids.iter().filter_map(|id| self.get(id).cloned()).collect(),
        }
    }

    /// Ground-truth events as unit-score intervals.
    pub fn intervals(&self) -> Vec<Interval> {
        self.videos
            .iter()
            .flat_map(|v| {
                v.events.iter().map(move |e| Interval {
                    video_id: v.video_id.clone(),
                    label: e.label,
                    score: 1.0,
                    start_sec: e.start_sec,
                    end_sec: e.end_sec,
                })
            })
            .collect()
    }
}

pub fn parse_annotations(text: &str) -> Result<Annotations> {
    let ann: Annotations = serde_json::from_str(text)?;
    ann.validate()?;
    Ok(ann)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Annotations> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TslError::io(path, e))?;
    parse_annotations(&text)
}

pub fn save_annotations(ann: &Annotations, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(ann)?;
    fs::write(path, text + "\n").map_err(|e| TslError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: usize,
    pub score: f64,
    pub start_sec: f64,
    pub end_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPredictions {
    pub video_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub videos: Vec<VideoPredictions>,
}

impl Predictions {
    /// Groups intervals by video id (sorted), keeping each video's input order.
    pub fn from_intervals(intervals: &[Interval]) -> Self {
        let mut by_video: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
        for iv in intervals {
            by_video.entry(&iv.video_id).or_default().push(Detection {
                label: iv.label,
                score: iv.score,
                start_sec: iv.start_sec,
                end_sec: iv.end_sec,
            });
        }
        Predictions {
            videos: by_video
                .into_iter()
                .map(|(id, detections)| VideoPredictions {
                    video_id: id.to_owned(),
                    detections,
                })
                .collect(),
        }
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.videos
            .iter()
            .flat_map(|v| {
                v.detections.iter().map(move |d| Interval {
                    video_id: v.video_id.clone(),
                    label: d.label,
                    score: d.score,
                    start_sec: d.start_sec,
                    end_sec: d.end_sec,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for video in &self.videos {
            let id = &video.video_id;
            if !seen.insert(id.as_str()) {
                return Err(TslError::Validation(format!(
                    "duplicate video id {id} in predictions"
                )));
            }
            for (i, d) in video.detections.iter().enumerate() {
                if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
                    return Err(TslError::Validation(format!(
                        "{id} detection {i}: score {} outside [0, 1]",
                        d.score
                    )));
                }
                if !(d.start_sec.is_finite() && d.end_sec.is_finite() && d.start_sec < d.end_sec) {
                    return Err(TslError::Validation(format!(
                        "{id} detection {i}: need start ({}) < end ({})",
                        d.start_sec, d.end_sec
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_predictions(text: &str) -> Result<Predictions> {
    let preds: Predictions = serde_json::from_str(text)?;
    preds.validate()?;
    Ok(preds)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TslError::io(path, e))?;
    parse_predictions(&text)
}

pub fn write_predictions(preds: &Predictions, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(preds)?;
    fs::write(path, text + "\n").map_err(|e| TslError::io(path, e))
}
