//! Dataset layout on disk and the predict / evaluate / gen-data steps.
//!
//! A dataset directory holds:
//!
//! ```text
//! features/<id>.visual.tslf
//! features/<id>.audio.tslf      (optional)
//! annotations.json
//! annotations_{train,val,test}.json
//! splits.json
//! manifest.json
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    fuse_optional, generate_synthetic, load_annotations, load_features, load_predictions,
    save_annotations, save_features, Annotations, FeatureSequence, Modality, Predictions, Splits,
    SyntheticSpec,
};
use crate::decode::{recover_intervals, soft_nms, DecodeConfig, Interval};
use crate::error::{Result, TslError};
use crate::eval::{mean_ap, EvalReport, DEFAULT_THRESHOLDS};
use crate::model::Localizer;
use crate::tensor::Tape;

pub const FEATURES_DIR: &str = "features";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

pub fn feature_path(features_dir: &Path, video_id: &str, modality: Modality) -> PathBuf {
    features_dir.join(format!("{video_id}.{}.tslf", modality.file_tag()))
}

/// Loads the visual stream of `video_id` and, when present, its audio, then
/// fuses them.
pub fn load_fused_from(features_dir: &Path, video_id: &str) -> Result<FeatureSequence> {
    let visual = load_features(feature_path(features_dir, video_id, Modality::Visual))?;
    if visual.video_id() != video_id {
        return Err(TslError::VideoIdMismatch(
            video_id.to_owned(),
            visual.video_id().to_owned(),
        ));
    }
    let audio_path = feature_path(features_dir, video_id, Modality::Audio);
    let audio = if audio_path.exists() {
        Some(load_features(&audio_path)?)
    } else {
        None
    };
    fuse_optional(&visual, audio.as_ref())
}

/// Video ids with a visual feature file in `features_dir`, sorted.
pub fn list_videos(features_dir: &Path) -> Result<Vec<String>> {
    let suffix = format!(".{}.tslf", Modality::Visual.file_tag());
    let entries = fs::read_dir(features_dir).map_err(|e| TslError::io(features_dir, e))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| TslError::io(features_dir, e))?;
        let name = entry.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(&suffix)) {
            ids.insert(id.to_owned());
        }
    }
    Ok(ids.into_iter().collect())
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub annotations: Annotations,
    pub splits: Splits,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let annotations = load_annotations(dir.join(ANNOTATIONS_FILE))?;
        let splits_path = dir.join(SPLITS_FILE);
        let text = fs::read_to_string(&splits_path).map_err(|e| TslError::io(&splits_path, e))?;
        let splits: Splits = serde_json::from_str(&text)?;
        Ok(Dataset {
            dir,
            annotations,
            splits,
        })
    }

    pub fn features_dir(&self) -> PathBuf {
        self.dir.join(FEATURES_DIR)
    }

    pub fn split_ids(&self, name: &str) -> Result<&[String]> {
        self.splits.get(name).ok_or_else(|| {
            TslError::Config(format!(
                "unknown split {name:?}; expected train, val or test"
            ))
        })
    }

    pub fn load_fused(&self, video_id: &str) -> Result<FeatureSequence> {
        load_fused_from(&self.features_dir(), video_id)
    }
}

/// Forward, decode and soft-NMS for one fused sequence.
pub fn predict_video(
    model: &Localizer,
    fused: &FeatureSequence,
    cfg: &DecodeConfig,
) -> Result<Vec<Interval>> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, fused, false)?;
    let levels = fwd.heads.values(&tape);
    let candidates = recover_intervals(
        fused.video_id(),
        &levels,
        &fwd.points,
        fused.stride_sec(),
        fused.duration_sec(),
        cfg,
    );
    Ok(soft_nms(&candidates, cfg))
}

/// Predictions for every video in `features_dir`, or only those in `only`.
pub fn predict_dir(
    model: &Localizer,
    features_dir: &Path,
    only: Option<&[String]>,
    cfg: &DecodeConfig,
) -> Result<Predictions> {
    let ids = match only {
        Some(ids) => {
            let mut ids = ids.to_vec();
            ids.sort();
            ids
        }
        None => list_videos(features_dir)?,
    };
    let mut all = Vec::new();
    for id in &ids {
        let fused = load_fused_from(features_dir, id)?;
        all.extend(predict_video(model, &fused, cfg)?);
    }
    Ok(Predictions::from_intervals(&all))
}

/// Scores predictions against annotations; every predicted video must be
/// annotated.
pub fn evaluate(preds: &Predictions, ann: &Annotations) -> Result<EvalReport> {
    let unknown: Vec<String> = preds
        .videos
        .iter()
        .filter(|v| ann.get(&v.video_id).is_none())
        .map(|v| v.video_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(TslError::UnknownVideos(unknown));
    }
    mean_ap(&preds.intervals(), &ann.intervals(), &DEFAULT_THRESHOLDS)
}

pub fn evaluate_files(pred_json: &Path, ann_json: &Path) -> Result<EvalReport> {
    let preds = load_predictions(pred_json)?;
    let ann = load_annotations(ann_json)?;
    evaluate(&preds, &ann)
}

pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text + "\n").map_err(|e| TslError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub spec: SyntheticSpec,
    pub code_version: String,
    pub num_videos: usize,
    pub split_sizes: [usize; 3],
}

/// Refuses a non-empty directory unless `force`; creates it otherwise.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| TslError::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(TslError::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| TslError::io(dir, e))
}

/// Writes a synthetic dataset to `out_dir` in the layout described above.
pub fn gen_data(spec: &SyntheticSpec, out_dir: &Path, force: bool) -> Result<DataManifest> {
    spec.validate()?;
    prepare_out_dir(out_dir, force)?;
    let data = generate_synthetic(spec)?;
    let features = out_dir.join(FEATURES_DIR);
    fs::create_dir_all(&features).map_err(|e| TslError::io(&features, e))?;
    for video in &data.videos {
        let id = video.visual.video_id();
        save_features(&video.visual, feature_path(&features, id, Modality::Visual))?;
        save_features(&video.audio, feature_path(&features, id, Modality::Audio))?;
    }
    save_annotations(&data.annotations, out_dir.join(ANNOTATIONS_FILE))?;
    let ids: Vec<String> = data
        .annotations
        .videos
        .iter()
        .map(|v| v.video_id.clone())
        .collect();
    let splits = Splits::by_hash(&ids);
    for name in SPLIT_NAMES {
        let subset = data
            .annotations
            .subset(splits.get(name).expect("known split"));
        save_annotations(&subset, out_dir.join(format!("annotations_{name}.json")))?;
    }
    let splits_path = out_dir.join(SPLITS_FILE);
    let text = serde_json::to_string_pretty(&splits)?;
    fs::write(&splits_path, text + "\n").map_err(|e| TslError::io(&splits_path, e))?;
    let manifest = DataManifest {
        spec: spec.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_owned(),
        num_videos: ids.len(),
        split_sizes: [splits.train.len(), splits.val.len(), splits.test.len()],
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| TslError::io(&manifest_path, e))?;
    Ok(manifest)
}
