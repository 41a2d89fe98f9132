//! Training loop, optimiser and run bookkeeping.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotations, FeatureSequence};
use crate::decode::DecodeConfig;
use crate::error::{Result, TslError};
use crate::eval::{mean_ap, EvalReport, DEFAULT_THRESHOLDS};
use crate::loss::{assign_targets, total_loss, LossBreakdown, LossConfig};
use crate::model::{Localizer, ModelConfig, ParamStore};
use crate::pipeline::{predict_video, Dataset};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Dataset directory as written by `gen-data`.
    pub data_dir: Option<PathBuf>,
    pub train_splits: Vec<String>,
    /// Split used to pick the best checkpoint; none keeps the last epoch.
    /// Written as `""` in TOML when absent.
    #[serde(with = "empty_as_none")]
    pub val_split: Option<String>,
    /// Also write `epoch_NNN.ckpt` after every epoch.
    pub keep_epoch_checkpoints: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 2,
            epochs: 35,
            warmup_epochs: 5,
            weight_decay: 0.05,
            grad_clip: 1.0,
            seed: 0,
            data_dir: None,
            train_splits: vec!["train".into()],
            val_split: Some("val".into()),
            keep_epoch_checkpoints: true,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for CPU-sized runs on synthetic data.
    pub fn desk(input_dim: usize, num_classes: usize) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 15,
            warmup_epochs: 2,
            keep_epoch_checkpoints: false,
            model: ModelConfig::desk(input_dim, num_classes),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TslError::Config(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return err("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch_size and epochs must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return err("warmup_epochs cannot exceed epochs");
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return err("weight_decay and grad_clip must be non-negative");
        }
        if self.train_splits.is_empty() {
            return err("train_splits is empty");
        }
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TslError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TslError::io(path, e))?;
        Self::from_toml(&text)
    }
}

mod empty_as_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<String>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(v.as_deref().unwrap_or(""))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
        let v = String::deserialize(d)?;
        Ok(if v.is_empty() { None } else { Some(v) })
    }
}

/// Linear warmup to `base`, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Parameters that receive weight decay (matrices and kernels).
    decay: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay: params
                .iter()
                .map(|(name, t)| name.ends_with(".weight") && t.rank() >= 2)
                .collect(),
            m: params
                .values()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect(),
            v: params
                .values()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let decay = if self.decay[i] {
                lr * self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * update + decay * *w;
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// A fused training example with its ground truth.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: FeatureSequence,
    pub annotation: crate::data::VideoAnnotation,
}

/// Forward, loss and gradients for one video.
pub fn video_gradients(
    model: &Localizer,
    example: &Example,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &example.features, true)?;
    let masks: Vec<Vec<bool>> = fwd.pyramid.levels.iter().map(|l| l.mask.clone()).collect();
    let assignment = assign_targets(
        &fwd.points,
        &example.annotation.events,
        example.features.stride_sec(),
        model.config().num_classes,
        loss_cfg.center_radius,
        Some(&masks),
    );
    let (loss, breakdown) = total_loss(&mut tape, &fwd.heads, &assignment, loss_cfg)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = fwd.params.grads(&tape);
    Ok((breakdown, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over training videos of each loss component.
    pub loss: LossBreakdown,
    pub learning_rate: f64,
    pub val_average_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub code_version: String,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub final_report: Option<EvalReport>,
}

impl RunManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| TslError::io(path, e))
    }
}

/// Trains on in-memory examples.
///
/// `on_epoch` is called after every epoch with the model and its record;
/// it may return a validation score used to pick the best parameters.
pub fn train_examples(
    cfg: &TrainConfig,
    examples: &[Example],
    mut on_epoch: impl FnMut(&Localizer, &EpochRecord) -> Result<Option<f64>>,
) -> Result<(Localizer, Vec<EpochRecord>)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TslError::Validation("no training videos".into()));
    }
    let mut model = Localizer::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        base: cfg.learning_rate,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_da7a);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut positives = 0;
        let mut lr = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (br, grads) = match video_gradients(&model, &examples[i], &cfg.loss) {
                    Err(TslError::Numeric(msg)) => {
                        return Err(TslError::NonFiniteLoss {
                            epoch,
                            batch: batch_index,
                            detail: format!("video {}: {msg}", examples[i].features.video_id()),
                        })
                    }
                    other => other?,
                };
                if !br.total.is_finite() {
                    return Err(TslError::NonFiniteLoss {
                        epoch,
                        batch: batch_index,
                        detail: format!(
                            "video {}: cls {} reg {} positives {}",
                            examples[i].features.video_id(),
                            br.cls,
                            br.reg,
                            br.num_positive
                        ),
                    });
                }
                sums[0] += br.cls;
                sums[1] += br.reg;
                sums[2] += br.total;
                positives += br.num_positive;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut()
                                .iter_mut()
                                .zip(g.data())
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            lr = schedule.at(step);
            opt.step(model.params_mut(), &grads, lr);
            step += 1;
        }
        let n = examples.len() as f64;
        let mut record = EpochRecord {
            epoch,
            loss: LossBreakdown {
                cls: sums[0] / n,
                reg: sums[1] / n,
                num_positive: positives,
                total: sums[2] / n,
                lambda_reg: cfg.loss.lambda_reg,
            },
            learning_rate: lr,
            val_average_map: None,
        };
        record.val_average_map = on_epoch(&model, &record)?;
        if let Some(score) = record.val_average_map {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.params().clone()));
            }
        }
        records.push(record);
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok((model, records))
}

/// Fused examples for the given splits of a dataset.
pub fn load_examples(dataset: &Dataset, splits: &[String]) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for split in splits {
        for id in dataset.split_ids(split)? {
            let annotation = dataset
                .annotations
                .get(id)
                .ok_or_else(|| {
                    TslError::Validation(format!("split {split} lists unknown video {id}"))
                })?
                .clone();
            out.push(Example {
                features: dataset.load_fused(id)?,
                annotation,
            });
        }
    }
    Ok(out)
}

/// Decodes and scores `examples` with `model`.
pub fn evaluate_examples(
    model: &Localizer,
    examples: &[Example],
    decode: &DecodeConfig,
) -> Result<EvalReport> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for ex in examples {
        preds.extend(predict_video(model, &ex.features, decode)?);
        let ann = Annotations {
            class_names: Vec::new(),
            videos: vec![ex.annotation.clone()],
        };
        gts.extend(ann.intervals());
    }
    mean_ap(&preds, &gts, &DEFAULT_THRESHOLDS)
}

/// Full training run against a dataset directory, writing checkpoints and a
/// manifest into `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let data_dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| TslError::Config("data_dir is not set".into()))?;
    let dataset = Dataset::open(data_dir)?;
    if dataset.annotations.num_classes() != cfg.model.num_classes {
        return Err(TslError::Config(format!(
            "dataset has {} classes, model expects {}",
            dataset.annotations.num_classes(),
            cfg.model.num_classes
        )));
    }
    let train_set = load_examples(&dataset, &cfg.train_splits)?;
    let val_set = match &cfg.val_split {
        Some(split) => load_examples(&dataset, std::slice::from_ref(split))?,
        None => Vec::new(),
    };
    fs::create_dir_all(out_dir).map_err(|e| TslError::io(out_dir, e))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| TslError::io(out_dir, e))?;

    let mut checkpoints = Vec::new();
    let (model, epochs) = train_examples(cfg, &train_set, |model, record| {
        let last = out_dir.join("last.ckpt");
        model.params().save(&last)?;
        if cfg.keep_epoch_checkpoints {
            let path = out_dir.join(format!("epoch_{:03}.ckpt", record.epoch));
            model.params().save(&path)?;
            checkpoints.push(path);
        }
        if val_set.is_empty() {
            return Ok(None);
        }
        let report = evaluate_examples(model, &val_set, &cfg.decode)?;
        Ok(Some(report.average_map))
    })?;
    let final_checkpoint = out_dir.join("best.ckpt");
    model.params().save(&final_checkpoint)?;
    let final_report = if val_set.is_empty() {
        None
    } else {
        Some(evaluate_examples(&model, &val_set, &cfg.decode)?)
    };
    let manifest = RunManifest {
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_owned(),
        epochs,
        checkpoints,
        final_checkpoint,
        final_report,
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
