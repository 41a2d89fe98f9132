//! Seeded synthetic datasets with planted class signatures.
//!
//! Every video is i.i.d. unit Gaussian noise in both modalities. Inside each
//! event of class `c` the class's unit-norm signature vector, scaled by
//! `snr`, is added to every timestep of both streams. The result is a
//! localization task whose ground truth is known exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::annotations::{Annotations, Event, VideoAnnotation};
use super::features::{FeatureSequence, Modality};
use crate::error::{Result, TslError};

/// Attempts at placing an event before giving up on it.
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub duration_sec: f64,
    pub num_classes: usize,
    pub d_visual: usize,
    pub d_audio: usize,
    pub stride_sec: f64,
    pub events_per_video: (usize, usize),
    pub event_length_sec: (f64, f64),
    pub snr: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 80,
            duration_sec: 128.0,
            num_classes: 5,
            d_visual: 32,
            d_audio: 8,
            stride_sec: 1.0,
            events_per_video: (1, 4),
            event_length_sec: (4.0, 32.0),
            snr: 5.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn num_steps(&self) -> usize {
        (self.duration_sec / self.stride_sec).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TslError::Config(m));
        if self.num_videos == 0 || self.num_classes == 0 || self.d_visual == 0 || self.d_audio == 0
        {
            return err("video, class and feature-dimension counts must be positive".into());
        }
        if !(self.stride_sec.is_finite() && self.stride_sec > 0.0) {
            return err(format!(
                "stride_sec must be positive, got {}",
                self.stride_sec
            ));
        }
        if !(self.duration_sec.is_finite() && self.duration_sec > 0.0) || self.num_steps() == 0 {
            return err(format!(
                "duration_sec {} yields no timesteps",
                self.duration_sec
            ));
        }
        if !(self.snr.is_finite() && self.snr > 0.0) {
            return err(format!("snr must be positive, got {}", self.snr));
        }
        let (emin, emax) = self.events_per_video;
        if emin > emax {
            return err(format!("events_per_video range ({emin}, {emax}) is empty"));
        }
        let (lmin, lmax) = self.event_length_sec;
        if !(lmin.is_finite() && lmax.is_finite() && 0.0 < lmin && lmin <= lmax) {
            return err(format!(
                "event_length_sec range ({lmin}, {lmax}) is invalid"
            ));
        }
        if lmax > self.duration_sec {
            return err(format!(
                "event length {lmax}s exceeds video duration {}s",
                self.duration_sec
            ));
        }
        if (lmin / self.stride_sec).round() < 1.0 {
            return err(format!("event length {lmin}s is shorter than one timestep"));
        }
        Ok(())
    }
}

/// Visual and audio streams of one synthetic video.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub visual: FeatureSequence,
    pub audio: FeatureSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub videos: Vec<SyntheticVideo>,
    pub annotations: Annotations,
    /// Class signatures per modality, `num_classes` unit vectors each.
    pub visual_signatures: Vec<Vec<f64>>,
    pub audio_signatures: Vec<Vec<f64>>,
}

pub fn video_id(index: usize) -> String {
    format!("vid_{index:04}")
}

pub fn class_name(index: usize) -> String {
    format!("class_{index:02}")
}

/// Builds the dataset described by `spec`. A pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let visual_signatures = signatures(&mut rng, spec.num_classes, spec.d_visual);
    let audio_signatures = signatures(&mut rng, spec.num_classes, spec.d_audio);
    let t = spec.num_steps();
    let duration = t as f64 * spec.stride_sec;
    let len_min = ((spec.event_length_sec.0 / spec.stride_sec).round() as usize).max(1);
    let len_max = ((spec.event_length_sec.1 / spec.stride_sec).round() as usize).clamp(len_min, t);

    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut annotations = Vec::with_capacity(spec.num_videos);
    for index in 0..spec.num_videos {
        let id = video_id(index);
        let n_events = rng.random_range(spec.events_per_video.0..=spec.events_per_video.1);
        // (label, start step, length in steps)
        let mut placed: Vec<(usize, usize, usize)> = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            let label = rng.random_range(0..spec.num_classes);
            for _ in 0..PLACEMENT_ATTEMPTS {
                let len = rng.random_range(len_min..=len_max);
                let start = rng.random_range(0..=t - len);
                let clash = placed
                    .iter()
                    .any(|&(l, s, n)| l == label && start < s + n && s < start + len);
                if !clash {
                    placed.push((label, start, len));
                    break;
                }
            }
        }
        placed.sort_by_key(|&(l, s, n)| (s, n, l));

        let visual = noisy_stream(
            &mut rng,
            t,
            spec.d_visual,
            &placed,
            &visual_signatures,
            spec.snr,
        );
        let audio = noisy_stream(
            &mut rng,
            t,
            spec.d_audio,
            &placed,
            &audio_signatures,
            spec.snr,
        );
        videos.push(SyntheticVideo {
            visual: FeatureSequence::new(
                &id,
                Modality::Visual,
                spec.stride_sec,
                t,
                spec.d_visual,
                visual,
            )?,
            audio: FeatureSequence::new(
                &id,
                Modality::Audio,
                spec.stride_sec,
                t,
                spec.d_audio,
                audio,
            )?,
        });
        annotations.push(VideoAnnotation {
            video_id: id,
            duration_sec: duration,
            events: placed
                .iter()
                .map(|&(label, s, n)| Event {
                    label,
                    start_sec: s as f64 * spec.stride_sec,
                    end_sec: (s + n) as f64 * spec.stride_sec,
                })
                .collect(),
        });
    }
    let annotations = Annotations {
        class_names: (0..spec.num_classes).map(class_name).collect(),
        videos: annotations,
    };
    annotations.validate()?;
    Ok(SyntheticDataset {
        videos,
        annotations,
        visual_signatures,
        audio_signatures,
    })
}

/// `count` random unit vectors of length `dim`, mutually orthogonal when
/// `dim >= count`.
fn signatures(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let orthogonalize = dim >= count;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if orthogonalize {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        out.push(v);
    }
    out
}

fn noisy_stream(
    rng: &mut ChaCha8Rng,
    t: usize,
    d: usize,
    events: &[(usize, usize, usize)],
    signatures: &[Vec<f64>],
    snr: f64,
) -> Vec<f32> {
    let mut data: Vec<f64> = (0..t * d).map(|_| rng.sample(StandardNormal)).collect();
    for &(label, start, len) in events {
        for step in start..start + len {
            for (x, s) in data[step * d..(step + 1) * d]
                .iter_mut()
                .zip(&signatures[label])
            {
                *x += snr * s;
            }
        }
    }
    data.into_iter().map(|v| v as f32).collect()
}

/// Deterministic 60/20/20 partition of video ids.
///
/// Ids are ranked by a stable 64-bit FNV-1a hash (ties by id); the first 60%
/// form `train`, the next 20% `val`, the rest `test`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn by_hash(ids: &[String]) -> Splits {
        let mut ranked: Vec<&String> = ids.iter().collect();
        ranked.sort_by_key(|id| (fnv1a(id.as_bytes()), id.as_str()));
        let n = ranked.len();
        let n_train = (n as f64 * 0.6).round() as usize;
        let n_val = ((n as f64 * 0.2).round() as usize).min(n - n_train);
        let take = |range: std::ops::Range<usize>| {
            let mut v: Vec<String> = ranked[range].iter().map(|s| s.to_string()).collect();
            v.sort();
            v
        };
        Splits {
            train: take(0..n_train),
            val: take(n_train..n_train + n_val),
            test: take(n_train + n_val..n),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
