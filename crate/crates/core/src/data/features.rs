//! Per-video feature sequences and the TSLF binary container.
//!
//! Layout (little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `"TSLF"`                          |
//! | 4     | version `u32` = 1                       |
//! | 1     | modality (0 visual, 1 audio, 2 fused)   |
//! | 3     | reserved, zero                          |
//! | 4     | `T` (`u32`)                             |
//! | 4     | `D` (`u32`)                             |
//! | 8     | `stride_sec` (`f64`)                    |
//! | 2 + n | video id: `u16` length then UTF-8 bytes |
//! | 4·T·D | `f32` values, row-major                 |

use std::fs;
use std::path::Path;

use crate::error::{Result, TslError};
use crate::tensor::Tensor;

pub const TSLF_MAGIC: [u8; 4] = *b"TSLF";
pub const TSLF_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Audio,
    Fused,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
            Modality::Fused => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Audio),
            2 => Some(Modality::Fused),
            _ => None,
        }
    }

    pub fn file_tag(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Fused => "fused",
        }
    }
}

/// A `T × D` time-major feature matrix for one video and one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    video_id: String,
    modality: Modality,
    stride_sec: f64,
    t: usize,
    d: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        modality: Modality,
        stride_sec: f64,
        t: usize,
        d: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if t == 0 || d == 0 {
            return Err(TslError::EmptyInput(format!(
                "feature sequence {video_id} has shape {t}x{d}"
            )));
        }
        if !(stride_sec.is_finite() && stride_sec > 0.0) {
            return Err(TslError::Validation(format!(
                "{video_id}: stride_sec must be positive, got {stride_sec}"
            )));
        }
        if data.len() != t * d {
            return Err(TslError::Dimension {
                op: "feature_sequence",
                lhs: vec![t, d],
                rhs: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TslError::Validation(format!(
                "{video_id}: non-finite feature value at index {i}"
            )));
        }
        u16::try_from(video_id.len())
            .map_err(|_| TslError::Validation("video id longer than 65535 bytes".into()))?;
        Ok(FeatureSequence {
            video_id,
            modality,
            stride_sec,
            t,
            d,
            data,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn stride_sec(&self) -> f64 {
        self.stride_sec
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn duration_sec(&self) -> f64 {
        self.t as f64 * self.stride_sec
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.t, self.d],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction")
    }

    /// Copy of columns `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Vec<f32> {
        (0..self.t)
            .flat_map(|i| self.row(i)[start..end].iter().copied())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(30 + self.video_id.len() + 4 * self.data.len());
        out.extend_from_slice(&TSLF_MAGIC);
        out.extend_from_slice(&TSLF_VERSION.to_le_bytes());
        out.push(self.modality.code());
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&(self.t as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&self.stride_sec.to_le_bytes());
        out.extend_from_slice(&(self.video_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.video_id.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != TSLF_MAGIC {
            return Err(TslError::BadMagic {
                expected: TSLF_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != TSLF_VERSION {
            return Err(TslError::BadVersion(version));
        }
        let code = r.take(1)?[0];
        let modality = Modality::from_code(code)
            .ok_or_else(|| TslError::Malformed(format!("unknown modality code {code}")))?;
        if r.take(3)? != [0, 0, 0] {
            return Err(TslError::Malformed("reserved bytes are not zero".into()));
        }
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let stride_sec = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let id_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let video_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| TslError::Malformed(format!("video id is not UTF-8: {e}")))?
            .to_owned();
        let count = t
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| TslError::Malformed(format!("payload size {t}x{d} overflows")))?;
        let payload = r.take(count)?;
        if r.pos != bytes.len() {
            return Err(TslError::Malformed(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureSequence::new(video_id, modality, stride_sec, t, d, data).map_err(|e| match e {
            TslError::Io { .. } => e,
            other => TslError::Malformed(other.to_string()),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(TslError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TslError::io(path, e))?;
    FeatureSequence::from_bytes(&bytes)
}

pub fn save_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, seq.to_bytes()).map_err(|e| TslError::io(path, e))
}

/// Early fusion: per-timestep concatenation of visual then audio channels.
///
/// When the two sequences disagree on length, audio is resampled onto the
/// visual timeline with nearest-neighbour indexing
/// `j = round(i · T_a / T_v)`, clamped to `T_a − 1`.
pub fn fuse_features(visual: &FeatureSequence, audio: &FeatureSequence) -> Result<FeatureSequence> {
    if visual.video_id != audio.video_id {
        return Err(TslError::VideoIdMismatch(
            visual.video_id.clone(),
            audio.video_id.clone(),
        ));
    }
    let (tv, ta) = (visual.t, audio.t);
    let d = visual.d + audio.d;
    let mut data = Vec::with_capacity(tv * d);
    for i in 0..tv {
        data.extend_from_slice(visual.row(i));
        data.extend_from_slice(audio.row(resample_index(i, tv, ta)));
    }
    FeatureSequence::new(
        visual.video_id.clone(),
        Modality::Fused,
        visual.stride_sec,
        tv,
        d,
        data,
    )
}

/// Fusion with an optional audio stream; without audio the fused sequence
/// is the visual one re-tagged.
pub fn fuse_optional(
    visual: &FeatureSequence,
    audio: Option<&FeatureSequence>,
) -> Result<FeatureSequence> {
    match audio {
        Some(a) => fuse_features(visual, a),
        None => {
            let mut fused = visual.clone();
            fused.modality = Modality::Fused;
            Ok(fused)
        }
    }
}

pub(crate) fn resample_index(i: usize, from_len: usize, to_len: usize) -> usize {
    if from_len == to_len {
        return i;
    }
    let j = (i as f64 * to_len as f64 / from_len as f64).round() as usize;
    j.min(to_len - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, m: Modality, t: usize, d: usize, offset: f32) -> FeatureSequence {
        let data = (0..t * d).map(|i| i as f32 * 0.5 + offset).collect();
        FeatureSequence::new(id, m, 0.5, t, d, data).unwrap()
    }

    #[test]
    fn fused_dimension_is_sum_of_modalities() {
        let v = seq("a", Modality::Visual, 16, 1408, 0.0);
        let a = seq("a", Modality::Audio, 16, 256, 1.0);
        let f = fuse_features(&v, &a).unwrap();
        assert_eq!((f.len(), f.dim()), (16, 1664));
        assert_eq!(f.modality(), Modality::Fused);
        assert_eq!(f.columns(0, 1408), v.data());
        assert_eq!(f.columns(1408, 1664), a.data());
    }

    #[test]
    fn visual_only_passthrough() {
        let v = seq("a", Modality::Visual, 4, 3, 0.0);
        let f = fuse_optional(&v, None).unwrap();
        assert_eq!(f.data(), v.data());
        assert_eq!(f.modality(), Modality::Fused);
    }

    #[test]
    fn nearest_neighbour_resampling() {
        // 100 visual steps onto 50 audio steps
        let expected: Vec<usize> = (0..100)
            .map(|i| ((i as f64) * 0.5).round().min(49.0) as usize)
            .collect();
        let got: Vec<usize> = (0..100).map(|i| resample_index(i, 100, 50)).collect();
        assert_eq!(got, expected);
        assert_eq!(&got[..5], &[0, 1, 1, 2, 2]);
        assert_eq!(got[99], 49);
        // upsampling clamps at the end
        assert_eq!(resample_index(3, 4, 2), 1);

        let v = seq("a", Modality::Visual, 100, 2, 0.0);
        let a = seq("a", Modality::Audio, 50, 1, 0.0);
        let f = fuse_features(&v, &a).unwrap();
        assert_eq!(f.len(), 100);
        assert_eq!(f.row(3)[2], a.row(2)[0]);
    }

    #[test]
    fn fusion_rejects_mismatched_ids() {
        let v = seq("a", Modality::Visual, 4, 2, 0.0);
        let a = seq("b", Modality::Audio, 4, 2, 0.0);
        assert!(matches!(
            fuse_features(&v, &a),
            Err(TslError::VideoIdMismatch(..))
        ));
    }

    #[test]
    fn empty_sequences_are_rejected() {
        assert!(matches!(
            FeatureSequence::new("x", Modality::Audio, 1.0, 4, 0, vec![]),
            Err(TslError::EmptyInput(_))
        ));
        assert!(FeatureSequence::new("x", Modality::Audio, 0.0, 1, 1, vec![0.0]).is_err());
        assert!(FeatureSequence::new("x", Modality::Audio, 1.0, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn tslf_roundtrip_is_bit_exact() {
        let s = seq("video-7", Modality::Audio, 7, 5, -3.25);
        let bytes = s.to_bytes();
        let back = FeatureSequence::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn tslf_parse_errors() {
        let s = seq("v", Modality::Visual, 3, 2, 0.0);
        let bytes = s.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureSequence::from_bytes(&bad),
            Err(TslError::BadMagic { .. })
        ));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            FeatureSequence::from_bytes(&bad),
            Err(TslError::BadVersion(2))
        ));

        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(
            FeatureSequence::from_bytes(short),
            Err(TslError::Truncated { .. })
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            FeatureSequence::from_bytes(&long),
            Err(TslError::Malformed(_))
        ));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            FeatureSequence::from_bytes(&bad),
            Err(TslError::Malformed(_))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tslf");
        let s = seq("v", Modality::Fused, 2, 2, 1.0);
        save_features(&s, &path).unwrap();
        assert_eq!(load_features(&path).unwrap(), s);
        assert!(matches!(
            load_features(dir.path().join("missing")),
            Err(TslError::Io { .. })
        ));
    }
}
