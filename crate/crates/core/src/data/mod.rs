//! Shared data model: labels, modalities, sample records, planar images and
//! scored predictions.

mod manifest;
mod pnm;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{parse_manifest, Manifest, SampleRecord};
pub use pnm::{decode_pnm, encode_pnm, load_image, save_image};

/// Per-sample seed derived from a master seed and the sample id, so results
/// do not depend on processing order or thread count.
pub fn sample_seed(master: u64, id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("line {line}: unknown label {value:?} (expected \"real\" or \"fake\")")]
    UnknownLabel { line: usize, value: String },
    #[error("line {line}: unknown modality {value:?} (expected \"image\" or \"video\")")]
    UnknownModality { line: usize, value: String },
    #[error("line {line}: {message}")]
    InvalidRecord { line: usize, message: String },
    #[error("manifest {0} has no records")]
    EmptyManifest(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated image data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

/// Whether a sample is a still image or a frame extracted from a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Video];

    /// Numeric code: image 0, video 1.
    pub fn index(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Video => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(Modality::Image),
            "video" => Some(Modality::Video),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth class. `Fake` is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    /// Numeric code: real 0, fake 1.
    pub fn index(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn target(self) -> f64 {
        f64::from(self.index())
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Planar floating-point image. Samples are nominally in `[0, 1]`; plane `c`
/// occupies `data[c*w*h .. (c+1)*w*h]` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(DataError::InvalidImage(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(DataError::InvalidImage(format!(
                "expected {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidImage(format!("non-finite sample at index {pos}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Constant image of the given value in every channel.
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels]).expect("valid constant image")
    }

    /// Builds an image by evaluating `f(channel, x, y)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self::new(width, height, channels, data).expect("valid generated image")
    }

    /// Assembles an image from equally sized planes.
    pub fn from_planes(width: usize, height: usize, planes: Vec<Vec<f64>>) -> Result<Self, DataError> {
        let channels = planes.len();
        let data = planes.concat();
        Self::new(width, height, channels, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[c * self.plane_len() + y * self.width + x]
    }

    pub fn planes(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.plane_len())
    }

    /// Applies `f` to every sample, keeping the layout.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// A feature vector with its ground truth, before ℓ2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedSample {
    pub feature: Vec<f64>,
    pub label: Label,
    pub modality: Modality,
}

impl EmbeddedSample {
    pub fn new(feature: Vec<f64>, label: Label, modality: Modality) -> Result<Self, DataError> {
        if feature.len() < 2 {
            return Err(DataError::InvalidImage(format!(
                "feature dimension must be at least 2, got {}",
                feature.len()
            )));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidImage("non-finite feature value".into()));
        }
        Ok(Self {
            feature,
            label,
            modality,
        })
    }
}

/// Probability of `Fake` for one sample, with ground truth and subset tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub score: f64,
    pub label: Label,
    pub subset: String,
}

impl ScoredPrediction {
    /// Panics if `score` is outside `[0, 1]`.
    pub fn new(score: f64, label: Label, subset: impl Into<String>) -> Self {
        assert!((0.0..=1.0).contains(&score), "score must lie in [0, 1], got {score}");
        Self {
            score,
            label,
            subset: subset.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enum_string_forms_round_trip() {
        for m in Modality::ALL {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s, format!("\"{}\"", m.as_str()));
            assert_eq!(serde_json::from_str::<Modality>(&s).unwrap(), m);
            assert_eq!(Modality::parse(m.as_str()), Some(m));
        }
        for l in Label::ALL {
            let s = serde_json::to_string(&l).unwrap();
            assert_eq!(s, format!("\"{}\"", l.as_str()));
            assert_eq!(serde_json::from_str::<Label>(&s).unwrap(), l);
        }
        assert_eq!(Label::Real.index(), 0);
        assert_eq!(Label::Fake.index(), 1);
        assert_eq!(Modality::Image.index(), 0);
        assert_eq!(Modality::Video.index(), 1);
    }

    #[test]
    fn image_rejects_bad_layout() {
        assert!(ImageBuffer::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImageBuffer::new(0, 2, 1, vec![]).is_err());
        assert!(ImageBuffer::new(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(ImageBuffer::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn embedded_sample_needs_two_dims() {
        assert!(EmbeddedSample::new(vec![1.0], Label::Real, Modality::Image).is_err());
        assert!(EmbeddedSample::new(vec![1.0, 0.0], Label::Real, Modality::Image).is_ok());
    }
}
