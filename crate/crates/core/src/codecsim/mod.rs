//! Transform-coding simulators and declarative degradation chains.
//!
//! A [`ChainSpec`] is an ordered list of [`ChainStep`]s. The canonical video
//! pipeline is motion blur, then resize, then a codec. Chains serialize to a
//! JSON document of the form
//!
//! ```json
//! {"steps": [{"op": "motion_blur", "length": 5, "angle": 0.0},
//!            {"op": "resize", "shorter_side": 256},
//!            {"op": "video_codec_sim", "qstep": 16.0, "deadzone": 0.6}]}
//! ```

mod dct;
mod quant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageBuffer;
use crate::pixelops::{self, Boundary, PixelError};

pub use dct::{block_grid, dct8x8_forward, dct8x8_inverse, tile_plane, untile_plane, DctBlock, PixelBlock};
pub use quant::{
    chroma_table_from_quality, jpeg_coefficients, jpeg_simulate, quality_scale, quant_table_from_quality,
    transform_image, tv_range_squeeze, video_codec_coefficients, video_codec_simulate, zero_ac_fraction, CodedImage,
    QuantTable, VideoQuantModel, BASE_CHROMA, BASE_LUMA,
};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("JPEG quality {0} outside 1..=100")]
    QualityOutOfRange(u8),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("chain sampling drew no steps and identity chains are not allowed")]
    EmptyChainDrawn,
    #[error("chain spec must contain at least one step")]
    EmptyChain,
    #[error("chain spec JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Pixel(#[from] PixelError),
}

/// One stage of a degradation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChainStep {
    MotionBlur {
        length: usize,
        angle: f64,
    },
    GaussianBlur {
        sigma: f64,
    },
    Resize {
        shorter_side: usize,
    },
    JpegSim {
        quality: u8,
    },
    VideoCodecSim {
        qstep: f64,
        deadzone: f64,
    },
    TvRangeSqueeze,
    /// Multiplicative factors drawn uniformly from `1 ± range` per call.
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
    #[serde(rename = "quantize_8bit")]
    Quantize8Bit,
}

impl ChainStep {
    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: String| Err(CodecError::InvalidParameter(m));
        match *self {
            ChainStep::MotionBlur { length, angle } => {
                if length == 0 || !angle.is_finite() {
                    return bad(format!("motion_blur length {length} angle {angle}"));
                }
            }
            ChainStep::GaussianBlur { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return bad(format!("gaussian_blur sigma {sigma}"));
                }
            }
            ChainStep::Resize { shorter_side } => {
                if shorter_side == 0 {
                    return bad("resize shorter_side must be positive".into());
                }
            }
            ChainStep::JpegSim { quality } => {
                if !(1..=100).contains(&quality) {
                    return Err(CodecError::QualityOutOfRange(quality));
                }
            }
            ChainStep::VideoCodecSim { qstep, deadzone } => {
                VideoQuantModel { qstep, deadzone }.validate()?;
            }
            ChainStep::ColorJitter {
                brightness,
                contrast,
                saturation,
            } => {
                for (name, r) in [
                    ("brightness", brightness),
                    ("contrast", contrast),
                    ("saturation", saturation),
                ] {
                    if !(0.0..=1.0).contains(&r) {
                        return bad(format!("color_jitter {name} range {r} outside [0, 1]"));
                    }
                }
            }
            ChainStep::TvRangeSqueeze | ChainStep::Quantize8Bit => {}
        }
        Ok(())
    }

    pub fn is_random(&self) -> bool {
        matches!(self, ChainStep::ColorJitter { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub steps: Vec<ChainStep>,
}

impl ChainSpec {
    pub fn new(steps: Vec<ChainStep>) -> Result<Self, CodecError> {
        let spec = Self { steps };
        spec.validate()?;
        Ok(spec)
    }

    /// A chain with no steps. Only produced by identity-permitting sampling.
    pub fn identity() -> Self {
        Self { steps: Vec::new() }
    }

    /// `MotionBlur → Resize → VideoCodecSim`.
    pub fn canonical(blur_length: usize, angle: f64, shorter_side: usize, codec: VideoQuantModel) -> Self {
        Self {
            steps: vec![
                ChainStep::MotionBlur {
                    length: blur_length,
                    angle,
                },
                ChainStep::Resize { shorter_side },
                ChainStep::VideoCodecSim {
                    qstep: codec.qstep,
                    deadzone: codec.deadzone,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.steps.is_empty() {
            return Err(CodecError::EmptyChain);
        }
        self.steps.iter().try_for_each(ChainStep::validate)
    }

    pub fn from_json(text: &str) -> Result<Self, CodecError> {
        let spec: ChainSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("chain serializes")
    }
}

fn color_jitter<R: Rng + ?Sized>(
    img: &ImageBuffer,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    rng: &mut R,
) -> ImageBuffer {
    let mut factor = |r: f64| {
        if r > 0.0 {
            rng.random_range(1.0 - r..=1.0 + r)
        } else {
            1.0
        }
    };
    let (fb, fc, fs) = (factor(brightness), factor(contrast), factor(saturation));
    let mut out = img.map(|v| v * fb);
    let luma = pixelops::to_luma(&out);
    let mean = luma.mean();
    out = out.map(|v| (v - mean) * fc + mean);
    if out.channels() == 3 && fs != 1.0 {
        let luma = pixelops::to_luma(&out);
        let n = out.plane_len();
        let mut data = out.into_data();
        for c in 0..3 {
            for (v, &l) in data[c * n..(c + 1) * n].iter_mut().zip(luma.data()) {
                *v = (*v - l) * fs + l;
            }
        }
        out = ImageBuffer::new(img.width(), img.height(), 3, data).expect("jitter layout");
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

/// Applies one step. Only `ColorJitter` draws from `rng`.
pub fn apply_step<R: Rng + ?Sized>(
    img: &ImageBuffer,
    step: &ChainStep,
    rng: &mut R,
) -> Result<ImageBuffer, CodecError> {
    step.validate()?;
    Ok(match *step {
        ChainStep::MotionBlur { length, angle } => pixelops::motion_blur(img, length, angle, Boundary::Reflect),
        ChainStep::GaussianBlur { sigma } => pixelops::gaussian_blur(img, sigma, Boundary::Reflect),
        ChainStep::Resize { shorter_side } => pixelops::shorter_side_resize(img, shorter_side)?,
        ChainStep::JpegSim { quality } => jpeg_simulate(img, quality)?,
        ChainStep::VideoCodecSim { qstep, deadzone } => {
            video_codec_simulate(img, &VideoQuantModel { qstep, deadzone })?
        }
        ChainStep::TvRangeSqueeze => tv_range_squeeze(img),
        ChainStep::ColorJitter {
            brightness,
            contrast,
            saturation,
        } => color_jitter(img, brightness, contrast, saturation, rng),
        ChainStep::Quantize8Bit => pixelops::quantize_8bit(img),
    })
}

/// Runs the chain's steps in order. Deterministic for a given generator state.
pub fn apply_chain<R: Rng + ?Sized>(
    img: &ImageBuffer,
    chain: &ChainSpec,
    rng: &mut R,
) -> Result<ImageBuffer, CodecError> {
    let mut cur = img.clone();
    for step in &chain.steps {
        cur = apply_step(&cur, step, rng)?;
    }
    Ok(cur)
}

/// Inclusive `[lo, hi]` parameter range.
pub type Range<T> = [T; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionBlurSampler {
    pub prob: f64,
    pub length: Range<usize>,
    pub angle: Range<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBlurSampler {
    pub prob: f64,
    pub sigma: Range<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeSampler {
    pub prob: f64,
    pub shorter_side: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecSampler {
    Jpeg {
        prob: f64,
        quality: Range<u8>,
    },
    Video {
        prob: f64,
        qstep: Range<f64>,
        deadzone: Range<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorSampler {
    pub prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

/// Per-step inclusion probabilities and parameter ranges for random chains.
/// Steps are emitted in the fixed order blur → resize → codec → color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSamplingConfig {
    pub motion_blur: MotionBlurSampler,
    pub gaussian_blur: GaussianBlurSampler,
    pub resize: ResizeSampler,
    pub codec: CodecSampler,
    pub color: ColorSampler,
    #[serde(default)]
    pub allow_identity: bool,
}

impl Default for ChainSamplingConfig {
    fn default() -> Self {
        Self {
            motion_blur: MotionBlurSampler {
                prob: 0.5,
                length: [3, 9],
                angle: [0.0, 180.0],
            },
            gaussian_blur: GaussianBlurSampler {
                prob: 0.3,
                sigma: [0.5, 1.5],
            },
            resize: ResizeSampler {
                prob: 0.5,
                shorter_side: [128, 256],
            },
            codec: CodecSampler::Video {
                prob: 0.8,
                qstep: [8.0, 24.0],
                deadzone: [0.3, 0.8],
            },
            color: ColorSampler {
                prob: 0.3,
                brightness: 0.2,
                contrast: 0.2,
                saturation: 0.2,
            },
            allow_identity: false,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), CodecError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CodecError::InvalidRange(format!(
            "{name} probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &Range<T>) -> Result<(), CodecError> {
    if r[0] > r[1] {
        return Err(CodecError::InvalidRange(format!("{name} range {r:?} has lo > hi")));
    }
    Ok(())
}

fn uniform_f64<R: Rng + ?Sized>(rng: &mut R, r: &Range<f64>) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

impl ChainSamplingConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        check_prob("motion_blur", self.motion_blur.prob)?;
        check_range("motion_blur.length", &self.motion_blur.length)?;
        check_range("motion_blur.angle", &self.motion_blur.angle)?;
        if self.motion_blur.length[0] == 0 {
            return Err(CodecError::InvalidRange("motion_blur.length must be ≥ 1".into()));
        }
        check_prob("gaussian_blur", self.gaussian_blur.prob)?;
        check_range("gaussian_blur.sigma", &self.gaussian_blur.sigma)?;
        if self.gaussian_blur.sigma[0] < 0.0 {
            return Err(CodecError::InvalidRange("gaussian_blur.sigma must be ≥ 0".into()));
        }
        check_prob("resize", self.resize.prob)?;
        check_range("resize.shorter_side", &self.resize.shorter_side)?;
        if self.resize.shorter_side[0] == 0 {
            return Err(CodecError::InvalidRange("resize.shorter_side must be ≥ 1".into()));
        }
        match &self.codec {
            CodecSampler::Jpeg { prob, quality } => {
                check_prob("codec", *prob)?;
                check_range("codec.quality", quality)?;
                if quality[0] < 1 || quality[1] > 100 {
                    return Err(CodecError::InvalidRange(format!("codec.quality {quality:?}")));
                }
            }
            CodecSampler::Video { prob, qstep, deadzone } => {
                check_prob("codec", *prob)?;
                check_range("codec.qstep", qstep)?;
                check_range("codec.deadzone", deadzone)?;
                if qstep[0] <= 0.0 || deadzone[0] < 0.0 || deadzone[1] >= 1.0 {
                    return Err(CodecError::InvalidRange(
                        "codec.qstep must be > 0 and deadzone within [0, 1)".into(),
                    ));
                }
            }
        }
        check_prob("color", self.color.prob)?;
        ChainStep::ColorJitter {
            brightness: self.color.brightness,
            contrast: self.color.contrast,
            saturation: self.color.saturation,
        }
        .validate()
        .map_err(|e| CodecError::InvalidRange(e.to_string()))
    }
}

/// Draws a random chain: each step is included independently with its
/// probability and its parameters are uniform over the configured ranges.
pub fn sample_random_chain<R: Rng + ?Sized>(
    config: &ChainSamplingConfig,
    rng: &mut R,
) -> Result<ChainSpec, CodecError> {
    config.validate()?;
    let mut steps = Vec::new();
    let mb = &config.motion_blur;
    if rng.random_bool(mb.prob) {
        steps.push(ChainStep::MotionBlur {
            length: rng.random_range(mb.length[0]..=mb.length[1]),
            angle: uniform_f64(rng, &mb.angle),
        });
    }
    let gb = &config.gaussian_blur;
    if rng.random_bool(gb.prob) {
        steps.push(ChainStep::GaussianBlur {
            sigma: uniform_f64(rng, &gb.sigma),
        });
    }
    let rs = &config.resize;
    if rng.random_bool(rs.prob) {
        steps.push(ChainStep::Resize {
            shorter_side: rng.random_range(rs.shorter_side[0]..=rs.shorter_side[1]),
        });
    }
    match &config.codec {
        CodecSampler::Jpeg { prob, quality } => {
            if rng.random_bool(*prob) {
                steps.push(ChainStep::JpegSim {
                    quality: rng.random_range(quality[0]..=quality[1]),
                });
            }
        }
        CodecSampler::Video { prob, qstep, deadzone } => {
            if rng.random_bool(*prob) {
                steps.push(ChainStep::VideoCodecSim {
                    qstep: uniform_f64(rng, qstep),
                    deadzone: uniform_f64(rng, deadzone),
                });
            }
        }
    }
    let c = &config.color;
    if rng.random_bool(c.prob) {
        steps.push(ChainStep::ColorJitter {
            brightness: c.brightness,
            contrast: c.contrast,
            saturation: c.saturation,
        });
    }
    if steps.is_empty() {
        return if config.allow_identity {
            Ok(ChainSpec::identity())
        } else {
            Err(CodecError::EmptyChainDrawn)
        };
    }
    Ok(ChainSpec { steps })
}
