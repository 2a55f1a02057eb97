//! Quantization tables, the deadzone video quantizer and the blockwise
//! transform-coding simulators built on them.

use serde::{Deserialize, Serialize};

use super::dct::{dct8x8_forward, dct8x8_inverse, tile_plane, untile_plane, DctBlock};
use super::CodecError;
use crate::data::ImageBuffer;
use crate::pixelops::{quantize_8bit, quantize_sample, rgb_to_ycbcr, ycbcr_to_rgb, ColorRange};

/// Standard luminance base table (quality 50), row-major.
pub const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard chrominance base table (quality 50), row-major.
pub const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// 8×8 quantization table with entries in `[1, 255]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTable {
    entries: [u16; 64],
    quality: Option<u8>,
}

/// Percentage scale applied to a base table: `5000/Q` below 50, `200 − 2Q`
/// from 50 up.
pub fn quality_scale(quality: u8) -> u32 {
    let q = u32::from(quality);
    if q < 50 {
        5000 / q
    } else {
        200 - 2 * q
    }
}

impl QuantTable {
    pub fn explicit(entries: [u16; 64]) -> Result<Self, CodecError> {
        if let Some(&e) = entries.iter().find(|&&e| !(1..=255).contains(&e)) {
            return Err(CodecError::InvalidParameter(format!(
                "quantization entry {e} outside [1, 255]"
            )));
        }
        Ok(Self { entries, quality: None })
    }

    /// Scales `base` to the given quality:
    /// `clamp(floor((base·scale + 50) / 100), 1, 255)`.
    pub fn scaled(base: &[u16; 64], quality: u8) -> Result<Self, CodecError> {
        if !(1..=100).contains(&quality) {
            return Err(CodecError::QualityOutOfRange(quality));
        }
        let scale = quality_scale(quality);
        let mut entries = [0u16; 64];
        for (e, &b) in entries.iter_mut().zip(base) {
            *e = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as u16;
        }
        Ok(Self {
            entries,
            quality: Some(quality),
        })
    }

    pub fn entries(&self) -> &[u16; 64] {
        &self.entries
    }

    pub fn quality(&self) -> Option<u8> {
        self.quality
    }

    /// Quantization levels `round(a / t)`.
    pub fn quantize(&self, block: &DctBlock) -> [i64; 64] {
        let mut out = [0i64; 64];
        for ((o, &a), &t) in out.iter_mut().zip(&block.0).zip(&self.entries) {
            *o = (a / f64::from(t)).round() as i64;
        }
        out
    }

    pub fn dequantize(&self, levels: &[i64; 64]) -> DctBlock {
        let mut out = [0.0; 64];
        for ((o, &l), &t) in out.iter_mut().zip(levels).zip(&self.entries) {
            *o = l as f64 * f64::from(t);
        }
        DctBlock(out)
    }
}

/// Luminance table for a JPEG quality in `1..=100`.
pub fn quant_table_from_quality(quality: u8) -> Result<QuantTable, CodecError> {
    QuantTable::scaled(&BASE_LUMA, quality)
}

/// Chrominance table for a JPEG quality in `1..=100`.
pub fn chroma_table_from_quality(quality: u8) -> Result<QuantTable, CodecError> {
    QuantTable::scaled(&BASE_CHROMA, quality)
}

/// Uniform quantizer with a widened zero bin, applied to AC coefficients;
/// DC uses plain rounding to the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoQuantModel {
    pub qstep: f64,
    pub deadzone: f64,
}

impl VideoQuantModel {
    pub fn new(qstep: f64, deadzone: f64) -> Result<Self, CodecError> {
        let m = Self { qstep, deadzone };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.qstep > 0.0 && self.qstep.is_finite()) {
            return Err(CodecError::InvalidParameter(format!(
                "qstep must be positive, got {}",
                self.qstep
            )));
        }
        if !(0.0..1.0).contains(&self.deadzone) {
            return Err(CodecError::InvalidParameter(format!(
                "deadzone must lie in [0, 1), got {}",
                self.deadzone
            )));
        }
        Ok(())
    }

    /// Stand-in for a broadcast-style H.264 frame at moderate bitrate.
    pub fn video_preset() -> Self {
        Self {
            qstep: 16.0,
            deadzone: 0.6,
        }
    }

    /// Rough HEIF-like setting; a parameter preset, not an encoder.
    pub fn heif_preset() -> Self {
        Self {
            qstep: 12.0,
            deadzone: 0.5,
        }
    }

    /// Rough WebP-like setting; a parameter preset, not an encoder.
    pub fn webp_preset() -> Self {
        Self {
            qstep: 10.0,
            deadzone: 0.4,
        }
    }

    #[inline]
    pub fn quantize_level(&self, a: f64, is_dc: bool) -> i64 {
        if is_dc {
            (a / self.qstep).round() as i64
        } else if a.abs() < self.deadzone * self.qstep {
            0
        } else {
            (a.abs() / self.qstep).round().copysign(a) as i64
        }
    }

    pub fn quantize(&self, block: &DctBlock) -> [i64; 64] {
        let mut out = [0i64; 64];
        for (i, (o, &a)) in out.iter_mut().zip(&block.0).enumerate() {
            *o = self.quantize_level(a, i == 0);
        }
        out
    }

    pub fn dequantize(&self, levels: &[i64; 64]) -> DctBlock {
        let mut out = [0.0; 64];
        for (o, &l) in out.iter_mut().zip(levels) {
            *o = l as f64 * self.qstep;
        }
        DctBlock(out)
    }
}

/// Dequantized coefficients of a transform-coded image at 8-bit scale
/// (a pixel code step of 1 equals a coefficient step of 1 for DC/8).
///
/// Planes are luma-only for 1-channel input and full-range Y, Cb, Cr for
/// 3-channel input.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedImage {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<Vec<DctBlock>>,
}

impl CodedImage {
    /// Inverse transform and color conversion back to RGB, clamped to `[0, 1]`.
    pub fn decode(&self) -> ImageBuffer {
        let (w, h) = (self.width, self.height);
        let planes: Vec<Vec<f64>> = self
            .planes
            .iter()
            .map(|blocks| {
                let px: Vec<_> = blocks
                    .iter()
                    .map(|b| {
                        let mut s = *b;
                        s.0.iter_mut().for_each(|v| *v /= 255.0);
                        dct8x8_inverse(&s, true)
                    })
                    .collect();
                untile_plane(&px, w, h)
            })
            .collect();
        let img = ImageBuffer::from_planes(w, h, planes).expect("coded layout");
        if img.channels() == 3 {
            ycbcr_to_rgb(&img, ColorRange::Full).expect("three planes")
        } else {
            img.map(|v| v.clamp(0.0, 1.0))
        }
    }

    /// Luma-plane blocks (the first plane).
    pub fn luma_blocks(&self) -> &[DctBlock] {
        &self.planes[0]
    }
}

fn forward_planes(img: &ImageBuffer) -> Vec<Vec<DctBlock>> {
    let src = if img.channels() == 3 {
        rgb_to_ycbcr(img, ColorRange::Full).expect("three channels")
    } else {
        img.clone()
    };
    let (w, h) = (src.width(), src.height());
    src.planes()
        .map(|p| {
            tile_plane(p, w, h)
                .iter()
                .map(|b| {
                    let mut d = dct8x8_forward(b, true);
                    d.0.iter_mut().for_each(|v| *v *= 255.0);
                    d
                })
                .collect()
        })
        .collect()
}

/// Blockwise centered DCT of the image at 8-bit scale, without quantization.
pub fn transform_image(img: &ImageBuffer) -> CodedImage {
    CodedImage {
        width: img.width(),
        height: img.height(),
        planes: forward_planes(img),
    }
}

/// JPEG-style coding without entropy coding or chroma subsampling. Returns
/// the dequantized coefficients a decoder would read from the bitstream.
pub fn jpeg_coefficients(img: &ImageBuffer, quality: u8) -> Result<CodedImage, CodecError> {
    let luma = quant_table_from_quality(quality)?;
    let chroma = chroma_table_from_quality(quality)?;
    let mut coded = transform_image(img);
    for (c, plane) in coded.planes.iter_mut().enumerate() {
        let table = if c == 0 { &luma } else { &chroma };
        for b in plane.iter_mut() {
            *b = table.dequantize(&table.quantize(b));
        }
    }
    Ok(coded)
}

/// JPEG round trip: quantize, reconstruct, convert back and round to 8 bits.
pub fn jpeg_simulate(img: &ImageBuffer, quality: u8) -> Result<ImageBuffer, CodecError> {
    Ok(quantize_8bit(&jpeg_coefficients(img, quality)?.decode()))
}

pub fn video_codec_coefficients(img: &ImageBuffer, model: &VideoQuantModel) -> Result<CodedImage, CodecError> {
    model.validate()?;
    let mut coded = transform_image(img);
    for plane in coded.planes.iter_mut() {
        for b in plane.iter_mut() {
            *b = model.dequantize(&model.quantize(b));
        }
    }
    Ok(coded)
}

/// Deadzone-quantizer round trip. The float reconstruction is returned
/// without 8-bit rounding so the fine-step limit approaches the input.
pub fn video_codec_simulate(img: &ImageBuffer, model: &VideoQuantModel) -> Result<ImageBuffer, CodecError> {
    Ok(video_codec_coefficients(img, model)?.decode())
}

/// Full → limited-range YCbCr with 8-bit rounding, then back to full-range
/// RGB with 8-bit rounding. Stretching 220 luma codes back over 256 leaves
/// regularly spaced empty histogram bins.
pub fn tv_range_squeeze(img: &ImageBuffer) -> ImageBuffer {
    if img.channels() == 3 {
        let tv = quantize_8bit(&rgb_to_ycbcr(img, ColorRange::Limited).expect("rgb"));
        quantize_8bit(&ycbcr_to_rgb(&tv, ColorRange::Limited).expect("rgb"))
    } else {
        img.map(|y| {
            let tv = quantize_sample((16.0 + 219.0 * y.clamp(0.0, 1.0)) / 255.0);
            quantize_sample(((255.0 * tv - 16.0) / 219.0).clamp(0.0, 1.0))
        })
    }
}

/// Fraction of AC coefficients in `blocks` with magnitude below `eps`.
pub fn zero_ac_fraction(blocks: &[DctBlock], eps: f64) -> f64 {
    let total = blocks.len() * 63;
    if total == 0 {
        return 0.0;
    }
    let zeros: usize = blocks.iter().map(|b| b.ac().filter(|a| a.abs() < eps).count()).sum();
    zeros as f64 / total as f64
}
