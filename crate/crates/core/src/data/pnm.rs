//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use super::{DataError, ImageBuffer};

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer, DataError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pnm(&bytes)
}

/// Writes P5 for 1-channel and P6 for 3-channel images. Samples are
/// rounded to the nearest 8-bit code (half away from zero) and clamped.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, DataError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) => {
            return Err(DataError::UnsupportedFormat(format!(
                "magic {:?}",
                String::from_utf8_lossy(m)
            )))
        }
        None => return Err(DataError::UnsupportedFormat("file too short".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(DataError::UnsupportedFormat("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::UnsupportedFormat("malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::UnsupportedFormat("header value overflow".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(DataError::UnsupportedFormat("missing header terminator".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(DataError::UnsupportedFormat(format!(
            "maxval {maxval} (only 255 is supported)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(DataError::UnsupportedFormat(format!("zero dimension {width}x{height}")));
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos,
    })
}

/// Decodes an in-memory PGM/PPM. Code `u` maps to `u / 255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer, DataError> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height;
    let expected = n * h.channels;
    let payload = &bytes[h.data_start..];
    if payload.len() < expected {
        return Err(DataError::TruncatedData {
            expected,
            found: payload.len(),
        });
    }
    // interleaved -> planar
    let mut data = vec![0.0; expected];
    for (i, px) in payload[..expected].chunks_exact(h.channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * n + i] = f64::from(b) / 255.0;
        }
    }
    ImageBuffer::new(h.width, h.height, h.channels, data)
}

#[inline]
pub(crate) fn to_code(u: f64) -> u8 {
    (u * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let n = img.plane_len();
    out.reserve(n * img.channels());
    for i in 0..n {
        for c in 0..img.channels() {
            out.push(to_code(img.data()[c * n + i]));
        }
    }
    out
}
