//! Pixel-level preprocessing and degradation primitives.
//!
//! All operations take and return [`ImageBuffer`]s with samples nominally in
//! `[0, 1]`. Rounding is half away from zero throughout (`f64::round`).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageBuffer;

/// BT.601 luma weights.
pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;

#[derive(Debug, Error, PartialEq)]
pub enum PixelError {
    #[error("expected {expected} channel(s), got {found}")]
    WrongChannelCount { expected: usize, found: usize },
    #[error("target size must be at least 1")]
    EmptyImage,
    #[error("crop of {size}x{size} does not fit a {width}x{height} image")]
    CropLargerThanImage { size: usize, width: usize, height: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorRange {
    Full,
    /// Luma on codes 16..=235 and chroma on 16..=240 at 8-bit scale.
    Limited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropPolicy {
    Center,
    Random,
}

/// How convolution kernels read past the image edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Half-sample symmetric extension (`c b a | a b c | c b a`).
    #[default]
    Reflect,
    /// Periodic extension.
    Circular,
}

impl Boundary {
    #[inline]
    fn index(self, p: isize, n: usize) -> usize {
        let n = n as isize;
        match self {
            Boundary::Circular => p.rem_euclid(n) as usize,
            Boundary::Reflect => {
                let m = p.rem_euclid(2 * n);
                (if m < n { m } else { 2 * n - 1 - m }) as usize
            }
        }
    }
}

fn require_rgb(img: &ImageBuffer) -> Result<(), PixelError> {
    if img.channels() != 3 {
        return Err(PixelError::WrongChannelCount {
            expected: 3,
            found: img.channels(),
        });
    }
    Ok(())
}

/// BT.601 RGB → YCbCr. Neutral gray maps to chroma 0.5 (128/255 in limited
/// range). Output is clamped to `[0, 1]`.
pub fn rgb_to_ycbcr(img: &ImageBuffer, range: ColorRange) -> Result<ImageBuffer, PixelError> {
    require_rgb(img)?;
    let n = img.plane_len();
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let y = KR * r[i] + KG * g[i] + KB * b[i];
        let cb = (b[i] - y) / (2.0 * (1.0 - KB)) + 0.5;
        let cr = (r[i] - y) / (2.0 * (1.0 - KR)) + 0.5;
        let (y, cb, cr) = match range {
            ColorRange::Full => (y, cb, cr),
            ColorRange::Limited => (
                (16.0 + 219.0 * y) / 255.0,
                (128.0 + 224.0 * (cb - 0.5)) / 255.0,
                (128.0 + 224.0 * (cr - 0.5)) / 255.0,
            ),
        };
        out[i] = y.clamp(0.0, 1.0);
        out[n + i] = cb.clamp(0.0, 1.0);
        out[2 * n + i] = cr.clamp(0.0, 1.0);
    }
    Ok(ImageBuffer::new(img.width(), img.height(), 3, out).expect("same layout"))
}

/// Inverse of [`rgb_to_ycbcr`] (before clamping). Output is clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &ImageBuffer, range: ColorRange) -> Result<ImageBuffer, PixelError> {
    require_rgb(img)?;
    let n = img.plane_len();
    let (yp, cbp, crp) = (img.plane(0), img.plane(1), img.plane(2));
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let (y, cb, cr) = match range {
            ColorRange::Full => (yp[i], cbp[i], crp[i]),
            ColorRange::Limited => (
                (255.0 * yp[i] - 16.0) / 219.0,
                (255.0 * cbp[i] - 128.0) / 224.0 + 0.5,
                (255.0 * crp[i] - 128.0) / 224.0 + 0.5,
            ),
        };
        let r = y + 2.0 * (1.0 - KR) * (cr - 0.5);
        let b = y + 2.0 * (1.0 - KB) * (cb - 0.5);
        let g = (y - KR * r - KB * b) / KG;
        out[i] = r.clamp(0.0, 1.0);
        out[n + i] = g.clamp(0.0, 1.0);
        out[2 * n + i] = b.clamp(0.0, 1.0);
    }
    Ok(ImageBuffer::new(img.width(), img.height(), 3, out).expect("same layout"))
}

#[inline]
pub fn quantize_sample(u: f64) -> f64 {
    (255.0 * u).round().clamp(0.0, 255.0) / 255.0
}

/// Rounds every sample to the nearest 8-bit code: `round(255·u)/255`,
/// clamped to the code range.
pub fn quantize_8bit(img: &ImageBuffer) -> ImageBuffer {
    img.map(quantize_sample)
}

/// 1-channel input passes through; 3-channel input gets full-range BT.601 luma.
pub fn to_luma(img: &ImageBuffer) -> ImageBuffer {
    if img.channels() == 1 {
        return img.clone();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..img.plane_len())
        .map(|i| KR * r[i] + KG * g[i] + KB * b[i])
        .collect();
    ImageBuffer::new(img.width(), img.height(), 1, data).expect("same layout")
}

/// Bilinear resampling to an explicit size, with half-pixel centers and edge
/// clamping.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer, PixelError> {
    if out_w == 0 || out_h == 0 {
        return Err(PixelError::EmptyImage);
    }
    let (w, h) = (img.width(), img.height());
    if (out_w, out_h) == (w, h) {
        return Ok(img.clone());
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let taps = |out: usize, scale: f64, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xt = taps(out_w, sx, w);
    let yt = taps(out_h, sy, h);
    let mut data = Vec::with_capacity(out_w * out_h * img.channels());
    for plane in img.planes() {
        for &(y0, y1, fy) in &yt {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &xt {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(ImageBuffer::new(out_w, out_h, img.channels(), data).expect("resize layout"))
}

/// Output dimensions of [`shorter_side_resize`].
pub fn shorter_side_dims(width: usize, height: usize, target: usize) -> (usize, usize) {
    let s = target as f64 / width.min(height) as f64;
    if width <= height {
        (target, ((height as f64 * s).round() as usize).max(target))
    } else {
        (((width as f64 * s).round() as usize).max(target), target)
    }
}

/// Scales the image so its shorter side equals `target`, preserving aspect.
pub fn shorter_side_resize(img: &ImageBuffer, target: usize) -> Result<ImageBuffer, PixelError> {
    if target == 0 {
        return Err(PixelError::EmptyImage);
    }
    let (w, h) = shorter_side_dims(img.width(), img.height(), target);
    resize_bilinear(img, w, h)
}

/// Copies the `w × h` window whose top-left corner is `(x0, y0)`.
pub fn crop_region(img: &ImageBuffer, x0: usize, y0: usize, w: usize, h: usize) -> ImageBuffer {
    assert!(x0 + w <= img.width() && y0 + h <= img.height(), "crop out of bounds");
    let iw = img.width();
    let mut data = Vec::with_capacity(w * h * img.channels());
    for plane in img.planes() {
        for y in y0..y0 + h {
            data.extend_from_slice(&plane[y * iw + x0..y * iw + x0 + w]);
        }
    }
    ImageBuffer::new(w, h, img.channels(), data).expect("crop layout")
}

/// Square crop. `Center` uses offsets `floor((w−size)/2)`, `floor((h−size)/2)`;
/// `Random` draws each offset uniformly from the valid range using `rng`.
pub fn crop<R: Rng + ?Sized>(
    img: &ImageBuffer,
    size: usize,
    policy: CropPolicy,
    rng: &mut R,
) -> Result<ImageBuffer, PixelError> {
    let (w, h) = (img.width(), img.height());
    if size == 0 {
        return Err(PixelError::EmptyImage);
    }
    if size > w.min(h) {
        return Err(PixelError::CropLargerThanImage {
            size,
            width: w,
            height: h,
        });
    }
    let (x0, y0) = match policy {
        CropPolicy::Center => ((w - size) / 2, (h - size) / 2),
        CropPolicy::Random => (rng.random_range(0..=w - size), rng.random_range(0..=h - size)),
    };
    Ok(crop_region(img, x0, y0, size, size))
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_rows(plane: &[f64], w: usize, h: usize, kernel: &[f64], boundary: Boundary) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let src = x as isize - (t as isize - r);
                acc += kv * row[boundary.index(src, w)];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn convolve_cols(plane: &[f64], w: usize, h: usize, kernel: &[f64], boundary: Boundary) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let sy = boundary.index(y as isize - (t as isize - r), h);
            let src = &plane[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Separable Gaussian blur. `sigma = 0` returns the input unchanged.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64, boundary: Boundary) -> ImageBuffer {
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be non-negative");
    if sigma == 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let (w, h) = (img.width(), img.height());
    let planes: Vec<Vec<f64>> = img
        .planes()
        .map(|p| {
            let tmp = convolve_rows(p, w, h, &kernel, boundary);
            convolve_cols(&tmp, w, h, &kernel, boundary)
        })
        .collect();
    ImageBuffer::from_planes(w, h, planes).expect("blur layout")
}

/// Offsets and weights of a rasterized line kernel of `length` taps at
/// `angle_deg` (counter-clockwise from +x, image y pointing down). The
/// dominant axis advances one pixel per tap, so taps never coincide.
pub fn motion_kernel(length: usize, angle_deg: f64) -> Vec<(isize, isize, f64)> {
    assert!(length >= 1, "motion blur length must be at least 1");
    let theta = angle_deg.to_radians();
    let (s, c) = theta.sin_cos();
    let m = c.abs().max(s.abs());
    let w = 1.0 / length as f64;
    let half = (length as isize - 1) / 2;
    (0..length as isize)
        .map(|i| {
            let t = (i - half) as f64;
            let dx = (t * c / m).round() as isize;
            let dy = (-t * s / m).round() as isize;
            (dx, dy, w)
        })
        .collect()
}

/// Linear motion blur: convolution with a length-`length` line kernel of
/// equal weights. `length = 1` is the identity.
pub fn motion_blur(img: &ImageBuffer, length: usize, angle_deg: f64, boundary: Boundary) -> ImageBuffer {
    if length <= 1 {
        return img.clone();
    }
    let kernel = motion_kernel(length, angle_deg);
    let (w, h) = (img.width(), img.height());
    let planes: Vec<Vec<f64>> = img
        .planes()
        .map(|p| {
            let mut out = vec![0.0; p.len()];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for &(dx, dy, kw) in &kernel {
                        let sx = boundary.index(x as isize - dx, w);
                        let sy = boundary.index(y as isize - dy, h);
                        acc += kw * p[sy * w + sx];
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        })
        .collect();
    ImageBuffer::from_planes(w, h, planes).expect("blur layout")
}

pub fn horizontal_flip(img: &ImageBuffer) -> ImageBuffer {
    let w = img.width();
    let mut data = img.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    ImageBuffer::new(w, img.height(), img.channels(), data).expect("flip layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rgb(r: f64, g: f64, b: f64) -> ImageBuffer {
        ImageBuffer::new(1, 1, 3, vec![r, g, b]).unwrap()
    }

    fn noise(w: usize, h: usize, ch: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, ch, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn ycbcr_reference_points() {
        let white = rgb_to_ycbcr(&rgb(1.0, 1.0, 1.0), ColorRange::Full).unwrap();
        assert!((white.data()[0] - 1.0).abs() < 1e-12);
        assert!((white.data()[1] - 0.5).abs() < 1e-12);
        assert!((white.data()[2] - 0.5).abs() < 1e-12);

        let red = rgb_to_ycbcr(&rgb(1.0, 0.0, 0.0), ColorRange::Full).unwrap();
        assert!((red.data()[0] - 0.299).abs() < 1e-12);

        let white_tv = rgb_to_ycbcr(&rgb(1.0, 1.0, 1.0), ColorRange::Limited).unwrap();
        assert!((white_tv.data()[0] - 235.0 / 255.0).abs() < 1e-12);
        assert!((white_tv.data()[1] - 128.0 / 255.0).abs() < 1e-12);

        let black = ycbcr_to_rgb(&rgb(16.0 / 255.0, 128.0 / 255.0, 128.0 / 255.0), ColorRange::Limited).unwrap();
        assert!(black.data().iter().all(|v| v.abs() < 1e-6));

        let back = ycbcr_to_rgb(&rgb(1.0, 0.5, 0.5), ColorRange::Full).unwrap();
        assert!(back.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ycbcr_round_trip_and_limited_luma_bounds() {
        for seed in 0..20 {
            let img = noise(7, 5, 3, seed);
            let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img, ColorRange::Full).unwrap(), ColorRange::Full).unwrap();
            assert!(img.max_abs_diff(&back) < 1e-6);
            let tv = rgb_to_ycbcr(&img, ColorRange::Limited).unwrap();
            assert!(tv.plane(0).iter().all(|&y| (16.0 / 255.0..=235.0 / 255.0).contains(&y)));
        }
        assert_eq!(
            rgb_to_ycbcr(&ImageBuffer::filled(2, 2, 1, 0.5), ColorRange::Full),
            Err(PixelError::WrongChannelCount { expected: 3, found: 1 })
        );
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_sample(0.5), 128.0 / 255.0);
        assert_eq!(quantize_sample(0.0), 0.0);
        let img = noise(9, 9, 3, 3);
        let q = quantize_8bit(&img);
        assert_eq!(quantize_8bit(&q), q);
    }

    #[test]
    fn resize_dimensions() {
        let img = ImageBuffer::filled(512, 256, 1, 0.25);
        assert_eq!(shorter_side_resize(&img, 256).unwrap(), img);
        assert_eq!(shorter_side_dims(1024, 512, 256), (512, 256));
        assert_eq!(shorter_side_dims(300, 200, 256), (384, 256));
        assert_eq!(shorter_side_dims(200, 300, 256), (256, 384));
        let r = shorter_side_resize(&noise(30, 20, 3, 1), 13).unwrap();
        assert_eq!(r.width().min(r.height()), 13);
        assert_eq!(shorter_side_resize(&img, 0), Err(PixelError::EmptyImage));
    }

    #[test]
    fn resize_halving_averages_pairs() {
        let img = ImageBuffer::new(4, 2, 1, vec![0., 1., 2., 3., 0., 1., 2., 3.]).unwrap();
        let r = resize_bilinear(&img, 2, 1).unwrap();
        assert_eq!(r.data(), &[0.5, 2.5]);
    }

    #[test]
    fn crop_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = ImageBuffer::from_fn(512, 256, 1, |_, x, _| x as f64 / 512.0);
        let c = crop(&img, 256, CropPolicy::Center, &mut rng).unwrap();
        assert_eq!(c.get(0, 0, 0), 128.0 / 512.0);

        let sq = noise(16, 16, 1, 2);
        assert_eq!(crop(&sq, 16, CropPolicy::Center, &mut rng).unwrap(), sq);
        assert_eq!(crop(&sq, 16, CropPolicy::Random, &mut rng).unwrap(), sq);

        let wide = ImageBuffer::from_fn(257, 256, 1, |_, x, _| x as f64);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            crop(&wide, 256, CropPolicy::Random, &mut r).unwrap().get(0, 0, 0)
        };
        for seed in 0..20 {
            let off = draw(seed);
            assert!(off == 0.0 || off == 1.0);
            assert_eq!(off, draw(seed));
        }
        assert!(matches!(
            crop(&sq, 17, CropPolicy::Center, &mut rng),
            Err(PixelError::CropLargerThanImage { .. })
        ));
    }

    #[test]
    fn gaussian_properties() {
        let c = ImageBuffer::filled(12, 9, 3, 0.37);
        for b in [Boundary::Reflect, Boundary::Circular] {
            assert!(gaussian_blur(&c, 1.7, b).max_abs_diff(&c) < 1e-9);
        }
        let img = noise(10, 10, 1, 4);
        assert_eq!(gaussian_blur(&img, 0.0, Boundary::Reflect), img);

        let n = 15;
        let imp = ImageBuffer::from_fn(n, n, 1, |_, x, y| if x == 7 && y == 7 { 1.0 } else { 0.0 });
        let out = gaussian_blur(&imp, 1.0, Boundary::Circular);
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as isize - 7, y as isize - 7);
                let expect = if dx.abs() <= 3 && dy.abs() <= 3 {
                    k[(dx + 3) as usize] * k[(dy + 3) as usize]
                } else {
                    0.0
                };
                assert!((out.get(0, x, y) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gaussian_mean_preserved_under_both_boundaries() {
        for seed in 0..5 {
            let img = noise(13, 11, 1, seed);
            for b in [Boundary::Reflect, Boundary::Circular] {
                let out = gaussian_blur(&img, 2.3, b);
                assert!((out.mean() - img.mean()).abs() < 1e-12, "{b:?}");
            }
            // radius larger than the image
            let out = gaussian_blur(&img, 6.0, Boundary::Reflect);
            assert!((out.mean() - img.mean()).abs() < 1e-12);
        }
    }

    #[test]
    fn motion_blur_examples() {
        let img = noise(8, 8, 3, 5);
        assert_eq!(motion_blur(&img, 1, 33.0, Boundary::Reflect), img);
        let c = ImageBuffer::filled(9, 7, 1, 0.8);
        for b in [Boundary::Reflect, Boundary::Circular] {
            for angle in [0.0, 30.0, 45.0, 90.0, 137.0] {
                assert!(motion_blur(&c, 5, angle, b).max_abs_diff(&c) < 1e-9);
            }
        }
        let row = ImageBuffer::new(5, 1, 1, vec![0., 0., 3., 0., 0.]).unwrap();
        let out = motion_blur(&row, 3, 0.0, Boundary::Circular);
        for (a, e) in out.data().iter().zip([0., 1., 1., 1., 0.]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn motion_mean_preserved(seed in 0u64..1000, len in 1usize..9, angle in 0.0f64..360.0, half in 1usize..4) {
            let img = noise(12, 10, 3, seed);
            let out = motion_blur(&img, len, angle, Boundary::Circular);
            proptest::prop_assert!((out.mean() - img.mean()).abs() < 1e-12);
            // mirror extension balances mass only for axis-symmetric kernels
            let odd = 2 * half + 1;
            for a in [0.0, 90.0, 180.0, 270.0] {
                let out = motion_blur(&img, odd, a, Boundary::Reflect);
                proptest::prop_assert!((out.mean() - img.mean()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn motion_kernel_taps_are_distinct() {
        for len in 1..9 {
            for angle in [0.0, 10.0, 45.0, 60.0, 90.0, 200.0] {
                let k = motion_kernel(len, angle);
                let mut pts: Vec<_> = k.iter().map(|&(x, y, _)| (x, y)).collect();
                pts.sort();
                pts.dedup();
                assert_eq!(pts.len(), len);
                assert!((k.iter().map(|t| t.2).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flip_and_luma() {
        let row = ImageBuffer::new(3, 1, 1, vec![1., 2., 3.]).unwrap();
        assert_eq!(horizontal_flip(&row).data(), &[3., 2., 1.]);
        let img = noise(6, 4, 3, 6);
        assert_eq!(horizontal_flip(&horizontal_flip(&img)), img);
        let sym = ImageBuffer::new(3, 1, 1, vec![0.2, 0.9, 0.2]).unwrap();
        assert_eq!(horizontal_flip(&sym), sym);

        let gray = noise(4, 4, 1, 7);
        assert_eq!(to_luma(&gray), gray);
        assert!((to_luma(&rgb(1., 1., 1.)).data()[0] - 1.0).abs() < 1e-12);
        assert!((to_luma(&rgb(0., 1., 0.)).data()[0] - 0.587).abs() < 1e-12);
    }
}
