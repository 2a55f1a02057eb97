#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::data::{save_image, Manifest, SampleRecord};
use xmodal::pixelops::quantize_8bit;
use xmodal::{ImageBuffer, Label, Modality};

/// Smooth gradients, a sinusoid and a few rectangles plus pixel noise,
/// rounded to 8 bits.
pub fn structured_image(w: usize, h: usize, channels: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gx = rng.random_range(-0.4..0.4);
    let gy = rng.random_range(-0.4..0.4);
    let freq = rng.random_range(0.05..0.4);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.05..0.2);
    let rects: Vec<(usize, usize, usize, usize, f64)> = (0..3)
        .map(|_| {
            let x0 = rng.random_range(0..w);
            let y0 = rng.random_range(0..h);
            (
                x0,
                y0,
                rng.random_range(2..w / 2),
                rng.random_range(2..h / 2),
                rng.random_range(-0.25..0.25),
            )
        })
        .collect();
    let tint: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.08..0.08)).collect();
    let noise = rng.random_range(0.02..0.08);
    let mut img = ImageBuffer::from_fn(w, h, channels, |c, x, y| {
        let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
        let mut v = 0.5 + gx * (fx - 0.5) + gy * (fy - 0.5) + amp * (freq * x as f64 + phase).sin() + tint[c];
        for &(x0, y0, rw, rh, d) in &rects {
            if x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh {
                v += d;
            }
        }
        v
    });
    let mut nrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for c in 0..channels {
        for v in img.plane_mut(c) {
            *v = (*v + noise * (nrng.random::<f64>() - 0.5) * 2.0).clamp(0.0, 1.0);
        }
    }
    quantize_8bit(&img)
}

/// Writes images as `img_<i>.ppm|pgm` plus `manifest.jsonl`.
pub fn write_dataset(dir: &Path, images: &[ImageBuffer]) -> std::path::PathBuf {
    let mut records = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
        let name = format!("img_{i:03}.{ext}");
        save_image(img, dir.join(&name)).unwrap();
        let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
        let modality = if i % 3 == 0 { Modality::Video } else { Modality::Image };
        records.push(SampleRecord::new(
            format!("s{i:03}"),
            name,
            label,
            modality,
            "synthetic",
        ));
    }
    let path = dir.join("manifest.jsonl");
    Manifest::from_records(records, path.display().to_string())
        .unwrap()
        .write(&path)
        .unwrap();
    path
}
