//! Orthonormal 8×8 DCT-II and block tiling helpers.

use std::sync::OnceLock;

/// 8×8 coefficient block, row-major with `(0, 0)` the DC term. Row index is
/// vertical frequency, column index horizontal frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DctBlock(pub [f64; 64]);

impl DctBlock {
    pub const ZERO: DctBlock = DctBlock([0.0; 64]);

    #[inline]
    pub fn dc(&self) -> f64 {
        self.0[0]
    }

    /// The 63 AC coefficients in row-major order.
    pub fn ac(&self) -> impl Iterator<Item = f64> + '_ {
        self.0[1..].iter().copied()
    }

    pub fn energy(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum()
    }
}

/// Pixel block, row-major.
pub type PixelBlock = [f64; 64];

fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; 8]; 8];
        for (k, row) in c.iter_mut().enumerate() {
            let alpha = if k == 0 {
                (1.0f64 / 8.0).sqrt()
            } else {
                (2.0f64 / 8.0).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = alpha * ((2 * n + 1) as f64 * k as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        c
    })
}

/// Forward 2-D DCT-II, orthonormal. With `centered`, 0.5 is subtracted from
/// every pixel first (128 at 8-bit scale when pixels are in `[0, 1]`).
pub fn dct8x8_forward(pixels: &PixelBlock, centered: bool) -> DctBlock {
    let c = basis();
    let shift = if centered { 0.5 } else { 0.0 };
    // rows: tmp[y][k] = Σ_x C[k][x] p[y][x]
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for k in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += c[k][x] * (pixels[y * 8 + x] - shift);
            }
            tmp[y * 8 + k] = acc;
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                acc += c[v][y] * tmp[y * 8 + u];
            }
            out[v * 8 + u] = acc;
        }
    }
    DctBlock(out)
}

/// Exact inverse of [`dct8x8_forward`].
pub fn dct8x8_inverse(coeffs: &DctBlock, centered: bool) -> PixelBlock {
    let c = basis();
    let shift = if centered { 0.5 } else { 0.0 };
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for v in 0..8 {
                acc += c[v][y] * coeffs.0[v * 8 + u];
            }
            tmp[y * 8 + u] = acc;
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                acc += c[u][x] * tmp[y * 8 + u];
            }
            out[y * 8 + x] = acc + shift;
        }
    }
    out
}

/// Number of blocks along each axis for a `w × h` plane.
#[inline]
pub fn block_grid(w: usize, h: usize) -> (usize, usize) {
    (w.div_ceil(8), h.div_ceil(8))
}

/// Splits a plane into 8×8 blocks in raster order, replicating the last
/// row/column into the padding.
pub fn tile_plane(plane: &[f64], w: usize, h: usize) -> Vec<PixelBlock> {
    let (bw, bh) = block_grid(w, h);
    let mut blocks = Vec::with_capacity(bw * bh);
    for by in 0..bh {
        for bx in 0..bw {
            let mut b = [0.0; 64];
            for y in 0..8 {
                let sy = (by * 8 + y).min(h - 1);
                for x in 0..8 {
                    let sx = (bx * 8 + x).min(w - 1);
                    b[y * 8 + x] = plane[sy * w + sx];
                }
            }
            blocks.push(b);
        }
    }
    blocks
}

/// Reassembles blocks from [`tile_plane`], dropping the padding.
pub fn untile_plane(blocks: &[PixelBlock], w: usize, h: usize) -> Vec<f64> {
    let (bw, _) = block_grid(w, h);
    let mut plane = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = blocks[(y / 8) * bw + x / 8][(y % 8) * 8 + x % 8];
        }
    }
    plane
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct double-sum definition, independent of the separable path.
    fn naive_dct(p: &PixelBlock) -> [f64; 64] {
        let a = |k: usize| if k == 0 { (0.125f64).sqrt() } else { (0.25f64).sqrt() };
        let mut out = [0.0; 64];
        for v in 0..8 {
            for u in 0..8 {
                let mut acc = 0.0;
                for y in 0..8 {
                    for x in 0..8 {
                        acc += p[y * 8 + x]
                            * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos()
                            * ((2 * y + 1) as f64 * v as f64 * std::f64::consts::PI / 16.0).cos();
                    }
                }
                out[v * 8 + u] = a(u) * a(v) * acc;
            }
        }
        out
    }

    #[test]
    fn constant_block() {
        let c = 0.3;
        let d = dct8x8_forward(&[c; 64], false);
        assert!((d.dc() - 8.0 * c).abs() < 1e-12);
        assert!(d.ac().all(|a| a.abs() < 1e-12));
        assert_eq!(dct8x8_forward(&[0.0; 64], false), DctBlock::ZERO);
        assert!(dct8x8_inverse(&DctBlock::ZERO, false).iter().all(|&v| v == 0.0));
        let mut dc = [0.0; 64];
        dc[0] = 8.0 * c;
        assert!(dct8x8_inverse(&DctBlock(dc), false)
            .iter()
            .all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn centered_shift() {
        let d = dct8x8_forward(&[0.5; 64], true);
        assert!(d.0.iter().all(|v| v.abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn matches_naive_definition(p in proptest::array::uniform32(0.0f64..1.0)) {
            let mut block = [0.0; 64];
            for i in 0..64 { block[i] = p[i % 32] * (1.0 + (i / 32) as f64 * 0.37); }
            let fast = dct8x8_forward(&block, false);
            let slow = naive_dct(&block);
            for i in 0..64 { prop_assert!((fast.0[i] - slow[i]).abs() < 1e-12); }
        }

        #[test]
        fn parseval_and_round_trip(seed in any::<u64>(), centered in any::<bool>()) {
            let mut s = seed;
            let mut block = [0.0; 64];
            for v in block.iter_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                *v = (s >> 11) as f64 / (1u64 << 53) as f64;
            }
            let d = dct8x8_forward(&block, centered);
            let shift = if centered { 0.5 } else { 0.0 };
            let pix: f64 = block.iter().map(|v| (v - shift) * (v - shift)).sum();
            prop_assert!((d.energy() - pix).abs() <= 1e-9);
            let back = dct8x8_inverse(&d, centered);
            for i in 0..64 { prop_assert!((back[i] - block[i]).abs() <= 1e-10); }
        }
    }

    #[test]
    fn tiling_round_trip_with_padding() {
        let (w, h) = (13, 9);
        let plane: Vec<f64> = (0..w * h).map(|i| i as f64).collect();
        let blocks = tile_plane(&plane, w, h);
        assert_eq!(blocks.len(), 4);
        // replicated edge
        assert_eq!(blocks[1][7], plane[w - 1]);
        assert_eq!(untile_plane(&blocks, w, h), plane);
    }
}
