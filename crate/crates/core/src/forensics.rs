//! Distribution-shift analyses: DCT AC statistics, radially averaged power
//! spectral density (RAPSD), luminance histograms with limited-range
//! detection, and mean residual power spectra.
//!
//! Dataset-level functions process samples with [`crate::par`] and combine
//! per-sample results in manifest order with a running mean, so `k` copies
//! of one image average to exactly that image's result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codecsim::{self, ChainSpec, CodecError, DctBlock};
use crate::data::{self, DataError, ImageBuffer, Manifest};
use crate::par;
use crate::pixelops::{self, Boundary};

#[derive(Debug, Error)]
pub enum ForensicsError {
    #[error("no input samples")]
    EmptyInput,
    #[error("image {width}x{height} is smaller than the 16x16 minimum")]
    ImageTooSmall { width: usize, height: usize },
    #[error("expected a 256-bin luminance histogram, got {0} bins")]
    WrongBinCount(usize),
    #[error("invalid histogram spec: {0}")]
    InvalidSpec(String),
    #[error("all {0} samples failed to load or process")]
    AllSamplesFailed(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Fixed-width histogram. Values outside the edges are counted in the first
/// or last bin, so `counts` always sums to `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn new(min: f64, max: f64, bins: usize) -> Result<Self, ForensicsError> {
        if bins == 0 || !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(ForensicsError::InvalidSpec(format!("{bins} bins over [{min}, {max}]")));
        }
        let width = (max - min) / bins as f64;
        let mut bin_edges: Vec<f64> = (0..=bins).map(|i| min + i as f64 * width).collect();
        bin_edges[bins] = max;
        Ok(Self {
            bin_edges,
            counts: vec![0; bins],
            total: 0,
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_index(&self, v: f64) -> usize {
        let n = self.bins();
        let (lo, hi) = (self.bin_edges[0], self.bin_edges[n]);
        let i = ((v - lo) / (hi - lo) * n as f64).floor();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(n - 1)
        }
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let i = self.bin_index(v);
        self.counts[i] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.bin_edges, other.bin_edges, "histogram edges differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Probability mass per bin.
    pub fn normalized(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Binning of pooled AC coefficients (8-bit scale) and the zero tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DctHistConfig {
    /// Bins cover `[-range, range]`.
    pub range: f64,
    /// Odd counts put one bin centered on zero.
    pub bins: usize,
    /// Coefficients with `|a| < zero_eps` count as zero.
    pub zero_eps: f64,
}

impl Default for DctHistConfig {
    fn default() -> Self {
        Self {
            range: 64.0,
            bins: 129,
            zero_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DctAcStats {
    pub histogram: Histogram,
    pub zero_fraction: f64,
}

/// Pools the AC coefficients of the given blocks.
pub fn dct_ac_histogram_blocks<'a, I>(blocks: I, cfg: &DctHistConfig) -> Result<DctAcStats, ForensicsError>
where
    I: IntoIterator<Item = &'a DctBlock>,
{
    let mut histogram = Histogram::new(-cfg.range, cfg.range, cfg.bins)?;
    let mut zeros = 0u64;
    for b in blocks {
        for a in b.ac() {
            histogram.add(a);
            if a.abs() < cfg.zero_eps {
                zeros += 1;
            }
        }
    }
    if histogram.total == 0 {
        return Err(ForensicsError::EmptyInput);
    }
    let zero_fraction = zeros as f64 / histogram.total as f64;
    Ok(DctAcStats {
        histogram,
        zero_fraction,
    })
}

/// Luma 8×8 block DCT (centered, 8-bit scale) of every image, with all AC
/// coefficients pooled into one histogram.
pub fn dct_ac_histogram(images: &[ImageBuffer], cfg: &DctHistConfig) -> Result<DctAcStats, ForensicsError> {
    if images.is_empty() {
        return Err(ForensicsError::EmptyInput);
    }
    let per_image = par::map(images, |img| {
        let luma = pixelops::to_luma(img);
        codecsim::transform_image(&luma).planes.swap_remove(0)
    });
    dct_ac_histogram_blocks(per_image.iter().flatten(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    None,
    Hann,
}

/// Mean power per radial frequency bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    /// Bin centers in cycles/pixel, within `(0, 0.5]`.
    pub radii: Vec<f64>,
    pub power: Vec<f64>,
    pub counts: Vec<u64>,
}

impl RadialProfile {
    pub fn nbins(&self) -> usize {
        self.power.len()
    }

    /// Mean of `power` over bins `[lo, hi)`.
    pub fn band_mean(&self, lo: usize, hi: usize) -> f64 {
        let hi = hi.min(self.nbins());
        if hi <= lo {
            return 0.0;
        }
        self.power[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
    }

    /// Mean power in the lower, middle and upper thirds of the bins.
    pub fn band_thirds(&self) -> [f64; 3] {
        let n = self.nbins();
        let (a, b) = (n / 3, n - n / 3);
        [self.band_mean(0, a), self.band_mean(a, b), self.band_mean(b, n)]
    }

    /// Mean power in the top third of radial bins.
    pub fn high_band_power(&self) -> f64 {
        self.band_thirds()[2]
    }
}

pub(crate) fn fft2d(data: &[f64], w: usize, h: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf
}

#[inline]
fn signed_freq(k: usize, n: usize) -> f64 {
    let k = k as isize;
    let n = n as isize;
    (if k <= n / 2 { k } else { k - n }) as f64 / n as f64
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Radially averaged power spectrum of the luma plane.
///
/// The mean is subtracted, an optional 2-D Hann window applied, and the
/// power `|F|²/(W·H)` of every non-DC frequency with normalized radius
/// `r = √((fx/W)² + (fy/H)²) ≤ 0.5` is averaged into `nbins` equal-width
/// bins over `(0, 0.5]`. Corner frequencies beyond 0.5 are ignored.
pub fn rapsd(img: &ImageBuffer, window: Window, nbins: usize) -> Result<RadialProfile, ForensicsError> {
    let (w, h) = (img.width(), img.height());
    if w < 16 || h < 16 {
        return Err(ForensicsError::ImageTooSmall { width: w, height: h });
    }
    if nbins == 0 {
        return Err(ForensicsError::InvalidSpec("nbins must be positive".into()));
    }
    let luma = pixelops::to_luma(img);
    let mean = luma.mean();
    let mut data: Vec<f64> = luma.data().iter().map(|v| v - mean).collect();
    if window == Window::Hann {
        let (wx, wy) = (hann(w), hann(h));
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] *= wx[x] * wy[y];
            }
        }
    }
    let spec = fft2d(&data, w, h);
    let norm = (w * h) as f64;
    let mut sum = vec![0.0; nbins];
    let mut counts = vec![0u64; nbins];
    for ky in 0..h {
        let fy = signed_freq(ky, h);
        for kx in 0..w {
            if kx == 0 && ky == 0 {
                continue;
            }
            let fx = signed_freq(kx, w);
            let r = (fx * fx + fy * fy).sqrt();
            if r > 0.5 {
                continue;
            }
            let bin = ((r / 0.5 * nbins as f64).ceil() as usize).clamp(1, nbins) - 1;
            sum[bin] += spec[ky * w + kx].norm_sqr() / norm;
            counts[bin] += 1;
        }
    }
    let power = sum
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let radii = (0..nbins).map(|i| (i as f64 + 0.5) * 0.5 / nbins as f64).collect();
    Ok(RadialProfile { radii, power, counts })
}

/// Element-wise running mean; exact when all inputs are identical.
fn running_mean<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut iter = vectors.into_iter();
    let mut mean = iter.next()?.to_vec();
    for (k, v) in iter.enumerate() {
        let k = (k + 2) as f64;
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += (x - *m) / k;
        }
    }
    Some(mean)
}

/// Arithmetic mean of profiles with equal binning.
pub fn mean_profile(profiles: &[RadialProfile]) -> Result<RadialProfile, ForensicsError> {
    let first = profiles.first().ok_or(ForensicsError::EmptyInput)?;
    let power = running_mean(profiles.iter().map(|p| p.power.as_slice())).expect("non-empty");
    let mut counts = vec![0u64; first.nbins()];
    for p in profiles {
        for (c, &pc) in counts.iter_mut().zip(&p.counts) {
            *c += pc;
        }
    }
    Ok(RadialProfile {
        radii: first.radii.clone(),
        power,
        counts,
    })
}

/// Mean RAPSD of in-memory images.
pub fn mean_rapsd(images: &[ImageBuffer], window: Window, nbins: usize) -> Result<RadialProfile, ForensicsError> {
    if images.is_empty() {
        return Err(ForensicsError::EmptyInput);
    }
    let profiles = par::map(images, |img| rapsd(img, window, nbins));
    let profiles: Vec<RadialProfile> = profiles.into_iter().collect::<Result<_, _>>()?;
    mean_profile(&profiles)
}

/// A dataset-level result with the samples that could not be used.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetResult<T> {
    pub value: T,
    pub n_used: usize,
    pub failures: Vec<SampleFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

/// Options shared by manifest-driven analyses.
#[derive(Debug, Clone, Default)]
pub struct DatasetOptions {
    /// Use only the first `limit` records in manifest order.
    pub limit: Option<usize>,
    /// Applied to each image before analysis, with a per-sample generator
    /// seeded from `(seed, id)`.
    pub preprocessing: Option<ChainSpec>,
    pub seed: u64,
}

/// Loads (and optionally preprocesses) every selected record, in parallel.
pub fn load_dataset(manifest: &Manifest, opts: &DatasetOptions) -> Vec<(String, Result<ImageBuffer, String>)> {
    let n = opts.limit.unwrap_or(manifest.len()).min(manifest.len());
    let records = &manifest.records[..n];
    par::map(records, |r| {
        let loaded = data::load_image(manifest.resolve(r)).map_err(|e: DataError| e.to_string());
        let img = loaded.and_then(|img| match &opts.preprocessing {
            Some(chain) => {
                let mut rng = ChaCha8Rng::seed_from_u64(data::sample_seed(opts.seed, &r.id));
                codecsim::apply_chain(&img, chain, &mut rng).map_err(|e| e.to_string())
            }
            None => Ok(img),
        });
        (r.id.clone(), img)
    })
}

fn run_dataset<T, F>(manifest: &Manifest, opts: &DatasetOptions, per_image: F) -> (Vec<T>, Vec<SampleFailure>)
where
    T: Send,
    F: Fn(&ImageBuffer) -> Result<T, String> + Sync + Send,
{
    let loaded = load_dataset(manifest, opts);
    let results = par::map(&loaded, |(id, img)| {
        (id.clone(), img.as_ref().map_err(Clone::clone).and_then(&per_image))
    });
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => ok.push(v),
            Err(error) => failures.push(SampleFailure { id, error }),
        }
    }
    (ok, failures)
}

/// Mean RAPSD over a manifest. Per-sample failures are reported, and only
/// fatal when every sample fails.
pub fn dataset_mean_rapsd(
    manifest: &Manifest,
    opts: &DatasetOptions,
    window: Window,
    nbins: usize,
) -> Result<DatasetResult<RadialProfile>, ForensicsError> {
    let (profiles, failures) = run_dataset(manifest, opts, |img| {
        rapsd(img, window, nbins).map_err(|e| e.to_string())
    });
    if profiles.is_empty() {
        return Err(ForensicsError::AllSamplesFailed(failures.len()));
    }
    Ok(DatasetResult {
        value: mean_profile(&profiles)?,
        n_used: profiles.len(),
        failures,
    })
}

/// DCT AC statistics over a manifest.
pub fn dataset_dct_ac_histogram(
    manifest: &Manifest,
    opts: &DatasetOptions,
    cfg: &DctHistConfig,
) -> Result<DatasetResult<DctAcStats>, ForensicsError> {
    let (blocks, failures) = run_dataset(manifest, opts, |img| {
        Ok(codecsim::transform_image(&pixelops::to_luma(img)).planes.swap_remove(0))
    });
    if blocks.is_empty() {
        return Err(ForensicsError::AllSamplesFailed(failures.len()));
    }
    Ok(DatasetResult {
        value: dct_ac_histogram_blocks(blocks.iter().flatten(), cfg)?,
        n_used: blocks.len(),
        failures,
    })
}

/// 256-bin histogram of 8-bit luma codes pooled over all pixels.
pub fn luminance_histogram(images: &[ImageBuffer]) -> Result<Histogram, ForensicsError> {
    if images.is_empty() {
        return Err(ForensicsError::EmptyInput);
    }
    let parts = par::map(images, luma_codes_histogram);
    let mut hist = parts[0].clone();
    for h in &parts[1..] {
        hist.merge(h);
    }
    Ok(hist)
}

fn luma_codes_histogram(img: &ImageBuffer) -> Histogram {
    let mut hist = Histogram::new(0.0, 256.0, 256).expect("static spec");
    for &v in pixelops::to_luma(img).data() {
        hist.add((v.clamp(0.0, 1.0) * 255.0).round());
    }
    hist
}

pub fn dataset_luminance_histogram(
    manifest: &Manifest,
    opts: &DatasetOptions,
) -> Result<DatasetResult<Histogram>, ForensicsError> {
    let (parts, failures) = run_dataset(manifest, opts, |img| Ok(luma_codes_histogram(img)));
    let Some(first) = parts.first() else {
        return Err(ForensicsError::AllSamplesFailed(failures.len()));
    };
    let mut hist = first.clone();
    for h in &parts[1..] {
        hist.merge(h);
    }
    Ok(DatasetResult {
        value: hist,
        n_used: parts.len(),
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeClass {
    Full,
    Limited,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvRangeVerdict {
    pub class: RangeClass,
    /// Mass in codes `0..=15` and `236..=255`.
    pub tail_mass: f64,
    /// Isolated empty codes (both neighbours occupied) per code of occupied
    /// support. Integer rescaling of a dense histogram leaves such gaps at
    /// regular intervals.
    pub comb_score: f64,
}

/// Thresholds for [`detect_tv_range`].
pub const TAIL_MASS_FULL: f64 = 0.01;
pub const TAIL_MASS_LIMITED: f64 = 1e-4;
pub const COMB_THRESHOLD: f64 = 0.02;

/// Classifies a luma code histogram as full range, limited (TV) range, or
/// indeterminate.
///
/// A comb of isolated empty codes above [`COMB_THRESHOLD`] is taken as
/// evidence of a limited-range round trip; otherwise a tail mass above
/// [`TAIL_MASS_FULL`] means full range. Tail-free histograms without a comb
/// are indeterminate.
pub fn detect_tv_range(hist: &Histogram) -> Result<TvRangeVerdict, ForensicsError> {
    if hist.bins() != 256 {
        return Err(ForensicsError::WrongBinCount(hist.bins()));
    }
    if hist.total == 0 {
        return Err(ForensicsError::EmptyInput);
    }
    let c = &hist.counts;
    let tail: u64 = c[..16].iter().chain(&c[236..]).sum();
    let tail_mass = tail as f64 / hist.total as f64;
    let lo = c.iter().position(|&v| v > 0).expect("non-empty");
    let hi = c.iter().rposition(|&v| v > 0).expect("non-empty");
    let isolated = (lo + 1..hi)
        .filter(|&i| c[i] == 0 && c[i - 1] > 0 && c[i + 1] > 0)
        .count();
    let comb_score = isolated as f64 / (hi - lo + 1) as f64;
    let class = if comb_score > COMB_THRESHOLD {
        RangeClass::Limited
    } else if tail_mass > TAIL_MASS_FULL {
        RangeClass::Full
    } else {
        RangeClass::Indeterminate
    };
    Ok(TvRangeVerdict {
        class,
        tail_mass,
        comb_score,
    })
}

/// Log-scaled mean power spectrum with DC at `(size/2, size/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `log10(1 + mean power)`.
    pub values: Vec<f64>,
}

impl SpectrumImage {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Mean over bins whose centered radius (in cycles/pixel) lies in `[lo, hi)`.
    pub fn radial_band_mean(&self, lo: f64, hi: f64) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for y in 0..self.height {
            let fy = (y as f64 - (self.height / 2) as f64) / self.height as f64;
            for x in 0..self.width {
                let fx = (x as f64 - (self.width / 2) as f64) / self.width as f64;
                let r = (fx * fx + fy * fy).sqrt();
                if r >= lo && r < hi {
                    s += self.get(x, y);
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// Center crop (or zero-pad) a plane to `size × size`.
fn fit_center(plane: &[f64], w: usize, h: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let (ox, dx) = if w >= size {
        ((w - size) / 2, 0)
    } else {
        (0, (size - w) / 2)
    };
    let (oy, dy) = if h >= size {
        ((h - size) / 2, 0)
    } else {
        (0, (size - h) / 2)
    };
    for y in 0..size.min(h) {
        for x in 0..size.min(w) {
            out[(y + dy) * size + x + dx] = plane[(y + oy) * w + x + ox];
        }
    }
    out
}

/// Power spectrum `|FFT(r)|²` of the high-pass residual
/// `r = x − blur(x, σ)` of one image's luma, fitted to `size × size`.
pub fn residual_power(img: &ImageBuffer, sigma: f64, size: usize) -> Vec<f64> {
    let luma = pixelops::to_luma(img);
    let blurred = pixelops::gaussian_blur(&luma, sigma, Boundary::Reflect);
    let residual: Vec<f64> = luma.data().iter().zip(blurred.data()).map(|(a, b)| a - b).collect();
    let fitted = fit_center(&residual, luma.width(), luma.height(), size);
    fft2d(&fitted, size, size).iter().map(|c| c.norm_sqr()).collect()
}

fn spectrum_from_powers(powers: &[Vec<f64>], size: usize) -> SpectrumImage {
    let mean = running_mean(powers.iter().map(Vec::as_slice)).expect("non-empty");
    let half = size / 2;
    let mut values = vec![0.0; size * size];
    for ky in 0..size {
        for kx in 0..size {
            let (sx, sy) = ((kx + half) % size, (ky + half) % size);
            values[sy * size + sx] = (1.0 + mean[ky * size + kx]).log10();
        }
    }
    SpectrumImage {
        width: size,
        height: size,
        values,
    }
}

/// Mean residual spectrum of in-memory images.
pub fn residual_spectrum(images: &[ImageBuffer], sigma: f64, size: usize) -> Result<SpectrumImage, ForensicsError> {
    if images.is_empty() {
        return Err(ForensicsError::EmptyInput);
    }
    if size == 0 {
        return Err(ForensicsError::InvalidSpec("spectrum size must be positive".into()));
    }
    let powers = par::map(images, |img| residual_power(img, sigma, size));
    Ok(spectrum_from_powers(&powers, size))
}

pub fn dataset_residual_spectrum(
    manifest: &Manifest,
    opts: &DatasetOptions,
    sigma: f64,
    size: usize,
) -> Result<DatasetResult<SpectrumImage>, ForensicsError> {
    if size == 0 {
        return Err(ForensicsError::InvalidSpec("spectrum size must be positive".into()));
    }
    let (powers, failures) = run_dataset(manifest, opts, |img| Ok(residual_power(img, sigma, size)));
    if powers.is_empty() {
        return Err(ForensicsError::AllSamplesFailed(failures.len()));
    }
    Ok(DatasetResult {
        value: spectrum_from_powers(&powers, size),
        n_used: powers.len(),
        failures,
    })
}
