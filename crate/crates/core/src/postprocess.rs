//! Image postprocessing attacks: additive Gaussian noise, Gaussian blur,
//! JPEG-like block quantization, and their combination.
//!
//! All transforms are deterministic given `(spec, rng_seed)` and clamp the
//! result back into the pixel range.

use thiserror::Error;

use crate::dct::{dct8_basis, forward8x8, inverse8x8, BLOCK};
use crate::latent_model::{ImageGrid, Provenance};
use crate::linalg::Mat;
use crate::rng::{standard_normal, substream, uniform01};
use crate::scalar::Scalar;
use rand::Rng;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("jpeg quality {0} outside [1, 100]")]
    BadQuality(u8),
    #[error("blur kernel size {0} must be at least 1")]
    BadKernelSize(usize),
    #[error("blur sigma must be positive, got {0}")]
    BadBlurSigma(f64),
    #[error("noise sigma must be nonnegative, got {0}")]
    BadNoiseSigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Identity,
    Noising,
    Blurring,
    Jpeg,
    Combo,
}

impl AttackKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Noising => "noising",
            Self::Blurring => "blurring",
            Self::Jpeg => "jpeg",
            Self::Combo => "combo",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "identity" => Some(Self::Identity),
            "noising" => Some(Self::Noising),
            "blurring" => Some(Self::Blurring),
            "jpeg" => Some(Self::Jpeg),
            "combo" => Some(Self::Combo),
            _ => None,
        }
    }
}

/// One attack configuration. `kind` determines which parameter fields are
/// read; `rng_seed` records the seed the parameters were sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessSpec<T> {
    pub kind: AttackKind,
    pub noise_sigma: T,
    pub blur_kernel_size: usize,
    pub blur_sigma: T,
    pub jpeg_quality: u8,
    /// Per-attack inclusion probability in combo mode; `>= 1` includes all
    /// three deterministically.
    pub combo_include_prob: T,
    pub rng_seed: u64,
}

impl<T: Scalar> PostprocessSpec<T> {
    pub fn identity() -> Self {
        Self {
            kind: AttackKind::Identity,
            noise_sigma: T::zero(),
            blur_kernel_size: 3,
            blur_sigma: T::c(0.5),
            jpeg_quality: 100,
            combo_include_prob: T::zero(),
            rng_seed: 0,
        }
    }

    /// Compact descriptor used in config files and CSV (comma-free).
    pub fn describe(&self) -> String {
        match self.kind {
            AttackKind::Identity => "identity".to_string(),
            AttackKind::Noising => format!("noising(s={})", self.noise_sigma),
            AttackKind::Blurring => {
                format!("blurring(k={}x{})", self.blur_kernel_size, self.blur_sigma)
            }
            AttackKind::Jpeg => format!("jpeg(q={})", self.jpeg_quality),
            AttackKind::Combo => format!(
                "combo(k={}x{};s={};q={};p={})",
                self.blur_kernel_size,
                self.blur_sigma,
                self.noise_sigma,
                self.jpeg_quality,
                self.combo_include_prob
            ),
        }
    }
}

const BLUR_SIZES: [usize; 5] = [3, 7, 9, 16, 25];
const BLUR_SIGMAS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
const JPEG_QUALITIES: [u8; 4] = [80, 70, 60, 50];
const NOISE_SIGMA_MAX: f64 = 0.1;

/// Draw attack parameters from their production ranges.
pub fn sample_attack<T: Scalar>(kind: AttackKind, rng_seed: u64) -> PostprocessSpec<T> {
    let mut rng = substream(rng_seed, 0);
    let mut spec = PostprocessSpec::identity();
    spec.kind = kind;
    spec.rng_seed = rng_seed;
    match kind {
        AttackKind::Identity => {}
        AttackKind::Noising => {
            spec.noise_sigma = uniform01::<T, _>(&mut rng) * T::c(NOISE_SIGMA_MAX);
        }
        AttackKind::Blurring => {
            spec.blur_kernel_size = BLUR_SIZES[rng.random_range(0..BLUR_SIZES.len())];
            spec.blur_sigma = T::c(BLUR_SIGMAS[rng.random_range(0..BLUR_SIGMAS.len())]);
        }
        AttackKind::Jpeg => {
            spec.jpeg_quality = JPEG_QUALITIES[rng.random_range(0..JPEG_QUALITIES.len())];
        }
        AttackKind::Combo => {
            spec.blur_kernel_size = BLUR_SIZES[rng.random_range(0..BLUR_SIZES.len())];
            spec.blur_sigma = T::c(BLUR_SIGMAS[rng.random_range(0..BLUR_SIGMAS.len())]);
            spec.noise_sigma = uniform01::<T, _>(&mut rng) * T::c(NOISE_SIGMA_MAX);
            spec.jpeg_quality = JPEG_QUALITIES[rng.random_range(0..JPEG_QUALITIES.len())];
            spec.combo_include_prob = T::c(0.5);
        }
    }
    spec
}

/// Deterministic maximum-strength parameters for each attack.
pub fn strongest<T: Scalar>(kind: AttackKind) -> PostprocessSpec<T> {
    let mut spec = PostprocessSpec::identity();
    spec.kind = kind;
    match kind {
        AttackKind::Identity => {}
        AttackKind::Noising => spec.noise_sigma = T::c(NOISE_SIGMA_MAX),
        AttackKind::Blurring => {
            spec.blur_kernel_size = 25;
            spec.blur_sigma = T::c(2.0);
        }
        AttackKind::Jpeg => spec.jpeg_quality = 50,
        AttackKind::Combo => {
            spec.blur_kernel_size = 25;
            spec.blur_sigma = T::c(2.0);
            spec.noise_sigma = T::c(NOISE_SIGMA_MAX);
            spec.jpeg_quality = 50;
            spec.combo_include_prob = T::one();
        }
    }
    spec
}

/// Apply the attack; deterministic given `(spec, rng_seed)`. Combo applies
/// included sub-attacks in the fixed worst-case order blur -> noise -> jpeg.
pub fn apply<T: Scalar>(
    spec: &PostprocessSpec<T>,
    img: &ImageGrid<T>,
    output_range: (T, T),
    rng_seed: u64,
) -> Result<ImageGrid<T>, PostprocessError> {
    validate(spec)?;
    let mut out = img.clone();
    match spec.kind {
        AttackKind::Identity => {}
        AttackKind::Noising => add_noise(&mut out, spec.noise_sigma, output_range, rng_seed),
        AttackKind::Blurring => blur(&mut out, spec.blur_kernel_size, spec.blur_sigma),
        AttackKind::Jpeg => jpeg_like(&mut out, spec.jpeg_quality, output_range),
        AttackKind::Combo => {
            let (use_blur, use_noise, use_jpeg) = combo_inclusion(spec, rng_seed);
            if use_blur {
                blur(&mut out, spec.blur_kernel_size, spec.blur_sigma);
            }
            if use_noise {
                add_noise(&mut out, spec.noise_sigma, output_range, rng_seed);
            }
            if use_jpeg {
                jpeg_like(&mut out, spec.jpeg_quality, output_range);
            }
        }
    }
    out.provenance = Provenance::Postprocessed;
    Ok(out)
}

fn validate<T: Scalar>(spec: &PostprocessSpec<T>) -> Result<(), PostprocessError> {
    match spec.kind {
        AttackKind::Identity => Ok(()),
        AttackKind::Noising => check_noise(spec),
        AttackKind::Blurring => check_blur(spec),
        AttackKind::Jpeg => check_quality(spec),
        AttackKind::Combo => {
            check_blur(spec)?;
            check_noise(spec)?;
            check_quality(spec)
        }
    }
}

fn check_noise<T: Scalar>(spec: &PostprocessSpec<T>) -> Result<(), PostprocessError> {
    if spec.noise_sigma < T::zero() {
        return Err(PostprocessError::BadNoiseSigma(spec.noise_sigma.to_f64_lossy()));
    }
    Ok(())
}

fn check_blur<T: Scalar>(spec: &PostprocessSpec<T>) -> Result<(), PostprocessError> {
    if spec.blur_kernel_size == 0 {
        return Err(PostprocessError::BadKernelSize(spec.blur_kernel_size));
    }
    if !(spec.blur_sigma > T::zero()) {
        return Err(PostprocessError::BadBlurSigma(spec.blur_sigma.to_f64_lossy()));
    }
    Ok(())
}

fn check_quality<T: Scalar>(spec: &PostprocessSpec<T>) -> Result<(), PostprocessError> {
    if spec.jpeg_quality == 0 || spec.jpeg_quality > 100 {
        return Err(PostprocessError::BadQuality(spec.jpeg_quality));
    }
    Ok(())
}

/// Inclusion flags for combo; the all-excluded draw is resampled.
fn combo_inclusion<T: Scalar>(spec: &PostprocessSpec<T>, rng_seed: u64) -> (bool, bool, bool) {
    if spec.combo_include_prob >= T::one() {
        return (true, true, true);
    }
    let mut rng = substream(rng_seed, 7);
    loop {
        let flags = (
            uniform01::<T, _>(&mut rng) < spec.combo_include_prob,
            uniform01::<T, _>(&mut rng) < spec.combo_include_prob,
            uniform01::<T, _>(&mut rng) < spec.combo_include_prob,
        );
        if flags.0 || flags.1 || flags.2 {
            return flags;
        }
    }
}

fn clamp_range<T: Scalar>(v: T, (lo, hi): (T, T)) -> T {
    v.max(lo).min(hi)
}

fn add_noise<T: Scalar>(img: &mut ImageGrid<T>, sigma: T, range: (T, T), rng_seed: u64) {
    if sigma == T::zero() {
        return;
    }
    let mut rng = substream(rng_seed, 0);
    for p in img.pixels.iter_mut() {
        *p = clamp_range(*p + sigma * standard_normal::<T, _>(&mut rng), range);
    }
}

/// Gaussian taps at integer offsets. Odd sizes are centered; an even size
/// `s` takes the symmetric `s+1`-tap kernel and drops the rightmost tap
/// (left-biased truncation), then renormalizes to sum 1.
fn gaussian_taps<T: Scalar>(size: usize, sigma: T) -> (Vec<T>, isize) {
    let (first, last): (isize, isize) = if size % 2 == 1 {
        let h = (size as isize - 1) / 2;
        (-h, h)
    } else {
        let h = size as isize / 2;
        (-h, h - 1)
    };
    let s2 = sigma * sigma * T::c(2.0);
    let mut taps: Vec<T> = (first..=last)
        .map(|k| (-(T::c(k as f64) * T::c(k as f64)) / s2).exp())
        .collect();
    let sum = taps.iter().fold(T::zero(), |a, &b| a + b);
    for t in taps.iter_mut() {
        *t = *t / sum;
    }
    (taps, first)
}

/// Mirror an index into `[0, n)` (edge-inclusive reflection).
fn reflect(mut idx: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if idx < 0 {
            idx = -idx - 1;
        } else if idx >= n {
            idx = 2 * n - 1 - idx;
        } else {
            return idx as usize;
        }
    }
}

fn blur<T: Scalar>(img: &mut ImageGrid<T>, size: usize, sigma: T) {
    let (taps, first) = gaussian_taps(size, sigma);
    let (h, w) = (img.height, img.width);
    let plane = h * w;
    let mut tmp = vec![T::zero(); plane];
    for c in 0..img.channels {
        let base = c * plane;
        // rows
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (k, &t) in taps.iter().enumerate() {
                    let sx = reflect(x as isize + first + k as isize, w);
                    acc = acc + t * img.pixels[base + y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // columns
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (k, &t) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + first + k as isize, h);
                    acc = acc + t * tmp[sy * w + x];
                }
                img.pixels[base + y * w + x] = acc;
            }
        }
    }
}

// Standard luminance quantization table (JPEG Annex K), applied channelwise.
#[rustfmt::skip]
const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Scaled quantization step for table entry `idx` at the given quality,
/// in DCT-coefficient units on the 0..255 pixel scale.
fn quant_step(idx: usize, quality: u8) -> f64 {
    let q = f64::from(quality);
    let scale = if quality < 50 { 5000.0 / q } else { 200.0 - 2.0 * q };
    ((f64::from(LUMA_TABLE[idx]) * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0)
}

/// Largest scaled quantization step at this quality, converted to pixel
/// units of the given output range. Bound used by the idempotence check.
pub fn max_quant_step<T: Scalar>(quality: u8, output_range: (T, T)) -> T {
    let max_step = (0..64).map(|i| quant_step(i, quality)).fold(0.0f64, f64::max);
    (output_range.1 - output_range.0) * T::c(max_step / 255.0)
}

fn jpeg_like<T: Scalar>(img: &mut ImageGrid<T>, quality: u8, range: (T, T)) {
    let basis = dct8_basis::<T>();
    let (lo, hi) = range;
    let width255 = T::c(255.0) / (hi - lo);
    let (h, w) = (img.height, img.width);
    let plane = h * w;
    let bh = h.div_ceil(BLOCK);
    let bw = w.div_ceil(BLOCK);
    let steps: Vec<T> = (0..64).map(|i| T::c(quant_step(i, quality))).collect();
    for c in 0..img.channels {
        let base = c * plane;
        for by in 0..bh {
            for bx in 0..bw {
                // Gather the block with edge replication, shifted to [-128, 127].
                let block = Mat::from_fn(BLOCK, BLOCK, |i, j| {
                    let y = (by * BLOCK + i).min(h - 1);
                    let x = (bx * BLOCK + j).min(w - 1);
                    (img.pixels[base + y * w + x] - lo) * width255 - T::c(128.0)
                });
                let mut coeffs = forward8x8(&basis, &block);
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let s = steps[u * BLOCK + v];
                        coeffs[(u, v)] = (coeffs[(u, v)] / s).round() * s;
                    }
                }
                let back = inverse8x8(&basis, &coeffs);
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        let y = by * BLOCK + i;
                        let x = bx * BLOCK + j;
                        if y < h && x < w {
                            let p = (back[(i, j)] + T::c(128.0)) / width255 + lo;
                            img.pixels[base + y * w + x] = clamp_range(p, range);
                        }
                    }
                }
            }
        }
    }
}
