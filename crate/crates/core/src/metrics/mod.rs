//! Distance and quality metrics: squared-l2 pixel distance, a weighted
//! feature-space metric (optionally over blockwise DCT coefficients), SSIM,
//! and a Fréchet distance between Gaussian fits of feature populations.

mod frechet;
mod robust;
mod ssim;

pub use frechet::{frechet_gaussian, FeatureMap};
pub use robust::{train_robust_metric, RobustTraining, TrainedMetric};
pub use ssim::ssim;

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::dct::{dct8_basis, forward8x8, inverse8x8, BLOCK};
use crate::latent_model::ImageGrid;
use crate::linalg::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image shapes differ")]
    ShapeMismatch,
    #[error("weights length {got} does not match feature count {expected}")]
    WeightsLength { expected: usize, got: usize },
    #[error("weights must be nonnegative and not all zero")]
    BadWeights,
    #[error("blockwise metric requires image sides divisible by {BLOCK}")]
    NotBlockAligned,
    #[error("image {h}x{w} is smaller than the {win}x{win} window")]
    ImageTooSmall { h: usize, w: usize, win: usize },
    #[error("need at least dim+1 = {required} samples, got {got}")]
    TooFewSamples { required: usize, got: usize },
    #[error("metric weights file malformed: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feature space for the weighted metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureTransform {
    /// Features are raw pixels; one weight per pixel.
    Identity,
    /// Features are 8x8 blockwise DCT coefficients; one weight per
    /// within-block frequency index (64), shared across blocks and channels.
    BlockDct,
}

impl FeatureTransform {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::BlockDct => "blockwise-dct",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "identity" => Some(Self::Identity),
            "blockwise-dct" => Some(Self::BlockDct),
            _ => None,
        }
    }
}

/// Differentiable image distance.
#[derive(Debug, Clone)]
pub enum MetricHandle<T> {
    /// Squared l2 over pixels.
    L2,
    /// `sum_f w_f (F(a)_f - F(b)_f)^2` for nonnegative per-feature weights.
    Weighted { weights: Vec<T>, transform: FeatureTransform },
}

impl<T: Scalar> MetricHandle<T> {
    pub fn weighted(weights: Vec<T>, transform: FeatureTransform) -> Result<Self, MetricError> {
        if weights.iter().any(|&w| w < T::zero()) || weights.iter().all(|&w| w == T::zero()) {
            return Err(MetricError::BadWeights);
        }
        if transform == FeatureTransform::BlockDct && weights.len() != BLOCK * BLOCK {
            return Err(MetricError::WeightsLength { expected: BLOCK * BLOCK, got: weights.len() });
        }
        Ok(Self::Weighted { weights, transform })
    }

    pub fn describe(&self) -> String {
        match self {
            Self::L2 => "l2".to_string(),
            Self::Weighted { transform, .. } => format!("weighted({})", transform.tag()),
        }
    }

    /// Distance value and gradient with respect to the pixels of `a`.
    pub fn distance(&self, a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<(T, Vec<T>), MetricError> {
        if !a.same_shape(b) {
            return Err(MetricError::ShapeMismatch);
        }
        match self {
            Self::L2 => {
                let mut value = T::zero();
                let mut grad = vec![T::zero(); a.pixels.len()];
                for (g, (&x, &y)) in grad.iter_mut().zip(a.pixels.iter().zip(&b.pixels)) {
                    let d = x - y;
                    value = value + d * d;
                    *g = d + d;
                }
                Ok((value, grad))
            }
            Self::Weighted { weights, transform: FeatureTransform::Identity } => {
                if weights.len() != a.pixels.len() {
                    return Err(MetricError::WeightsLength {
                        expected: a.pixels.len(),
                        got: weights.len(),
                    });
                }
                let mut value = T::zero();
                let mut grad = vec![T::zero(); a.pixels.len()];
                for i in 0..a.pixels.len() {
                    let d = a.pixels[i] - b.pixels[i];
                    value = value + weights[i] * d * d;
                    grad[i] = T::c(2.0) * weights[i] * d;
                }
                Ok((value, grad))
            }
            Self::Weighted { weights, transform: FeatureTransform::BlockDct } => {
                block_dct_distance(weights, a, b)
            }
        }
    }

    /// Distance only.
    pub fn value(&self, a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<T, MetricError> {
        self.distance(a, b).map(|(v, _)| v)
    }

    /// Residual vector `r` with `distance = ‖r‖²`; least-squares view used
    /// by the decoder.
    pub fn residuals(&self, a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<Vec<T>, MetricError> {
        if !a.same_shape(b) {
            return Err(MetricError::ShapeMismatch);
        }
        match self {
            Self::L2 => Ok(a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| x - y).collect()),
            Self::Weighted { weights, transform: FeatureTransform::Identity } => {
                if weights.len() != a.pixels.len() {
                    return Err(MetricError::WeightsLength {
                        expected: a.pixels.len(),
                        got: weights.len(),
                    });
                }
                Ok(a.pixels
                    .iter()
                    .zip(&b.pixels)
                    .zip(weights)
                    .map(|((&x, &y), &w)| w.sqrt() * (x - y))
                    .collect())
            }
            Self::Weighted { weights, transform: FeatureTransform::BlockDct } => {
                let diff = ImageGrid {
                    channels: a.channels,
                    height: a.height,
                    width: a.width,
                    pixels: a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| x - y).collect(),
                    provenance: a.provenance,
                };
                weighted_block_dct_vector(weights, &diff)
            }
        }
    }

    /// Map a pixel-space tangent (one Jacobian column) into residual space.
    pub fn residual_tangent(
        &self,
        shape: &ImageGrid<T>,
        pixel_tangent: &[T],
    ) -> Result<Vec<T>, MetricError> {
        match self {
            Self::L2 => Ok(pixel_tangent.to_vec()),
            Self::Weighted { weights, transform: FeatureTransform::Identity } => Ok(pixel_tangent
                .iter()
                .zip(weights)
                .map(|(&t, &w)| w.sqrt() * t)
                .collect()),
            Self::Weighted { weights, transform: FeatureTransform::BlockDct } => {
                let img = ImageGrid {
                    channels: shape.channels,
                    height: shape.height,
                    width: shape.width,
                    pixels: pixel_tangent.to_vec(),
                    provenance: shape.provenance,
                };
                weighted_block_dct_vector(weights, &img)
            }
        }
    }
}

/// Flatten `sqrt(w_f) * C_f(img)` over blocks and channels.
fn weighted_block_dct_vector<T: Scalar>(
    weights: &[T],
    img: &ImageGrid<T>,
) -> Result<Vec<T>, MetricError> {
    if img.height % BLOCK != 0 || img.width % BLOCK != 0 {
        return Err(MetricError::NotBlockAligned);
    }
    let basis = dct8_basis::<T>();
    let (h, w) = (img.height, img.width);
    let plane = h * w;
    let mut out = Vec::with_capacity(img.pixels.len());
    for c in 0..img.channels {
        let base = c * plane;
        for by in 0..h / BLOCK {
            for bx in 0..w / BLOCK {
                let block = Mat::from_fn(BLOCK, BLOCK, |i, j| {
                    img.pixels[base + (by * BLOCK + i) * w + bx * BLOCK + j]
                });
                let coeffs = forward8x8(&basis, &block);
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        out.push(weights[u * BLOCK + v].sqrt() * coeffs[(u, v)]);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn block_dct_distance<T: Scalar>(
    weights: &[T],
    a: &ImageGrid<T>,
    b: &ImageGrid<T>,
) -> Result<(T, Vec<T>), MetricError> {
    if a.height % BLOCK != 0 || a.width % BLOCK != 0 {
        return Err(MetricError::NotBlockAligned);
    }
    let basis = dct8_basis::<T>();
    let (h, w) = (a.height, a.width);
    let plane = h * w;
    let mut value = T::zero();
    let mut grad = vec![T::zero(); a.pixels.len()];
    let two = T::c(2.0);
    for c in 0..a.channels {
        let base = c * plane;
        for by in 0..h / BLOCK {
            for bx in 0..w / BLOCK {
                let diff = Mat::from_fn(BLOCK, BLOCK, |i, j| {
                    let idx = base + (by * BLOCK + i) * w + bx * BLOCK + j;
                    a.pixels[idx] - b.pixels[idx]
                });
                let coeffs = forward8x8(&basis, &diff);
                let mut weighted = Mat::zeros(BLOCK, BLOCK);
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let wf = weights[u * BLOCK + v];
                        let cuv = coeffs[(u, v)];
                        value = value + wf * cuv * cuv;
                        weighted[(u, v)] = two * wf * cuv;
                    }
                }
                let g_block = inverse8x8(&basis, &weighted);
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        grad[base + (by * BLOCK + i) * w + bx * BLOCK + j] = g_block[(i, j)];
                    }
                }
            }
        }
    }
    Ok((value, grad))
}

/// Per-frequency squared DCT-coefficient energies of `a - b`, summed over
/// blocks and channels. Feature vector for robust-metric training.
pub fn block_dct_energy<T: Scalar>(
    a: &ImageGrid<T>,
    b: &ImageGrid<T>,
) -> Result<Vec<T>, MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::ShapeMismatch);
    }
    if a.height % BLOCK != 0 || a.width % BLOCK != 0 {
        return Err(MetricError::NotBlockAligned);
    }
    let basis = dct8_basis::<T>();
    let (h, w) = (a.height, a.width);
    let plane = h * w;
    let mut energy = vec![T::zero(); BLOCK * BLOCK];
    for c in 0..a.channels {
        let base = c * plane;
        for by in 0..h / BLOCK {
            for bx in 0..w / BLOCK {
                let diff = Mat::from_fn(BLOCK, BLOCK, |i, j| {
                    let idx = base + (by * BLOCK + i) * w + bx * BLOCK + j;
                    a.pixels[idx] - b.pixels[idx]
                });
                let coeffs = forward8x8(&basis, &diff);
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let cuv = coeffs[(u, v)];
                        energy[u * BLOCK + v] = energy[u * BLOCK + v] + cuv * cuv;
                    }
                }
            }
        }
    }
    Ok(energy)
}

/// Mean weight over frequency indices with `min_sum <= u+v <= max_sum`.
pub fn frequency_band_mean<T: Scalar>(weights: &[T], min_sum: usize, max_sum: usize) -> T {
    let mut total = T::zero();
    let mut count = 0usize;
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            if (min_sum..=max_sum).contains(&(u + v)) {
                total = total + weights[u * BLOCK + v];
                count += 1;
            }
        }
    }
    total / T::from_usize_lossy(count.max(1))
}

/// Persist trained metric weights: header lines then one weight per line.
pub fn save_metric_weights<T: Scalar>(
    path: &Path,
    handle: &MetricHandle<T>,
    attack_description: &str,
) -> Result<(), MetricError> {
    let MetricHandle::Weighted { weights, transform } = handle else {
        return Err(MetricError::BadWeights);
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "feature_transform={}", transform.tag())?;
    writeln!(f, "block={BLOCK}")?;
    writeln!(f, "attacks={attack_description}")?;
    for w in weights {
        writeln!(f, "{w}")?;
    }
    Ok(())
}

pub fn load_metric_weights<T: Scalar>(path: &Path) -> Result<MetricHandle<T>, MetricError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut transform = None;
    let mut weights = Vec::new();
    for line in f.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(tag) = line.strip_prefix("feature_transform=") {
            transform = Some(
                FeatureTransform::parse(tag)
                    .ok_or_else(|| MetricError::Parse(format!("unknown transform `{tag}`")))?,
            );
        } else if line.starts_with("block=") || line.starts_with("attacks=") {
            continue;
        } else {
            let w = line
                .parse::<f64>()
                .map_err(|e| MetricError::Parse(format!("bad weight `{line}`: {e}")))?;
            weights.push(T::c(w));
        }
    }
    let transform = transform.ok_or_else(|| MetricError::Parse("missing feature_transform".into()))?;
    MetricHandle::weighted(weights, transform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_model::{build_generator, GeneratorSpec, Provenance};
    use crate::rng::{normal_vec, substream};

    fn image_pair() -> (ImageGrid<f64>, ImageGrid<f64>) {
        let g = build_generator(&GeneratorSpec::default_desk_scale(1)).unwrap();
        let mk = |seed| {
            let z = normal_vec::<f64, _>(&mut substream(seed, 0), 32);
            g.evaluate(&g.map_latent(&z).unwrap().w).unwrap()
        };
        (mk(1), mk(2))
    }

    #[test]
    fn l2_matches_definition_and_is_symmetric() {
        let (a, b) = image_pair();
        let m = MetricHandle::L2;
        let (v, _) = m.distance(&a, &b).unwrap();
        let expected: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((v - expected).abs() < 1e-12);
        assert!((m.value(&b, &a).unwrap() - v).abs() < 1e-12);
        assert_eq!(m.value(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn uniform_weights_reduce_to_l2() {
        let (a, b) = image_pair();
        let l2 = MetricHandle::L2.value(&a, &b).unwrap();
        let ident = MetricHandle::weighted(vec![1.0; 256], FeatureTransform::Identity).unwrap();
        assert!((ident.value(&a, &b).unwrap() - l2).abs() < 1e-12);
        // Blockwise DCT is orthonormal per block, so uniform weights also
        // reproduce l2.
        let dct = MetricHandle::weighted(vec![1.0; 64], FeatureTransform::BlockDct).unwrap();
        assert!((dct.value(&a, &b).unwrap() - l2).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (a, b) = image_pair();
        let mut weights = vec![0.0f64; 64];
        for (i, w) in weights.iter_mut().enumerate() {
            *w = 0.2 + (i % 7) as f64 * 0.3;
        }
        for metric in [
            MetricHandle::L2,
            MetricHandle::weighted(weights, FeatureTransform::BlockDct).unwrap(),
        ] {
            let (_, grad) = metric.distance(&a, &b).unwrap();
            let eps = 1e-6;
            for idx in [0usize, 17, 99, 255] {
                let mut ap = a.clone();
                ap.pixels[idx] += eps;
                let mut am = a.clone();
                am.pixels[idx] -= eps;
                let fd =
                    (metric.value(&ap, &b).unwrap() - metric.value(&am, &b).unwrap()) / (2.0 * eps);
                let rel = (grad[idx] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel <= 1e-4, "{}: pixel {idx} rel {rel}", metric.describe());
            }
        }
    }

    #[test]
    fn weight_validation() {
        assert!(MetricHandle::weighted(vec![-1.0, 1.0], FeatureTransform::Identity).is_err());
        assert!(MetricHandle::weighted(vec![0.0, 0.0], FeatureTransform::Identity).is_err());
        assert!(MetricHandle::weighted(vec![1.0; 63], FeatureTransform::BlockDct).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (a, _) = image_pair();
        let small = ImageGrid {
            channels: 1,
            height: 8,
            width: 8,
            pixels: vec![0.0; 64],
            provenance: Provenance::Generated,
        };
        assert!(matches!(
            MetricHandle::L2.distance(&a, &small),
            Err(MetricError::ShapeMismatch)
        ));
    }

    #[test]
    fn weights_file_round_trips() {
        let weights: Vec<f64> = (0..64).map(|i| 0.1 + i as f64 * 0.01).collect();
        let handle = MetricHandle::weighted(weights.clone(), FeatureTransform::BlockDct).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.txt");
        save_metric_weights(&path, &handle, "noising(s=0.1)").unwrap();
        let loaded = load_metric_weights::<f64>(&path).unwrap();
        match loaded {
            MetricHandle::Weighted { weights: w, transform } => {
                assert_eq!(transform, FeatureTransform::BlockDct);
                assert_eq!(w, weights);
            }
            MetricHandle::L2 => panic!("expected weighted"),
        }
    }

    #[test]
    fn residual_norm_equals_distance() {
        let (a, b) = image_pair();
        let mut weights = vec![0.0f64; 64];
        for (i, w) in weights.iter_mut().enumerate() {
            *w = 0.1 + (i % 5) as f64 * 0.4;
        }
        for metric in [
            MetricHandle::L2,
            MetricHandle::weighted(vec![0.7; 256], FeatureTransform::Identity).unwrap(),
            MetricHandle::weighted(weights, FeatureTransform::BlockDct).unwrap(),
        ] {
            let value = metric.value(&a, &b).unwrap();
            let r = metric.residuals(&a, &b).unwrap();
            let norm2: f64 = r.iter().map(|x| x * x).sum();
            assert!(
                (value - norm2).abs() <= 1e-10 * value.max(1.0),
                "{}: {value} vs {norm2}",
                metric.describe()
            );
            // The residual map is linear in the first image.
            let tangent: Vec<f64> = (0..256).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect();
            let mut shifted = a.clone();
            for (p, t) in shifted.pixels.iter_mut().zip(&tangent) {
                *p += *t;
            }
            let r_shifted = metric.residuals(&shifted, &b).unwrap();
            let jt = metric.residual_tangent(&a, &tangent).unwrap();
            for k in 0..r.len() {
                assert!((r_shifted[k] - r[k] - jt[k]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn band_mean_partitions_frequencies() {
        let mut weights = vec![0.0f64; 64];
        weights[0] = 8.0; // u+v = 0
        let low = frequency_band_mean(&weights, 0, 2);
        assert!(low > 0.0);
        assert_eq!(frequency_band_mean(&weights, 10, 14), 0.0);
    }
}
