//! Fréchet distance between Gaussian fits of two feature populations.

use crate::latent_model::ImageGrid;
use crate::linalg::{sqrtm_psd, sym_eigen, KahanVec, Mat};
use crate::metrics::MetricError;
use crate::rng::{standard_normal, substream};
use crate::scalar::Scalar;

/// Feature map applied to images before fitting: identity on pixels for
/// small images, a fixed seeded random projection otherwise.
#[derive(Debug, Clone)]
pub enum FeatureMap<T> {
    Identity,
    Projection(Mat<T>),
}

/// Pixel-count threshold above which images are projected down.
const IDENTITY_LIMIT: usize = 1024;
const PROJECTED_DIM: usize = 256;

impl<T: Scalar> FeatureMap<T> {
    pub fn for_dim(d_x: usize, seed: u64) -> Self {
        if d_x <= IDENTITY_LIMIT {
            return Self::Identity;
        }
        let mut rng = substream(seed, 0);
        let scale = T::c(1.0 / (PROJECTED_DIM as f64).sqrt());
        Self::Projection(Mat::from_fn(PROJECTED_DIM, d_x, |_, _| {
            standard_normal::<T, _>(&mut rng) * scale
        }))
    }

    pub fn out_dim(&self, d_x: usize) -> usize {
        match self {
            Self::Identity => d_x,
            Self::Projection(p) => p.rows(),
        }
    }

    pub fn apply(&self, img: &ImageGrid<T>) -> Vec<T> {
        match self {
            Self::Identity => img.pixels.clone(),
            Self::Projection(p) => p.matvec(&img.pixels),
        }
    }

    /// Map a batch of images into a samples-by-features matrix.
    pub fn apply_batch(&self, images: &[ImageGrid<T>]) -> Mat<T> {
        Mat::from_rows(images.iter().map(|img| self.apply(img)).collect())
    }
}

fn fit_gaussian<T: Scalar>(samples: &Mat<T>) -> (Vec<T>, Mat<T>) {
    let n = samples.rows();
    let d = samples.cols();
    let mut mean_acc = KahanVec::new(d);
    for i in 0..n {
        mean_acc.add(samples.row(i));
    }
    let mean = mean_acc.scaled(T::one() / T::from_usize_lossy(n));
    let mut cov_acc = KahanVec::new(d * d);
    let mut centered = vec![T::zero(); d];
    for i in 0..n {
        for (c, (&s, &m)) in centered.iter_mut().zip(samples.row(i).iter().zip(&mean)) {
            *c = s - m;
        }
        cov_acc.add_outer(&centered, &centered);
    }
    let cov = cov_acc.into_mat(d, d, T::one() / T::from_usize_lossy(n - 1)).symmetrize();
    (mean, cov)
}

/// `‖mu_a - mu_b‖² + tr(S_a + S_b - 2 (S_a S_b)^{1/2})` over Gaussian fits.
///
/// The cross square root is realized as the symmetric PSD matrix
/// `sqrt(S_a) S_b sqrt(S_a)`; roundoff-negative eigenvalues are clamped.
pub fn frechet_gaussian<T: Scalar>(
    samples_a: &Mat<T>,
    samples_b: &Mat<T>,
) -> Result<T, MetricError> {
    let d = samples_a.cols();
    if samples_b.cols() != d {
        return Err(MetricError::ShapeMismatch);
    }
    for s in [samples_a, samples_b] {
        if s.rows() < d + 1 {
            return Err(MetricError::TooFewSamples { required: d + 1, got: s.rows() });
        }
    }
    let (mu_a, cov_a) = fit_gaussian(samples_a);
    let (mu_b, cov_b) = fit_gaussian(samples_b);
    let mean_term = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .fold(T::zero(), |acc, v| acc + v);
    let sqrt_a = sqrtm_psd(&cov_a).map_err(|_| MetricError::ShapeMismatch)?;
    let product = sqrt_a.matmul(&cov_b).matmul(&sqrt_a).symmetrize();
    let eig = sym_eigen(&product).map_err(|_| MetricError::ShapeMismatch)?;
    let tr_sqrt = eig
        .values
        .iter()
        .map(|&l| l.max(T::zero()).sqrt())
        .fold(T::zero(), |acc, v| acc + v);
    let value = mean_term + cov_a.trace() + cov_b.trace() - T::c(2.0) * tr_sqrt;
    // Exact value is nonnegative; clamp the roundoff.
    Ok(value.max(T::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;

    #[test]
    fn identical_populations_score_zero() {
        let mut rng = substream(3, 0);
        let samples = Mat::from_fn(40, 5, |_, _| standard_normal::<f64, _>(&mut rng));
        let d = frechet_gaussian(&samples, &samples).unwrap();
        assert!(d.abs() <= 1e-8, "distance {d}");
    }

    #[test]
    fn one_dimensional_mean_shift_closed_form() {
        // {-1, +1} vs {m-1, m+1}: equal variances, means 0 and m -> distance m².
        let m = 0.75;
        let a = Mat::from_rows(vec![vec![-1.0], vec![1.0]]);
        let b = Mat::from_rows(vec![vec![m - 1.0], vec![m + 1.0]]);
        let d: f64 = frechet_gaussian(&a, &b).unwrap();
        assert!((d - m * m).abs() < 1e-12, "distance {d}");
    }

    #[test]
    fn isotropic_scaling_closed_form() {
        // N(0, I) vs N(0, 4I) in d dims: tr(I) + tr(4I) - 2 tr(2I) = d.
        let d = 4usize;
        let n = 60_000;
        let mut rng = substream(9, 0);
        let a = Mat::from_fn(n, d, |_, _| standard_normal::<f64, _>(&mut rng));
        let b = Mat::from_fn(n, d, |_, _| 2.0 * standard_normal::<f64, _>(&mut rng));
        let dist = frechet_gaussian(&a, &b).unwrap();
        assert!((dist - d as f64).abs() <= 0.15, "distance {dist}");
    }

    #[test]
    fn invariant_under_shared_rotation() {
        let mut rng = substream(11, 0);
        let a = Mat::from_fn(80, 6, |_, j| standard_normal::<f64, _>(&mut rng) * (1.0 + j as f64));
        let b = Mat::from_fn(80, 6, |_, _| standard_normal::<f64, _>(&mut rng) + 0.3);
        let q = crate::linalg::orthonormalize(&Mat::from_fn(6, 6, |_, _| {
            standard_normal::<f64, _>(&mut rng)
        }))
        .unwrap();
        let d0 = frechet_gaussian(&a, &b).unwrap();
        let rot = |m: &Mat<f64>| m.matmul(&q);
        let d1 = frechet_gaussian(&rot(&a), &rot(&b)).unwrap();
        assert!((d0 - d1).abs() <= 1e-6 * d0.max(1.0), "{d0} vs {d1}");
    }

    #[test]
    fn sample_floor_is_enforced() {
        let a = Mat::from_fn(5, 5, |i, j| (i + j) as f64);
        assert!(matches!(
            frechet_gaussian(&a, &a),
            Err(MetricError::TooFewSamples { required: 6, got: 5 })
        ));
    }

    #[test]
    fn feature_map_switches_on_dimension() {
        assert!(matches!(FeatureMap::<f64>::for_dim(256, 1), FeatureMap::Identity));
        match FeatureMap::<f64>::for_dim(4096, 1) {
            FeatureMap::Projection(p) => {
                assert_eq!(p.rows(), 256);
                assert_eq!(p.cols(), 4096);
            }
            FeatureMap::Identity => panic!("expected projection"),
        }
        let v = normal_vec::<f64, _>(&mut substream(1, 0), 64);
        let img = ImageGrid {
            channels: 1,
            height: 8,
            width: 8,
            pixels: v.clone(),
            provenance: crate::latent_model::Provenance::Generated,
        };
        assert_eq!(FeatureMap::Identity.apply(&img), v);
    }
}
