//! Structural similarity over a sliding 11x11 Gaussian window.

use crate::latent_model::ImageGrid;
use crate::metrics::MetricError;
use crate::scalar::Scalar;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

fn gaussian_window<T: Scalar>() -> Vec<T> {
    let c = (WINDOW as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(WINDOW * WINDOW);
    let mut sum = 0.0;
    let mut raw = Vec::with_capacity(WINDOW * WINDOW);
    for i in 0..WINDOW {
        for j in 0..WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
            raw.push(v);
            sum += v;
        }
    }
    for v in raw {
        w.push(T::c(v / sum));
    }
    w
}

/// Mean SSIM between two images of the same shape. Multichannel images are
/// averaged to one channel first. Pixels are taken relative to the range
/// minimum with `L` = range width, so the score is invariant to applying the
/// same affine intensity map (with its induced range) to both images.
pub fn ssim<T: Scalar>(
    a: &ImageGrid<T>,
    b: &ImageGrid<T>,
    output_range: (T, T),
) -> Result<T, MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::ShapeMismatch);
    }
    if a.height < WINDOW || a.width < WINDOW {
        return Err(MetricError::ImageTooSmall { h: a.height, w: a.width, win: WINDOW });
    }
    let (lo, hi) = output_range;
    let l = hi - lo;
    let c1 = (T::c(0.01) * l) * (T::c(0.01) * l);
    let c2 = (T::c(0.03) * l) * (T::c(0.03) * l);
    let pa = channel_average(a, lo);
    let pb = channel_average(b, lo);
    let (h, w) = (a.height, a.width);
    let win = gaussian_window::<T>();
    let mut total = T::zero();
    let mut count = 0usize;
    for y0 in 0..=(h - WINDOW) {
        for x0 in 0..=(w - WINDOW) {
            let mut mu_a = T::zero();
            let mut mu_b = T::zero();
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let wt = win[i * WINDOW + j];
                    let idx = (y0 + i) * w + x0 + j;
                    mu_a = mu_a + wt * pa[idx];
                    mu_b = mu_b + wt * pb[idx];
                }
            }
            let mut var_a = T::zero();
            let mut var_b = T::zero();
            let mut cov = T::zero();
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let wt = win[i * WINDOW + j];
                    let idx = (y0 + i) * w + x0 + j;
                    let da = pa[idx] - mu_a;
                    let db = pb[idx] - mu_b;
                    var_a = var_a + wt * da * da;
                    var_b = var_b + wt * db * db;
                    cov = cov + wt * da * db;
                }
            }
            let two = T::c(2.0);
            let num = (two * mu_a * mu_b + c1) * (two * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total = total + num / den;
            count += 1;
        }
    }
    Ok(total / T::from_usize_lossy(count))
}

fn channel_average<T: Scalar>(img: &ImageGrid<T>, lo: T) -> Vec<T> {
    let plane = img.height * img.width;
    let scale = T::one() / T::from_usize_lossy(img.channels);
    (0..plane)
        .map(|p| {
            let mut acc = T::zero();
            for c in 0..img.channels {
                acc = acc + img.pixels[c * plane + p];
            }
            acc * scale - lo
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_model::{build_generator, GeneratorSpec, Provenance};
    use crate::rng::{normal_vec, substream};

    fn sample_image(seed: u64) -> ImageGrid<f64> {
        let g = build_generator(&GeneratorSpec::default_desk_scale(1)).unwrap();
        let z = normal_vec::<f64, _>(&mut substream(seed, 0), 32);
        g.evaluate(&g.map_latent(&z).unwrap().w).unwrap()
    }

    fn grid(pixels: Vec<f64>, h: usize, w: usize) -> ImageGrid<f64> {
        ImageGrid { channels: 1, height: h, width: w, pixels, provenance: Provenance::Generated }
    }

    #[test]
    fn ssim_of_image_with_itself_is_one() {
        let img = sample_image(1);
        let s = ssim(&img, &img, (0.0, 1.0)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_constants_score_one() {
        let a = grid(vec![0.4; 256], 16, 16);
        let b = grid(vec![0.4; 256], 16, 16);
        assert!((ssim(&a, &b, (0.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_contrast_is_negative() {
        // Binary checkerboard against its inversion: structure is exactly
        // anti-correlated.
        let pixels: Vec<f64> = (0..256).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
        let inverted: Vec<f64> = pixels.iter().map(|p| 1.0 - p).collect();
        let a = grid(pixels, 16, 16);
        let b = grid(inverted, 16, 16);
        let s = ssim(&a, &b, (0.0, 1.0)).unwrap();
        assert!(s < 0.0, "ssim {s}");
    }

    #[test]
    fn invariant_under_shared_affine_rescaling() {
        let a = sample_image(2);
        let b = sample_image(3);
        let s0 = ssim(&a, &b, (0.0, 1.0)).unwrap();
        let map = |img: &ImageGrid<f64>| {
            let mut out = img.clone();
            for p in out.pixels.iter_mut() {
                *p = 2.0 * *p + 3.0;
            }
            out
        };
        let s1 = ssim(&map(&a), &map(&b), (3.0, 5.0)).unwrap();
        assert!((s0 - s1).abs() < 1e-9, "{s0} vs {s1}");
    }

    #[test]
    fn rejects_images_smaller_than_window() {
        let a = grid(vec![0.0; 64], 8, 8);
        assert!(matches!(
            ssim(&a, &a, (0.0, 1.0)),
            Err(MetricError::ImageTooSmall { .. })
        ));
    }
}
