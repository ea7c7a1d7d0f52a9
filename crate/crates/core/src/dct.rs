//! Orthonormal 8x8 DCT-II basis shared by the JPEG-like codec and the
//! blockwise-DCT feature metric.

use crate::linalg::Mat;
use crate::scalar::Scalar;

pub const BLOCK: usize = 8;

/// Row `k` holds the k-th orthonormal DCT-II basis function sampled at the
/// 8 pixel positions. `C = B X Bᵀ` is the 2-D transform; `X = Bᵀ C B` is its
/// inverse.
pub fn dct8_basis<T: Scalar>() -> Mat<T> {
    let mut b = Mat::zeros(BLOCK, BLOCK);
    let n = BLOCK as f64;
    for k in 0..BLOCK {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for x in 0..BLOCK {
            let angle = std::f64::consts::PI * (2.0 * x as f64 + 1.0) * k as f64 / (2.0 * n);
            b[(k, x)] = T::c(scale * angle.cos());
        }
    }
    b
}

/// Forward 2-D transform of one 8x8 block (row-major `x`).
pub fn forward8x8<T: Scalar>(basis: &Mat<T>, x: &Mat<T>) -> Mat<T> {
    basis.matmul(&x.matmul(&basis.transpose()))
}

/// Inverse 2-D transform.
pub fn inverse8x8<T: Scalar>(basis: &Mat<T>, c: &Mat<T>) -> Mat<T> {
    basis.transpose().matmul(&c.matmul(basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormality_defect;

    #[test]
    fn basis_is_orthonormal_and_invertible() {
        let b = dct8_basis::<f64>();
        assert!(orthonormality_defect(&b) < 1e-14);
        let x = Mat::from_fn(8, 8, |i, j| (i * 8 + j) as f64 * 0.31 - 7.0);
        let back = inverse8x8(&b, &forward8x8(&b, &x));
        assert!(back.sub(&x).max_abs() < 1e-12);
    }

    #[test]
    fn dc_coefficient_is_scaled_mean() {
        let b = dct8_basis::<f64>();
        let x = Mat::from_fn(8, 8, |_, _| 3.0);
        let c = forward8x8(&b, &x);
        assert!((c[(0, 0)] - 24.0f64).abs() < 1e-12); // 8 * mean
        for i in 0..8 {
            for j in 0..8 {
                if (i, j) != (0, 0) {
                    assert!(c[(i, j)].abs() < 1e-12);
                }
            }
        }
    }
}
