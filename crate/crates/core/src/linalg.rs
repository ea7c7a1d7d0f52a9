//! Small dense linear algebra: matrices, symmetric eigendecomposition,
//! linear solves, and compensated summation.
//!
//! Everything here is written directly against [`Scalar`] so results are
//! bit-reproducible across runs and platforms (plain IEEE operations, fixed
//! iteration orders, no fused multiply-add).

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix dimensions incompatible: {0}")]
    Shape(String),
    #[error("matrix is singular (pivot {pivot:e} at column {col})")]
    Singular { col: usize, pivot: f64 },
    #[error("eigendecomposition did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("columns are not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.into_iter().flatten().collect();
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[T]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let out_row = out.row_mut(i);
                let other_row = other.row(k);
                for j in 0..other.cols {
                    out_row[j] = out_row[j] + a * other_row[j];
                }
            }
        }
        out
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for i in 0..self.cols {
                let a = a_row[i];
                if a == T::zero() {
                    continue;
                }
                let out_row = out.row_mut(i);
                for j in 0..other.cols {
                    out_row[j] = out_row[j] + a * b_row[j];
                }
            }
        }
        out
    }

    /// `self * x` for a vector `x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ * x` for a vector `x`.
    pub fn t_matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.rows, x.len(), "t_matvec shape mismatch");
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * xi;
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        let data = self.data.iter().map(|&v| v * s).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// Keep columns `lo..hi`.
    pub fn col_slice(&self, lo: usize, hi: usize) -> Self {
        assert!(lo <= hi && hi <= self.cols);
        Self::from_fn(self.rows, hi - lo, |i, j| self[(i, lo + j)])
    }

    /// Horizontal concatenation `[self other]`.
    pub fn hcat(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows);
        Self::from_fn(self.rows, self.cols + other.cols, |i, j| {
            if j < self.cols {
                self[(i, j)]
            } else {
                other[(i, j - self.cols)]
            }
        })
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn trace(&self) -> T {
        assert_eq!(self.rows, self.cols);
        (0..self.rows).map(|i| self[(i, i)]).fold(T::zero(), |a, b| a + b)
    }

    pub fn symmetrize(&self) -> Self {
        assert_eq!(self.rows, self.cols);
        let half = T::c(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)]) * half)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).fold(T::zero(), |acc, v| acc + v)
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn sub_vec<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn add_vec<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// Kahan compensated accumulator for vectors. Keeps permutation differences
/// in long sample sums near machine epsilon.
#[derive(Debug, Clone)]
pub struct KahanVec<T> {
    sum: Vec<T>,
    comp: Vec<T>,
}

impl<T: Scalar> KahanVec<T> {
    pub fn new(len: usize) -> Self {
        Self { sum: vec![T::zero(); len], comp: vec![T::zero(); len] }
    }

    pub fn add(&mut self, x: &[T]) {
        debug_assert_eq!(x.len(), self.sum.len());
        for i in 0..x.len() {
            let y = x[i] - self.comp[i];
            let t = self.sum[i] + y;
            self.comp[i] = (t - self.sum[i]) - y;
            self.sum[i] = t;
        }
    }

    /// Add `a[i] * b[j]` into the flattened (len_a × len_b) accumulator.
    pub fn add_outer(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(self.sum.len(), a.len() * b.len());
        let cols = b.len();
        for (i, &ai) in a.iter().enumerate() {
            let row = i * cols;
            for (j, &bj) in b.iter().enumerate() {
                let k = row + j;
                let y = ai * bj - self.comp[k];
                let t = self.sum[k] + y;
                self.comp[k] = (t - self.sum[k]) - y;
                self.sum[k] = t;
            }
        }
    }

    pub fn merge(&mut self, other: &KahanVec<T>) {
        self.add(&other.sum);
        self.add(&other.comp.iter().map(|&c| -c).collect::<Vec<_>>());
    }

    pub fn scaled(&self, s: T) -> Vec<T> {
        self.sum.iter().map(|&v| v * s).collect()
    }

    pub fn into_mat(self, rows: usize, cols: usize, s: T) -> Mat<T> {
        assert_eq!(self.sum.len(), rows * cols);
        Mat { rows, cols, data: self.sum.into_iter().map(|v| v * s).collect() }
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEigen<T> {
    /// Eigenvalues in descending order.
    pub values: Vec<T>,
    /// Matrix whose columns are the corresponding orthonormal eigenvectors.
    pub vectors: Mat<T>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sorting is stable and each eigenvector's sign is fixed so its
/// largest-magnitude entry is positive, which makes the basis deterministic
/// across runs and platforms.
pub fn sym_eigen<T: Scalar>(a: &Mat<T>) -> Result<SymEigen<T>, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::Shape(format!("{}x{} not square", a.rows(), a.cols())));
    }
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Mat::identity(n);
    let fro = m.frobenius_norm();
    if fro == T::zero() || n == 1 {
        let values = (0..n).map(|i| m[(i, i)]).collect();
        return Ok(sorted_eigen(values, v));
    }
    let tol = T::epsilon() * fro;
    let max_sweeps = 64;
    for _sweep in 0..max_sweeps {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off + m[(p, q)] * m[(p, q)];
            }
        }
        if (off + off).sqrt() <= tol {
            let values = (0..n).map(|i| m[(i, i)]).collect();
            return Ok(sorted_eigen(values, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= T::epsilon() * fro * T::c(1e-3) {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::c(2.0) * apq);
                let t = {
                    let s = if theta >= T::zero() { T::one() } else { -T::one() };
                    s / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of m.
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(LinalgError::NoConvergence(max_sweeps))
}

fn sorted_eigen<T: Scalar>(values: Vec<T>, vectors: Mat<T>) -> SymEigen<T> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).expect("finite eigenvalues"));
    let mut sorted_vals = Vec::with_capacity(n);
    let mut sorted_vecs = Mat::zeros(vectors.rows(), n);
    for (dst, &src) in order.iter().enumerate() {
        sorted_vals.push(values[src]);
        let mut col = vectors.col(src);
        // Sign convention: largest-magnitude entry positive.
        let mut best = 0;
        for (k, c) in col.iter().enumerate() {
            if c.abs() > col[best].abs() {
                best = k;
            }
        }
        if col[best] < T::zero() {
            for c in col.iter_mut() {
                *c = -*c;
            }
        }
        sorted_vecs.set_col(dst, &col);
    }
    SymEigen { values: sorted_vals, vectors: sorted_vecs }
}

/// Solve `a x = b` for square `a` by LU with partial pivoting.
pub fn solve<T: Scalar>(a: &Mat<T>, b: &[T]) -> Result<Vec<T>, LinalgError> {
    if a.rows() != a.cols() || a.rows() != b.len() {
        return Err(LinalgError::Shape(format!(
            "solve with {}x{} matrix and rhs of {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut x: Vec<T> = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot_row = col;
        for r in (col + 1)..n {
            if lu[(r, col)].abs() > lu[(pivot_row, col)].abs() {
                pivot_row = r;
            }
        }
        let pivot = lu[(pivot_row, col)];
        if pivot.abs() <= T::epsilon() * T::c(16.0) * a.max_abs().max(T::min_positive_value()) {
            return Err(LinalgError::Singular { col, pivot: pivot.to_f64_lossy() });
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = lu[(col, j)];
                lu[(col, j)] = lu[(pivot_row, j)];
                lu[(pivot_row, j)] = tmp;
            }
            x.swap(col, pivot_row);
            perm.swap(col, pivot_row);
        }
        for r in (col + 1)..n {
            let f = lu[(r, col)] / lu[(col, col)];
            lu[(r, col)] = f;
            for j in (col + 1)..n {
                let v = lu[(col, j)];
                lu[(r, j)] = lu[(r, j)] - f * v;
            }
            x[r] = x[r] - f * x[col];
        }
    }
    for r in (0..n).rev() {
        let mut acc = x[r];
        for j in (r + 1)..n {
            acc = acc - lu[(r, j)] * x[j];
        }
        x[r] = acc / lu[(r, r)];
    }
    Ok(x)
}

/// Symmetric PSD square root via eigendecomposition; small negative
/// eigenvalues from roundoff are clamped to zero.
pub fn sqrtm_psd<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>, LinalgError> {
    let eig = sym_eigen(a)?;
    let n = a.rows();
    let mut out = Mat::zeros(n, n);
    for (k, &lam) in eig.values.iter().enumerate() {
        let l = lam.max(T::zero()).sqrt();
        if l == T::zero() {
            continue;
        }
        let col = eig.vectors.col(k);
        for i in 0..n {
            let ci = col[i] * l;
            for j in 0..n {
                out[(i, j)] = out[(i, j)] + ci * col[j];
            }
        }
    }
    Ok(out)
}

/// Modified Gram-Schmidt orthonormalization of the columns of `a`.
/// Requires full column rank.
pub fn orthonormalize<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>, LinalgError> {
    let mut q = a.clone();
    for j in 0..q.cols() {
        let mut col = q.col(j);
        for k in 0..j {
            let prev = q.col(k);
            let proj = dot(&col, &prev);
            axpy(&mut col, -proj, &prev);
        }
        let n = norm2(&col);
        if n <= T::epsilon() * T::c(64.0) {
            return Err(LinalgError::Shape(format!("column {j} is rank deficient")));
        }
        for c in col.iter_mut() {
            *c = *c / n;
        }
        q.set_col(j, &col);
    }
    Ok(q)
}

/// `‖AᵀA − I‖_max` for orthonormality checks.
pub fn orthonormality_defect<T: Scalar>(a: &Mat<T>) -> T {
    let gram = a.t_matmul(a);
    let mut defect = T::zero();
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { T::one() } else { T::zero() };
            defect = defect.max((gram[(i, j)] - target).abs());
        }
    }
    defect
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn matmul_against_hand_example() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let ct = a.t_matmul(&b);
        assert_eq!(ct.data(), &[26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn eigen_reconstructs_symmetric_matrix() {
        let raw = random_mat(12, 12, 3);
        let sym = raw.t_matmul(&raw); // PSD
        let eig = sym_eigen(&sym).unwrap();
        // Reconstruct V diag(λ) Vᵀ.
        let mut recon = Mat::zeros(12, 12);
        for k in 0..12 {
            let col = eig.vectors.col(k);
            for i in 0..12 {
                for j in 0..12 {
                    recon[(i, j)] += eig.values[k] * col[i] * col[j];
                }
            }
        }
        let err = recon.sub(&sym).frobenius_norm() / sym.frobenius_norm();
        assert!(err < 1e-12, "reconstruction error {err}");
        assert!(orthonormality_defect(&eig.vectors) < 1e-12);
        for w in eig.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn eigen_known_2x2() {
        let a = Mat::from_rows(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        let eig = sym_eigen(&a).unwrap();
        assert!((eig.values[0] - 3.0f64).abs() < 1e-14);
        assert!((eig.values[1] - 1.0f64).abs() < 1e-14);
    }

    #[test]
    fn eigen_sign_convention_is_deterministic() {
        let raw = random_mat(8, 8, 11);
        let sym = raw.t_matmul(&raw);
        let e1 = sym_eigen(&sym).unwrap();
        let e2 = sym_eigen(&sym.clone()).unwrap();
        assert_eq!(e1.vectors, e2.vectors);
        for k in 0..8 {
            let col = e1.vectors.col(k);
            let max = col.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(col.iter().any(|&v| v.abs() == max && v > 0.0));
        }
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = random_mat(9, 9, 5);
        let x_true: Vec<f64> = (0..9).map(|i| (i as f64) - 4.0).collect();
        let b = a.matvec(&x_true);
        let x = solve(&a, &b).unwrap();
        for (xi, ti) in x.iter().zip(&x_true) {
            assert!((xi - ti).abs() < 1e-9);
        }
    }

    #[test]
    fn solve_rejects_singular() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(solve(&a, &[1.0, 2.0]), Err(LinalgError::Singular { .. })));
    }

    #[test]
    fn sqrtm_squares_back() {
        let raw = random_mat(6, 6, 9);
        let a = raw.t_matmul(&raw);
        let s = sqrtm_psd(&a).unwrap();
        let err = s.matmul(&s).sub(&a).frobenius_norm() / a.frobenius_norm();
        assert!(err < 1e-10, "sqrt error {err}");
    }

    #[test]
    fn kahan_outer_matches_direct() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0, 5.0];
        let mut acc = KahanVec::<f64>::new(6);
        acc.add_outer(&a, &b);
        acc.add_outer(&a, &b);
        let m = acc.into_mat(2, 3, 0.5);
        assert_eq!(m.data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn orthonormalize_produces_orthonormal_columns() {
        let a = random_mat(20, 6, 17);
        let q = orthonormalize(&a).unwrap();
        assert!(orthonormality_defect(&q) < 1e-12);
    }
}
