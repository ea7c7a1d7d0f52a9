//! Latent statistics: sample mean/covariance, principal-component
//! fingerprint bases, mean Gram matrix estimation, and subspace alignment.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::latent_model::{EvalError, Generator, LatentSource};
use crate::linalg::{sym_eigen, KahanVec, LinalgError, Mat};
use crate::rng::{normal_vec, substream};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least d_w + 1 = {required} samples, got {got}")]
    TooFewSamples { required: usize, got: usize },
    #[error("latent sample {index} is not finite")]
    NonFiniteLatent { index: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("stats file malformed: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("pc range [{i}, {j}) out of bounds for d_w = {d_w}")]
    BadRange { i: usize, j: usize, d_w: usize },
    #[error("pc range [{i}, {j}) is empty")]
    EmptyRange { i: usize, j: usize },
}

/// Sample statistics of the latent distribution together with the
/// eigendecomposition of its covariance.
#[derive(Debug, Clone)]
pub struct LatentStats<T> {
    pub mean: Vec<T>,
    pub covariance: Mat<T>,
    pub sample_count: usize,
    /// Seed the samples were drawn from (provenance; lets downstream code
    /// regenerate the exact sample set).
    pub rng_seed: u64,
    /// Eigenvalues of the covariance, descending.
    pub eigenvalues: Vec<T>,
    /// Columns are the principal components, aligned with `eigenvalues`.
    pub eigenvectors: Mat<T>,
}

/// Orthonormal complementary split of the latent space: `V` carries the
/// fingerprint, `U` the remaining coordinates.
#[derive(Debug, Clone)]
pub struct FingerprintBasis<T> {
    pub u: Mat<T>,
    pub v: Mat<T>,
    pub pc_range: (usize, usize),
    /// Latents are centered at this mean before projection and the mean is
    /// added back before generation.
    pub mean: Vec<T>,
    pub centered: bool,
    /// Eigenvalues for the columns of `u` (descending within the original order).
    pub lambda_u: Vec<T>,
    /// Eigenvalues for the columns of `v`.
    pub lambda_v: Vec<T>,
    /// (sample_count, rng_seed) of the source stats.
    pub source: (usize, u64),
}

impl<T: Scalar> FingerprintBasis<T> {
    pub fn d_w(&self) -> usize {
        self.mean.len()
    }

    pub fn d_phi(&self) -> usize {
        self.v.cols()
    }
}

/// Mean Gram matrix estimate `E[JᵀJ]`.
#[derive(Debug, Clone)]
pub struct GramEstimate<T> {
    pub h: Mat<T>,
    pub sample_count: usize,
    /// Set when the expectation was taken over fingerprinted latents.
    pub fingerprinted: bool,
}

/// Fingerprint context for `estimate_mean_gram`: expectation over
/// `w = mean + U Uᵀ(psi(z) - mean) + sigma V phi` with a fixed key.
pub struct FingerprintContext<'a, T> {
    pub basis: &'a FingerprintBasis<T>,
    pub sigma: T,
    pub key_bits: &'a [u8],
}

impl<T: Scalar> LatentStats<T> {
    /// Two-pass mean/covariance with compensated sums; eigendecomposition is
    /// performed eagerly. The estimate is permutation-invariant over the
    /// sample order up to accumulator epsilon.
    pub fn from_samples(samples: &[Vec<T>], rng_seed: u64) -> Result<Self, StatsError> {
        let n = samples.len();
        let d_w = samples.first().map_or(0, Vec::len);
        if n < d_w + 1 {
            return Err(StatsError::TooFewSamples { required: d_w + 1, got: n });
        }
        for (index, s) in samples.iter().enumerate() {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(StatsError::NonFiniteLatent { index });
            }
        }
        let mut mean_acc = KahanVec::new(d_w);
        for s in samples {
            mean_acc.add(s);
        }
        let mean = mean_acc.scaled(T::one() / T::from_usize_lossy(n));
        let mut cov_acc = KahanVec::new(d_w * d_w);
        let mut centered = vec![T::zero(); d_w];
        for s in samples {
            for i in 0..d_w {
                centered[i] = s[i] - mean[i];
            }
            cov_acc.add_outer(&centered, &centered);
        }
        let covariance = cov_acc
            .into_mat(d_w, d_w, T::one() / T::from_usize_lossy(n - 1))
            .symmetrize();
        let eig = sym_eigen(&covariance)?;
        // Sample covariances are PSD; clamp roundoff-negative eigenvalues.
        let eigenvalues = eig
            .values
            .into_iter()
            .map(|l| if l < T::zero() { T::zero() } else { l })
            .collect();
        Ok(Self {
            mean,
            covariance,
            sample_count: n,
            rng_seed,
            eigenvalues,
            eigenvectors: eig.vectors,
        })
    }

    pub fn d_w(&self) -> usize {
        self.mean.len()
    }

    /// Regenerate the exact latent samples this estimate was computed from.
    pub fn regenerate_samples(&self, handle: &Generator<T>) -> Result<Vec<Vec<T>>, EvalError> {
        draw_latents(handle, self.sample_count, self.rng_seed)
    }

    /// Persist as structured text (one value per whitespace slot, shortest
    /// round-trip float formatting, so reload is bit-exact).
    pub fn save(&self, path: &Path) -> Result<(), StatsError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "latentstats v1")?;
        writeln!(f, "encoding=text-roundtrip")?;
        writeln!(f, "seed={}", self.rng_seed)?;
        writeln!(f, "n={}", self.sample_count)?;
        writeln!(f, "d_w={}", self.d_w())?;
        write_vec(&mut f, "mean", &self.mean)?;
        write_vec(&mut f, "lambda", &self.eigenvalues)?;
        for i in 0..self.d_w() {
            write_vec(&mut f, "pc_row", self.eigenvectors.row(i))?;
        }
        Ok(())
    }

    /// Reload a stats file. The covariance is reconstructed from the
    /// persisted eigendecomposition.
    pub fn load(path: &Path) -> Result<Self, StatsError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| StatsError::Parse("empty file".into()))?;
        if header.trim() != "latentstats v1" {
            return Err(StatsError::Parse(format!("bad header `{header}`")));
        }
        let mut seed = None;
        let mut n = None;
        let mut d_w = None;
        let mut mean = None;
        let mut lambda = None;
        let mut pc_rows: Vec<Vec<T>> = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line == "encoding=text-roundtrip" {
                continue;
            }
            if let Some(rest) = line.strip_prefix("seed=") {
                seed = Some(rest.parse::<u64>().map_err(|e| StatsError::Parse(e.to_string()))?);
            } else if let Some(rest) = line.strip_prefix("n=") {
                n = Some(rest.parse::<usize>().map_err(|e| StatsError::Parse(e.to_string()))?);
            } else if let Some(rest) = line.strip_prefix("d_w=") {
                d_w = Some(rest.parse::<usize>().map_err(|e| StatsError::Parse(e.to_string()))?);
            } else if let Some(rest) = line.strip_prefix("mean ") {
                mean = Some(parse_vec::<T>(rest)?);
            } else if let Some(rest) = line.strip_prefix("lambda ") {
                lambda = Some(parse_vec::<T>(rest)?);
            } else if let Some(rest) = line.strip_prefix("pc_row ") {
                pc_rows.push(parse_vec::<T>(rest)?);
            } else {
                return Err(StatsError::Parse(format!("unexpected line `{line}`")));
            }
        }
        let d_w = d_w.ok_or_else(|| StatsError::Parse("missing d_w".into()))?;
        let mean = mean.ok_or_else(|| StatsError::Parse("missing mean".into()))?;
        let lambda = lambda.ok_or_else(|| StatsError::Parse("missing lambda".into()))?;
        if pc_rows.len() != d_w || mean.len() != d_w || lambda.len() != d_w {
            return Err(StatsError::Parse("inconsistent dimensions".into()));
        }
        let eigenvectors = Mat::from_rows(pc_rows);
        // Sigma = PC diag(lambda) PCᵀ
        let mut scaled = eigenvectors.clone();
        for i in 0..d_w {
            let row = scaled.row_mut(i);
            for (j, l) in lambda.iter().enumerate() {
                row[j] = row[j] * *l;
            }
        }
        let covariance = scaled.matmul(&eigenvectors.transpose()).symmetrize();
        Ok(Self {
            mean,
            covariance,
            sample_count: n.ok_or_else(|| StatsError::Parse("missing n".into()))?,
            rng_seed: seed.ok_or_else(|| StatsError::Parse("missing seed".into()))?,
            eigenvalues: lambda,
            eigenvectors,
        })
    }
}

fn write_vec<T: Scalar, W: Write>(f: &mut W, tag: &str, v: &[T]) -> std::io::Result<()> {
    write!(f, "{tag}")?;
    for x in v {
        write!(f, " {x}")?;
    }
    writeln!(f)
}

fn parse_vec<T: Scalar>(s: &str) -> Result<Vec<T>, StatsError> {
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map(T::c)
                .map_err(|e| StatsError::Parse(format!("bad float `{tok}`: {e}")))
        })
        .collect()
}

/// Draw `n` latents `w = psi(z)`, `z ~ N(0, I)`, one RNG substream per index.
pub fn draw_latents<T: Scalar>(
    handle: &Generator<T>,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<Vec<T>>, EvalError> {
    (0..n)
        .map(|i| {
            let z = normal_vec::<T, _>(&mut substream(rng_seed, i as u64), handle.d_z());
            handle.map_latent(&z).map(|s| s.w)
        })
        .collect()
}

/// Sample mean and covariance of `psi(z)` over `n_samples` seeded draws.
pub fn estimate_stats<T: Scalar>(
    handle: &Generator<T>,
    n_samples: usize,
    rng_seed: u64,
) -> Result<LatentStats<T>, StatsError> {
    if n_samples < handle.d_w() + 1 {
        return Err(StatsError::TooFewSamples { required: handle.d_w() + 1, got: n_samples });
    }
    let samples = draw_latents(handle, n_samples, rng_seed)?;
    LatentStats::from_samples(&samples, rng_seed)
}

/// `V = PC[i:j]`, `U` = the remaining principal components in order.
pub fn select_basis<T: Scalar>(
    stats: &LatentStats<T>,
    i: usize,
    j: usize,
) -> Result<FingerprintBasis<T>, BasisError> {
    let d_w = stats.d_w();
    if i >= j {
        return Err(BasisError::EmptyRange { i, j });
    }
    if j > d_w {
        return Err(BasisError::BadRange { i, j, d_w });
    }
    let v = stats.eigenvectors.col_slice(i, j);
    let left = stats.eigenvectors.col_slice(0, i);
    let right = stats.eigenvectors.col_slice(j, d_w);
    let u = left.hcat(&right);
    let lambda_v = stats.eigenvalues[i..j].to_vec();
    let mut lambda_u = stats.eigenvalues[0..i].to_vec();
    lambda_u.extend_from_slice(&stats.eigenvalues[j..d_w]);
    Ok(FingerprintBasis {
        u,
        v,
        pc_range: (i, j),
        mean: stats.mean.clone(),
        centered: true,
        lambda_u,
        lambda_v,
        source: (stats.sample_count, stats.rng_seed),
    })
}

/// Average `JᵀJ` over latents drawn from `psi(z)` (or their fingerprinted
/// counterparts when a context is given). Accumulation is chunked with a
/// fixed reduction order, so results do not depend on worker count.
pub fn estimate_mean_gram<T: Scalar>(
    handle: &Generator<T>,
    n_samples: usize,
    rng_seed: u64,
    context: Option<&FingerprintContext<'_, T>>,
) -> Result<GramEstimate<T>, StatsError> {
    if n_samples == 0 {
        return Err(StatsError::TooFewSamples { required: 1, got: 0 });
    }
    let d_w = handle.d_w();
    let h = mean_gram_over(d_w, n_samples, |i| -> Result<Mat<T>, StatsError> {
        let z = normal_vec::<T, _>(&mut substream(rng_seed, i as u64), handle.d_z());
        let mut w = handle.map_latent(&z)?.w;
        if let Some(ctx) = context {
            w = fingerprinted_latent(ctx, &w);
        }
        let j = handle.jacobian(&w)?;
        Ok(j.t_matmul(&j))
    })?;
    Ok(GramEstimate { h, sample_count: n_samples, fingerprinted: context.is_some() })
}

/// Replace the V-component of `w` by the scaled key: returns
/// `mean + U Uᵀ (w - mean) + sigma V phi`.
pub fn fingerprinted_latent<T: Scalar>(ctx: &FingerprintContext<'_, T>, w: &[T]) -> Vec<T> {
    let basis = ctx.basis;
    let centered: Vec<T> = w.iter().zip(&basis.mean).map(|(&wi, &mi)| wi - mi).collect();
    let alpha = basis.u.t_matvec(&centered);
    let mut out = basis.u.matvec(&alpha);
    for (o, &mi) in out.iter_mut().zip(&basis.mean) {
        *o = *o + mi;
    }
    for (k, &bit) in ctx.key_bits.iter().enumerate() {
        if bit != 0 {
            let col = ctx.basis.v.col(k);
            for (o, &ck) in out.iter_mut().zip(&col) {
                *o = *o + ctx.sigma * ck;
            }
        }
    }
    out
}

/// Mean of per-sample `d x d` matrices with fixed chunked reduction order.
fn mean_gram_over<T: Scalar, E>(
    d: usize,
    n: usize,
    f: impl Fn(usize) -> Result<Mat<T>, E> + Sync,
) -> Result<Mat<T>, E>
where
    E: Send,
{
    let chunk_count = n.min(64);
    let bounds: Vec<(usize, usize)> = (0..chunk_count)
        .map(|c| (c * n / chunk_count, (c + 1) * n / chunk_count))
        .collect();
    let partials: Result<Vec<KahanVec<T>>, E> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc = KahanVec::new(d * d);
            for i in lo..hi {
                let m = f(i)?;
                acc.add(m.data());
            }
            Ok(acc)
        })
        .collect();
    let mut total = KahanVec::new(d * d);
    for p in partials? {
        total.merge(&p);
    }
    Ok(total.into_mat(d, d, T::one() / T::from_usize_lossy(n)))
}

/// Principal angles between two orthonormal-column subspaces.
#[derive(Debug, Clone)]
pub struct AlignmentReport<T> {
    /// Angles in radians, ascending.
    pub principal_angles: Vec<T>,
    pub mean_squared_cosine: T,
}

pub fn subspace_alignment<T: Scalar>(
    a: &Mat<T>,
    b: &Mat<T>,
) -> Result<AlignmentReport<T>, LinalgError> {
    if a.rows() != b.rows() {
        return Err(LinalgError::Shape(format!(
            "ambient dimensions differ: {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    for m in [a, b] {
        let defect = crate::linalg::orthonormality_defect(m);
        if defect > T::c(1e-6) {
            return Err(LinalgError::NotOrthonormal(defect.to_f64_lossy()));
        }
    }
    let m = a.t_matmul(b);
    // Singular values of M via the smaller Gram matrix.
    let gram = if m.rows() <= m.cols() { m.matmul(&m.transpose()) } else { m.t_matmul(&m) };
    let eig = sym_eigen(&gram)?;
    let mut cosines: Vec<T> = eig
        .values
        .iter()
        .map(|&l| l.max(T::zero()).sqrt().min(T::one()))
        .collect();
    cosines.sort_by(|x, y| y.partial_cmp(x).expect("finite cosines"));
    let k = cosines.len();
    let mean_squared_cosine =
        cosines.iter().map(|&c| c * c).fold(T::zero(), |s, v| s + v) / T::from_usize_lossy(k);
    let principal_angles = cosines.iter().map(|&c| c.acos()).collect();
    Ok(AlignmentReport { principal_angles, mean_squared_cosine })
}

/// Draw a synthetic Gaussian latent `mean + PC diag(sqrt(lambda)) e`,
/// matching the fitted stats. Tagged as synthetic.
pub fn synthetic_latent<T: Scalar>(
    stats: &LatentStats<T>,
    rng_seed: u64,
    index: u64,
) -> crate::latent_model::LatentSample<T> {
    let d_w = stats.d_w();
    let e = normal_vec::<T, _>(&mut substream(rng_seed, index), d_w);
    let mut w = stats.mean.clone();
    for k in 0..d_w {
        let s = stats.eigenvalues[k].max(T::zero()).sqrt() * e[k];
        if s == T::zero() {
            continue;
        }
        let col = stats.eigenvectors.col(k);
        for (wi, &ck) in w.iter_mut().zip(&col) {
            *wi = *wi + s * ck;
        }
    }
    crate::latent_model::LatentSample { w, source: LatentSource::SyntheticGaussian }
}
