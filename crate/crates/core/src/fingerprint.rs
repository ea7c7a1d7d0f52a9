//! Key management and latent embedding: a binary key scaled by a strength
//! factor is written into the fingerprint subspace of the latent code.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::latent_model::{EvalError, Generator, ImageGrid, LatentSample, LatentSource};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::spectral::{FingerprintBasis, LatentStats, StatsError};
use rand::Rng;

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("requested {count} keys but capacity is 2^{d_phi}")]
    CapacityExceeded { d_phi: usize, count: usize },
    #[error("key bits must be 0 or 1")]
    BadBits,
    #[error("registry file malformed: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("fingerprint strength must be positive, got {0}")]
    BadSigma(f64),
    #[error("key has {got} bits, basis expects {expected}")]
    KeyDimension { expected: usize, got: usize },
    #[error("vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A binary fingerprint key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Key {
    /// Bits as 0/1 bytes, index 0 first.
    pub bits: Vec<u8>,
    /// Index into the owning registry.
    pub id: usize,
}

impl Key {
    pub fn new(bits: Vec<u8>, id: usize) -> Result<Self, KeyError> {
        if bits.iter().any(|&b| b > 1) {
            return Err(KeyError::BadBits);
        }
        Ok(Self { bits, id })
    }

    pub fn d_phi(&self) -> usize {
        self.bits.len()
    }

    pub fn hamming(&self, other: &Key) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Fraction of agreeing bits.
    pub fn bit_accuracy(&self, other: &Key) -> f64 {
        if self.bits.is_empty() {
            return 1.0;
        }
        1.0 - self.hamming(other) as f64 / self.bits.len() as f64
    }

    /// Hex encoding, bit 0 in the most significant position, zero-padded at
    /// the least significant end to a whole number of hex digits.
    pub fn to_hex(&self) -> String {
        let mut out = String::new();
        for chunk in self.bits.chunks(4) {
            let mut nibble = 0u8;
            for (k, &b) in chunk.iter().enumerate() {
                nibble |= b << (3 - k);
            }
            out.push(char::from_digit(u32::from(nibble), 16).expect("nibble in range"));
        }
        out
    }

    pub fn from_hex(s: &str, d_phi: usize, id: usize) -> Result<Self, KeyError> {
        let mut bits = Vec::with_capacity(d_phi);
        for c in s.trim().chars() {
            let nibble = c
                .to_digit(16)
                .ok_or_else(|| KeyError::Parse(format!("bad hex digit `{c}`")))?
                as u8;
            for k in 0..4 {
                bits.push((nibble >> (3 - k)) & 1);
            }
        }
        if bits.len() < d_phi {
            return Err(KeyError::Parse(format!(
                "hex string has {} bits, need {d_phi}",
                bits.len()
            )));
        }
        bits.truncate(d_phi);
        Ok(Self { bits, id })
    }
}

/// Write-once database of user keys.
#[derive(Debug, Clone)]
pub struct KeyRegistry {
    pub d_phi: usize,
    pub seed: u64,
    pub entries: Vec<Key>,
}

impl KeyRegistry {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registry entry with the smallest Hamming distance to `probe`.
    pub fn nearest(&self, probe: &Key) -> Option<(&Key, usize)> {
        self.entries
            .iter()
            .map(|k| (k, k.hamming(probe)))
            .min_by_key(|&(_, d)| d)
    }

    /// Text header plus one hex bitstring per line, bit 0 most significant.
    pub fn save(&self, path: &Path) -> Result<(), KeyError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "d_phi={}", self.d_phi)?;
        writeln!(f, "count={}", self.entries.len())?;
        writeln!(f, "seed={}", self.seed)?;
        for key in &self.entries {
            writeln!(f, "{}", key.to_hex())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KeyError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let mut header = |name: &str| -> Result<u64, KeyError> {
            let line = lines
                .next()
                .transpose()?
                .ok_or_else(|| KeyError::Parse(format!("missing `{name}` line")))?;
            line.strip_prefix(&format!("{name}="))
                .ok_or_else(|| KeyError::Parse(format!("expected `{name}=`, got `{line}`")))?
                .parse::<u64>()
                .map_err(|e| KeyError::Parse(e.to_string()))
        };
        let d_phi = header("d_phi")? as usize;
        let count = header("count")? as usize;
        let seed = header("seed")?;
        let mut entries = Vec::with_capacity(count);
        for (id, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(Key::from_hex(&line, d_phi, id)?);
        }
        if entries.len() != count {
            return Err(KeyError::Parse(format!(
                "header says {count} keys, found {}",
                entries.len()
            )));
        }
        Ok(Self { d_phi, seed, entries })
    }
}

/// Draw `count` distinct keys, each bit Bernoulli(½); duplicates resampled.
pub fn sample_keys(d_phi: usize, count: usize, rng_seed: u64) -> Result<KeyRegistry, KeyError> {
    let capacity = if d_phi >= usize::BITS as usize { usize::MAX } else { 1usize << d_phi };
    if count > capacity {
        return Err(KeyError::CapacityExceeded { d_phi, count });
    }
    let mut rng = substream(rng_seed, 0);
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    while entries.len() < count {
        let bits: Vec<u8> = (0..d_phi).map(|_| u8::from(rng.random::<bool>())).collect();
        if seen.insert(bits.clone()) {
            let id = entries.len();
            entries.push(Key { bits, id });
        }
    }
    Ok(KeyRegistry { d_phi, seed: rng_seed, entries })
}

/// Embedding parameters: the basis, the strength, and box bounds for the
/// non-fingerprint coordinates taken from the empirical latent sample.
#[derive(Debug, Clone)]
pub struct FingerprintConfig<T> {
    pub basis: FingerprintBasis<T>,
    pub sigma: T,
    pub alpha_lower: Vec<T>,
    pub alpha_upper: Vec<T>,
}

/// Fractional widening applied to the empirical alpha intervals.
const BOUND_WIDENING: f64 = 0.05;

impl<T: Scalar> FingerprintConfig<T> {
    /// Derive alpha bounds from the exact sample set behind `stats`
    /// (per-coordinate min/max, widened by 5% about the midpoint).
    pub fn derive(
        handle: &Generator<T>,
        stats: &LatentStats<T>,
        basis: FingerprintBasis<T>,
        sigma: T,
    ) -> Result<Self, ConfigError> {
        if !(sigma > T::zero()) {
            return Err(ConfigError::BadSigma(sigma.to_f64_lossy()));
        }
        let samples = stats.regenerate_samples(handle)?;
        let d_alpha = basis.u.cols();
        let mut lower = vec![T::infinity(); d_alpha];
        let mut upper = vec![T::neg_infinity(); d_alpha];
        let mut centered = vec![T::zero(); basis.d_w()];
        for s in &samples {
            for (c, (&si, &mi)) in centered.iter_mut().zip(s.iter().zip(&basis.mean)) {
                *c = si - mi;
            }
            let alpha = basis.u.t_matvec(&centered);
            for k in 0..d_alpha {
                lower[k] = lower[k].min(alpha[k]);
                upper[k] = upper[k].max(alpha[k]);
            }
        }
        let widen = T::c(1.0 + BOUND_WIDENING);
        let half = T::c(0.5);
        for k in 0..d_alpha {
            let mid = (lower[k] + upper[k]) * half;
            let half_width = (upper[k] - lower[k]) * half * widen;
            lower[k] = mid - half_width;
            upper[k] = mid + half_width;
        }
        Ok(Self { basis, sigma, alpha_lower: lower, alpha_upper: upper })
    }

    /// Bounds-free construction (theory oracles that never constrain alpha).
    pub fn unbounded(basis: FingerprintBasis<T>, sigma: T) -> Result<Self, ConfigError> {
        if !(sigma > T::zero()) {
            return Err(ConfigError::BadSigma(sigma.to_f64_lossy()));
        }
        let d_alpha = basis.u.cols();
        Ok(Self {
            basis,
            sigma,
            alpha_lower: vec![T::neg_infinity(); d_alpha],
            alpha_upper: vec![T::infinity(); d_alpha],
        })
    }

    pub fn d_phi(&self) -> usize {
        self.basis.d_phi()
    }

    pub fn d_alpha(&self) -> usize {
        self.basis.u.cols()
    }
}

/// `alpha = Uᵀ (w - mean)`.
pub fn project_alpha<T: Scalar>(
    cfg: &FingerprintConfig<T>,
    w: &LatentSample<T>,
) -> Result<Vec<T>, ConfigError> {
    if w.w.len() != cfg.basis.d_w() {
        return Err(ConfigError::Dimension { expected: cfg.basis.d_w(), got: w.w.len() });
    }
    let centered: Vec<T> = w.w.iter().zip(&cfg.basis.mean).map(|(&wi, &mi)| wi - mi).collect();
    Ok(cfg.basis.u.t_matvec(&centered))
}

/// Scaled-key readout `Vᵀ (w - mean) / sigma` (exact on embedded latents).
pub fn read_key_coordinates<T: Scalar>(cfg: &FingerprintConfig<T>, w: &[T]) -> Vec<T> {
    let centered: Vec<T> = w.iter().zip(&cfg.basis.mean).map(|(&wi, &mi)| wi - mi).collect();
    cfg.basis
        .v
        .t_matvec(&centered)
        .into_iter()
        .map(|c| c / cfg.sigma)
        .collect()
}

/// `w = mean + U alpha + sigma V phi`.
pub fn embed<T: Scalar>(
    cfg: &FingerprintConfig<T>,
    alpha: &[T],
    key: &Key,
) -> Result<LatentSample<T>, ConfigError> {
    if alpha.len() != cfg.d_alpha() {
        return Err(ConfigError::Dimension { expected: cfg.d_alpha(), got: alpha.len() });
    }
    if key.d_phi() != cfg.d_phi() {
        return Err(ConfigError::KeyDimension { expected: cfg.d_phi(), got: key.d_phi() });
    }
    Ok(LatentSample { w: embed_relaxed(cfg, alpha, &key_to_scalars(key)), source: LatentSource::Fingerprinted })
}

/// Embedding with a real-valued (relaxed) key vector; used by the decoder.
pub fn embed_relaxed<T: Scalar>(cfg: &FingerprintConfig<T>, alpha: &[T], phi: &[T]) -> Vec<T> {
    debug_assert_eq!(alpha.len(), cfg.d_alpha());
    debug_assert_eq!(phi.len(), cfg.d_phi());
    let mut w = cfg.basis.mean.clone();
    let ua = cfg.basis.u.matvec(alpha);
    for (wi, &ui) in w.iter_mut().zip(&ua) {
        *wi = *wi + ui;
    }
    let vphi = cfg.basis.v.matvec(phi);
    for (wi, &vi) in w.iter_mut().zip(&vphi) {
        *wi = *wi + cfg.sigma * vi;
    }
    w
}

pub fn key_to_scalars<T: Scalar>(key: &Key) -> Vec<T> {
    key.bits.iter().map(|&b| T::c(f64::from(b))).collect()
}

/// Full pipeline: `z -> psi -> project -> embed -> g`.
pub fn generate_fingerprinted<T: Scalar>(
    handle: &Generator<T>,
    cfg: &FingerprintConfig<T>,
    z: &[T],
    key: &Key,
) -> Result<ImageGrid<T>, ConfigError> {
    let w = handle.map_latent(z)?;
    let alpha = project_alpha(cfg, &w)?;
    let embedded = embed(cfg, &alpha, key)?;
    Ok(handle.evaluate(&embedded.w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_model::{build_generator, pixel_distance, GeneratorSpec};
    use crate::linalg::norm2;
    use crate::rng::normal_vec;
    use crate::spectral::{estimate_stats, select_basis};
    use proptest::prelude::*;

    fn setup(pc_lo: usize, pc_hi: usize, sigma: f64) -> (crate::latent_model::Generator<f64>, FingerprintConfig<f64>) {
        let g = build_generator(&GeneratorSpec::default_desk_scale(1)).unwrap();
        let stats = estimate_stats(&g, 2000, 71).unwrap();
        let basis = select_basis(&stats, pc_lo, pc_hi).unwrap();
        let cfg = FingerprintConfig::derive(&g, &stats, basis, sigma).unwrap();
        (g, cfg)
    }

    #[test]
    fn exhaustive_one_bit_registry() {
        let reg = sample_keys(1, 2, 3).unwrap();
        let mut bits: Vec<u8> = reg.entries.iter().map(|k| k.bits[0]).collect();
        bits.sort_unstable();
        assert_eq!(bits, vec![0, 1]);
    }

    #[test]
    fn thousand_keys_are_distinct_and_reproducible() {
        let reg = sample_keys(64, 1000, 5).unwrap();
        assert_eq!(reg.len(), 1000);
        let set: HashSet<&Vec<u8>> = reg.entries.iter().map(|k| &k.bits).collect();
        assert_eq!(set.len(), 1000);
        let again = sample_keys(64, 1000, 5).unwrap();
        assert_eq!(reg.entries, again.entries);
    }

    #[test]
    fn capacity_is_enforced() {
        assert!(matches!(
            sample_keys(2, 5, 1),
            Err(KeyError::CapacityExceeded { d_phi: 2, count: 5 })
        ));
        assert!(sample_keys(2, 4, 1).is_ok());
    }

    #[test]
    fn hex_round_trip_and_bit_order() {
        let key = Key::new(vec![1, 0, 1, 1, 0], 0).unwrap();
        // bits 10110 pad to 10110000 -> 0xB0
        assert_eq!(key.to_hex(), "b0");
        let back = Key::from_hex("b0", 5, 0).unwrap();
        assert_eq!(back.bits, key.bits);
    }

    #[test]
    fn registry_file_round_trips() {
        let reg = sample_keys(16, 20, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.txt");
        reg.save(&path).unwrap();
        let loaded = KeyRegistry::load(&path).unwrap();
        assert_eq!(loaded.d_phi, 16);
        assert_eq!(loaded.seed, 9);
        assert_eq!(loaded.entries, reg.entries);
    }

    #[test]
    fn projection_fixed_points() {
        let (_, cfg) = setup(48, 64, 1.0);
        let mean_sample = LatentSample { w: cfg.basis.mean.clone(), source: LatentSource::SyntheticGaussian };
        let alpha = project_alpha(&cfg, &mean_sample).unwrap();
        assert!(norm2(&alpha) < 1e-12);

        // w = mean + U e_k
        let k = 7;
        let mut w = cfg.basis.mean.clone();
        let col = cfg.basis.u.col(k);
        for (wi, &ci) in w.iter_mut().zip(&col) {
            *wi += ci;
        }
        let alpha = project_alpha(
            &cfg,
            &LatentSample { w, source: LatentSource::SyntheticGaussian },
        )
        .unwrap();
        for (idx, &a) in alpha.iter().enumerate() {
            let expected = if idx == k { 1.0 } else { 0.0 };
            assert!((a - expected).abs() < 1e-10);
        }

        // Fingerprint directions are invisible to alpha.
        let key = Key::new(vec![1; 16], 0).unwrap();
        let w = embed(&cfg, &vec![0.0; cfg.d_alpha()], &key).unwrap();
        let alpha = project_alpha(&cfg, &w).unwrap();
        assert!(norm2(&alpha) < 1e-10);
    }

    #[test]
    fn embed_round_trip_recovers_alpha_and_key() {
        let (g, cfg) = setup(48, 64, 1.0);
        let z = normal_vec::<f64, _>(&mut crate::rng::substream(11, 0), 32);
        let w = g.map_latent(&z).unwrap();
        let alpha = project_alpha(&cfg, &w).unwrap();
        let key = sample_keys(16, 1, 4).unwrap().entries[0].clone();
        let embedded = embed(&cfg, &alpha, &key).unwrap();
        let alpha_back = project_alpha(&cfg, &embedded).unwrap();
        for (a, b) in alpha.iter().zip(&alpha_back) {
            assert!((a - b).abs() <= 1e-10);
        }
        let phi_back = read_key_coordinates(&cfg, &embedded.w);
        for (p, &bit) in phi_back.iter().zip(&key.bits) {
            assert!((p - f64::from(bit)).abs() <= 1e-10);
        }
    }

    #[test]
    fn perturbation_norm_is_sigma_times_key_norm() {
        let (_, cfg) = setup(48, 64, 0.7);
        let key = Key::new(
            (0..16).map(|i| u8::from(i % 3 == 0)).collect(),
            0,
        )
        .unwrap();
        let alpha: Vec<f64> = (0..cfg.d_alpha()).map(|i| (i as f64) * 0.01).collect();
        let with_key = embed(&cfg, &alpha, &key).unwrap();
        let zero_key = Key::new(vec![0; 16], 1).unwrap();
        let without = embed(&cfg, &alpha, &zero_key).unwrap();
        let diff = norm2(&crate::linalg::sub_vec(&with_key.w, &without.w));
        let expected = 0.7 * (key.bits.iter().filter(|&&b| b == 1).count() as f64).sqrt();
        assert!((diff - expected).abs() <= 1e-10);
    }

    #[test]
    fn zero_key_image_stays_close_to_original() {
        // Dropping the minor-component content moves pixels very little on
        // the default generator. Bound measured once and pinned.
        let (g, cfg) = setup(48, 64, 1.0);
        let mut max_diff = 0.0f64;
        let zero_key = Key::new(vec![0; 16], 0).unwrap();
        for t in 0..10 {
            let z = normal_vec::<f64, _>(&mut crate::rng::substream(21, t), 32);
            let plain = g.evaluate(&g.map_latent(&z).unwrap().w).unwrap();
            let dropped = generate_fingerprinted(&g, &cfg, &z, &zero_key).unwrap();
            let d = plain
                .pixels
                .iter()
                .zip(&dropped.pixels)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            max_diff = max_diff.max(d);
        }
        assert!(max_diff <= 0.12, "pixelwise max difference {max_diff}");
    }

    #[test]
    fn generation_is_deterministic_and_lipschitz_in_key() {
        let (g, cfg) = setup(48, 64, 1.0);
        let z = normal_vec::<f64, _>(&mut crate::rng::substream(22, 0), 32);
        let key_a = Key::new(vec![0; 16], 0).unwrap();
        let mut bits = vec![0u8; 16];
        bits[3] = 1;
        let key_b = Key::new(bits, 1).unwrap();
        let img_a1 = generate_fingerprinted(&g, &cfg, &z, &key_a).unwrap();
        let img_a2 = generate_fingerprinted(&g, &cfg, &z, &key_a).unwrap();
        assert_eq!(img_a1.pixels, img_a2.pixels);
        let img_b = generate_fingerprinted(&g, &cfg, &z, &key_b).unwrap();
        assert_ne!(img_a1.pixels, img_b.pixels);
        // One flipped bit moves the latent by sigma along one V column.
        let w = g.map_latent(&z).unwrap();
        let alpha = project_alpha(&cfg, &w).unwrap();
        let w_a = embed(&cfg, &alpha, &key_a).unwrap().w;
        let col3 = cfg.basis.v.col(3);
        let delta: Vec<f64> = col3.iter().map(|&c| c * cfg.sigma).collect();
        let lip = g.segment_lipschitz(&w_a, &delta, 10).unwrap() * 1.05;
        assert!(pixel_distance(&img_b, &img_a1) <= lip * cfg.sigma);
    }

    #[test]
    fn bounds_strictly_cover_the_stats_sample_alphas() {
        let g = build_generator(&GeneratorSpec::default_desk_scale(1)).unwrap();
        let stats = estimate_stats(&g, 2000, 71).unwrap();
        let basis = select_basis(&stats, 48, 64).unwrap();
        let cfg = FingerprintConfig::derive(&g, &stats, basis, 1.0).unwrap();
        let samples = stats.regenerate_samples(&g).unwrap();
        for s in &samples {
            let alpha = project_alpha(
                &cfg,
                &LatentSample { w: s.clone(), source: LatentSource::MappedFromZ },
            )
            .unwrap();
            for (k, &a) in alpha.iter().enumerate() {
                // 5% widening leaves every empirical alpha strictly interior.
                assert!(a > cfg.alpha_lower[k] && a < cfg.alpha_upper[k]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        // Embedding is affine in alpha: embed(a1+a2, phi) - embed(a1, phi) = U a2.
        #[test]
        fn embedding_is_affine_in_alpha(seed in 0u64..1000) {
            let (_, cfg) = setup(56, 64, 1.0);
            let a1 = normal_vec::<f64, _>(&mut crate::rng::substream(seed, 0), cfg.d_alpha());
            let a2 = normal_vec::<f64, _>(&mut crate::rng::substream(seed, 1), cfg.d_alpha());
            let key = Key::new(vec![1, 0, 1, 0, 1, 0, 1, 0], 0).unwrap();
            let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
            let w_sum = embed(&cfg, &sum, &key).unwrap().w;
            let w_a1 = embed(&cfg, &a1, &key).unwrap().w;
            let ua2 = cfg.basis.u.matvec(&a2);
            for i in 0..w_sum.len() {
                prop_assert!((w_sum[i] - w_a1[i] - ua2[i]).abs() <= 1e-12);
            }
        }
    }
}
