//! Postprocess-robust weighted metric trained on ranking triplets.
//!
//! Each triplet holds a reference image, its fingerprinted version `p0`, and
//! a postprocessed version `p1`. Training pushes the metric to rank `p1`
//! closer to the reference than `p0`, so decoding becomes more sensitive to
//! fingerprints than to the trained-against attacks.

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::fingerprint::{generate_fingerprinted, ConfigError, FingerprintConfig};
use crate::latent_model::Generator;
use crate::metrics::{block_dct_energy, FeatureTransform, MetricError, MetricHandle};
use crate::postprocess::{apply, PostprocessError, PostprocessSpec};
use crate::rng::{normal_vec, substream, uniform01};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum RobustTrainingError {
    #[error("attack set is empty")]
    EmptyAttackSet,
    #[error("all {0} triplets were degenerate")]
    AllDegenerate(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Eval(#[from] crate::latent_model::EvalError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Training hyperparameters; defaults match the production configuration.
#[derive(Debug, Clone)]
pub struct RobustTraining<T> {
    pub margin: T,
    pub learning_rate: T,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of triplets held out for the ranking check.
    pub holdout_fraction: f64,
}

impl<T: Scalar> Default for RobustTraining<T> {
    fn default() -> Self {
        Self {
            margin: T::c(0.1),
            learning_rate: T::c(0.5),
            epochs: 150,
            batch_size: 16,
            holdout_fraction: 0.25,
        }
    }
}

/// Trained metric plus its held-out ranking score.
#[derive(Debug, Clone)]
pub struct TrainedMetric<T> {
    pub handle: MetricHandle<T>,
    /// Fraction of held-out triplets ranked correctly (`d(x,p1) < d(x,p0)`).
    pub holdout_ranking_accuracy: T,
    pub triplets_used: usize,
    pub triplets_skipped: usize,
}

struct Triplet<T> {
    /// Per-frequency energy of (p0 - x): the fingerprint footprint.
    fingerprint: Vec<T>,
    /// Per-frequency energy of (p1 - x): the attack footprint.
    attack: Vec<T>,
}

/// Learn nonnegative per-frequency weights by margin ranking over
/// blockwise-DCT energies. Deterministic given the seed.
pub fn train_robust_metric<T: Scalar>(
    handle: &Generator<T>,
    cfg: &FingerprintConfig<T>,
    attack_set: &[PostprocessSpec<T>],
    n_triplets: usize,
    rng_seed: u64,
    training: &RobustTraining<T>,
) -> Result<TrainedMetric<T>, RobustTrainingError> {
    if attack_set.is_empty() {
        return Err(RobustTrainingError::EmptyAttackSet);
    }
    let range = handle.output_range();
    let d_phi = cfg.d_phi();
    let mut triplets = Vec::with_capacity(n_triplets);
    let mut skipped = 0usize;
    for t in 0..n_triplets {
        let mut rng = substream(rng_seed, t as u64);
        let z = normal_vec::<T, _>(&mut rng, handle.d_z());
        let reference = handle.evaluate(&handle.map_latent(&z)?.w)?;
        let bits: Vec<u8> = (0..d_phi)
            .map(|_| u8::from(uniform01::<T, _>(&mut rng) < T::c(0.5)))
            .collect();
        let key = crate::fingerprint::Key::new(bits, t).expect("bits are binary");
        let p0 = generate_fingerprinted(handle, cfg, &z, &key)?;
        let attack = &attack_set[t % attack_set.len()];
        let p1 = apply(attack, &reference, range, rng_seed ^ (t as u64).wrapping_mul(0x9e37))?;
        if p0.pixels == p1.pixels {
            skipped += 1;
            continue;
        }
        triplets.push(Triplet {
            fingerprint: block_dct_energy(&p0, &reference)?,
            attack: block_dct_energy(&p1, &reference)?,
        });
    }
    if triplets.is_empty() {
        return Err(RobustTrainingError::AllDegenerate(n_triplets));
    }

    let n_features = triplets[0].fingerprint.len();
    let holdout = ((triplets.len() as f64) * training.holdout_fraction).round() as usize;
    let train_n = triplets.len() - holdout.min(triplets.len().saturating_sub(1));
    let (train_set, holdout_set) = triplets.split_at(train_n);

    let mut weights = vec![T::one(); n_features];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = substream(rng_seed, 0xffff_0000);
    let batch = training.batch_size.max(1);
    for _epoch in 0..training.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch) {
            let mut grad = vec![T::zero(); n_features];
            let mut active = 0usize;
            for &idx in chunk {
                let trip = &train_set[idx];
                accumulate_hinge_gradient(&weights, trip, training.margin, &mut grad, &mut active);
            }
            if active == 0 {
                continue;
            }
            let scale = training.learning_rate / T::from_usize_lossy(active);
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w = (*w - scale * *g).max(T::zero());
            }
            normalize_mean(&mut weights);
        }
    }

    let eval_set = if holdout_set.is_empty() { train_set } else { holdout_set };
    let correct = eval_set
        .iter()
        .filter(|t| ranking_margin(&weights, t) > T::zero())
        .count();
    let holdout_ranking_accuracy =
        T::from_usize_lossy(correct) / T::from_usize_lossy(eval_set.len());
    let handle = MetricHandle::weighted(weights, FeatureTransform::BlockDct)?;
    Ok(TrainedMetric {
        handle,
        holdout_ranking_accuracy,
        triplets_used: triplets.len(),
        triplets_skipped: skipped,
    })
}

/// `d0 - d1` where `d0` is the fingerprint distance; positive means correct
/// ranking (attack closer than fingerprint).
fn ranking_margin<T: Scalar>(weights: &[T], trip: &Triplet<T>) -> T {
    let d0 = crate::linalg::dot(weights, &trip.fingerprint);
    let d1 = crate::linalg::dot(weights, &trip.attack);
    d0 - d1
}

fn accumulate_hinge_gradient<T: Scalar>(
    weights: &[T],
    trip: &Triplet<T>,
    margin: T,
    grad: &mut [T],
    active: &mut usize,
) {
    let d0 = crate::linalg::dot(weights, &trip.fingerprint);
    let d1 = crate::linalg::dot(weights, &trip.attack);
    let eps = T::c(1e-12);
    let total = d0 + d1 + eps;
    let ratio = (d0 - d1) / total;
    if ratio >= margin {
        return;
    }
    *active += 1;
    // d ratio / d w_f = ((a_f - b_f) * total - (d0 - d1) * (a_f + b_f)) / total²
    // loss = margin - ratio, so the gradient is the negation.
    let diff = d0 - d1;
    let total2 = total * total;
    for f in 0..weights.len() {
        let a = trip.fingerprint[f];
        let b = trip.attack[f];
        let dr = ((a - b) * total - diff * (a + b)) / total2;
        grad[f] = grad[f] - dr;
    }
}

fn normalize_mean<T: Scalar>(weights: &mut [T]) {
    let mean = weights.iter().fold(T::zero(), |a, &b| a + b)
        / T::from_usize_lossy(weights.len());
    if mean > T::zero() {
        for w in weights.iter_mut() {
            *w = *w / mean;
        }
    } else {
        // Degenerate collapse; reset to uniform.
        for w in weights.iter_mut() {
            *w = T::one();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_model::{build_generator, GeneratorSpec};
    use crate::metrics::frequency_band_mean;
    use crate::postprocess::{strongest, AttackKind};
    use crate::spectral::{estimate_stats, select_basis};

    fn setup() -> (Generator<f64>, FingerprintConfig<f64>) {
        let g = build_generator(&GeneratorSpec::default_desk_scale(1)).unwrap();
        let stats = estimate_stats(&g, 1500, 71).unwrap();
        // Mid-range components at sigma 3: the regime where fingerprints are
        // strong enough for the 2AFC ranking to be learnable.
        let basis = select_basis(&stats, 32, 40).unwrap();
        let cfg = FingerprintConfig::derive(&g, &stats, basis, 3.0).unwrap();
        (g, cfg)
    }

    #[test]
    fn identity_attack_keeps_uniform_weights() {
        let (g, cfg) = setup();
        let attacks = vec![PostprocessSpec::<f64>::identity()];
        let trained =
            train_robust_metric(&g, &cfg, &attacks, 40, 5, &RobustTraining::default()).unwrap();
        match &trained.handle {
            MetricHandle::Weighted { weights, .. } => {
                for &w in weights {
                    assert!((w - 1.0).abs() < 1e-12, "weights must stay uniform, got {w}");
                }
            }
            MetricHandle::L2 => panic!("expected weighted"),
        }
        assert!(trained.holdout_ranking_accuracy >= 0.99);
    }

    #[test]
    fn noise_training_downweights_high_frequencies() {
        let (g, cfg) = setup();
        let attacks = vec![strongest::<f64>(AttackKind::Noising)];
        let trained =
            train_robust_metric(&g, &cfg, &attacks, 120, 7, &RobustTraining::default()).unwrap();
        let MetricHandle::Weighted { weights, .. } = &trained.handle else {
            panic!("expected weighted");
        };
        let low = frequency_band_mean(weights, 0, 2);
        let high = frequency_band_mean(weights, 10, 14);
        assert!(
            high < low,
            "high band {high} should fall below low band {low} after noise training"
        );
        assert!(trained.holdout_ranking_accuracy >= 0.8, "ranking {}", trained.holdout_ranking_accuracy);
    }

    #[test]
    fn empty_attack_set_is_rejected() {
        let (g, cfg) = setup();
        assert!(matches!(
            train_robust_metric(&g, &cfg, &[], 10, 1, &RobustTraining::default()),
            Err(RobustTrainingError::EmptyAttackSet)
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let (g, cfg) = setup();
        let attacks = vec![strongest::<f64>(AttackKind::Jpeg)];
        let a = train_robust_metric(&g, &cfg, &attacks, 60, 9, &RobustTraining::default()).unwrap();
        let b = train_robust_metric(&g, &cfg, &attacks, 60, 9, &RobustTraining::default()).unwrap();
        let (MetricHandle::Weighted { weights: wa, .. }, MetricHandle::Weighted { weights: wb, .. }) =
            (&a.handle, &b.handle)
        else {
            panic!("expected weighted");
        };
        assert_eq!(wa, wb);
    }
}
