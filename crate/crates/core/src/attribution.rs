//! Decoding fingerprints from images by penalized box-constrained
//! optimization with Latin-hypercube multi-start, plus the accuracy harness.
//!
//! The decoder minimizes `metric(g(mean + U a + sigma V p), target)` plus a
//! quadratic penalty outside the alpha bounds, over the relaxed pair
//! `(a, p)`. Each restart runs an independent sign-based optimizer with
//! per-parameter adaptive steps; a proposal is accepted only if it does not
//! increase the objective.

use rayon::prelude::*;
use thiserror::Error;

use crate::fingerprint::{embed_relaxed, project_alpha, FingerprintConfig, Key, KeyRegistry};
use crate::latent_model::{EvalError, Generator, ImageGrid};
use crate::linalg::{norm2, sub_vec, Mat};
use crate::metrics::{MetricError, MetricHandle};
use crate::postprocess::{apply, PostprocessError, PostprocessSpec};
use crate::rng::{normal_vec, stable_hash, substream, uniform01};
use crate::scalar::Scalar;
use rand::Rng;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("target shape does not match the generator output")]
    TargetShape,
    #[error("all {0} restarts diverged")]
    AllRestartsFailed(usize),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Config(#[from] crate::fingerprint::ConfigError),
    #[error("registry is empty")]
    EmptyRegistry,
}

/// Damped least-squares optimizer settings (monotone acceptance: a step is
/// taken only if it does not increase the objective).
#[derive(Debug, Clone)]
pub struct OptimizerSettings<T> {
    pub max_iters: usize,
    /// Relative improvement below which the run stops...
    pub rel_tol: f64,
    /// ...measured over this many iterations.
    pub patience: usize,
    /// Initial Marquardt damping (scaled by the normal-matrix diagonal).
    pub damping_init: T,
    pub damping_shrink: T,
    pub damping_grow: T,
    /// Damping raises per iteration before the restart is declared stuck.
    pub max_inner_retries: usize,
    /// Hard stop once the objective falls this far below its initial value.
    pub objective_floor_factor: T,
}

impl<T: Scalar> Default for OptimizerSettings<T> {
    fn default() -> Self {
        Self {
            max_iters: 80,
            rel_tol: 1e-9,
            patience: 6,
            damping_init: T::c(1.0),
            damping_shrink: T::c(3.0),
            damping_grow: T::c(4.0),
            max_inner_retries: 16,
            objective_floor_factor: T::c(1e-18),
        }
    }
}

/// One decoding task.
pub struct AttributionProblem<'a, T> {
    pub handle: &'a Generator<T>,
    pub cfg: &'a FingerprintConfig<T>,
    pub metric: &'a MetricHandle<T>,
    pub target: &'a ImageGrid<T>,
    pub restarts: usize,
    /// `None` scales the penalty from the data: `10 * f_init / width²`.
    pub penalty_weight: Option<T>,
    pub settings: OptimizerSettings<T>,
}

impl<'a, T: Scalar> AttributionProblem<'a, T> {
    pub fn new(
        handle: &'a Generator<T>,
        cfg: &'a FingerprintConfig<T>,
        metric: &'a MetricHandle<T>,
        target: &'a ImageGrid<T>,
    ) -> Self {
        Self {
            handle,
            cfg,
            metric,
            target,
            restarts: 20,
            penalty_weight: None,
            settings: OptimizerSettings::default(),
        }
    }
}

/// Decode output: relaxed and thresholded key, diagnostics per restart.
#[derive(Debug, Clone)]
pub struct AttributionResult<T> {
    pub alpha_hat: Vec<T>,
    pub phi_relaxed: Vec<T>,
    /// `phi_relaxed` thresholded at ½.
    pub phi_hat: Vec<u8>,
    pub residual: T,
    pub best_restart: usize,
    /// Final objective per restart; failed restarts hold `+inf`.
    pub per_restart_residuals: Vec<T>,
    pub restarts_failed: usize,
    /// Iterations used by the winning restart.
    pub iterations_used: usize,
    /// Max distance of `alpha_hat` outside the box constraints.
    pub constraint_violation: T,
    /// Filled post hoc by harnesses when ground truth is available.
    pub alpha_error: Option<T>,
}

pub fn threshold_bits<T: Scalar>(phi_relaxed: &[T]) -> Vec<u8> {
    phi_relaxed.iter().map(|&p| u8::from(p >= T::c(0.5))).collect()
}

/// Latin hypercube sample: `n` points, one per equal-width stratum in every
/// coordinate, jittered uniformly inside the stratum. Degenerate intervals
/// pin the coordinate. Deterministic given the seed.
pub fn lhs_initial_guesses<T: Scalar>(
    lower: &[T],
    upper: &[T],
    n: usize,
    rng_seed: u64,
) -> Vec<Vec<T>> {
    assert_eq!(lower.len(), upper.len());
    assert!(n >= 1);
    let d = lower.len();
    let mut points = vec![vec![T::zero(); d]; n];
    let n_t = T::from_usize_lossy(n);
    for j in 0..d {
        let mut rng = substream(rng_seed, j as u64);
        let width = upper[j] - lower[j];
        if width == T::zero() {
            for p in points.iter_mut() {
                p[j] = lower[j];
            }
            continue;
        }
        let mut strata: Vec<usize> = (0..n).collect();
        // Fisher-Yates
        for k in (1..n).rev() {
            let swap = rng.random_range(0..=k);
            strata.swap(k, swap);
        }
        for (i, p) in points.iter_mut().enumerate() {
            let jitter = uniform01::<T, _>(&mut rng);
            p[j] = lower[j] + width * (T::from_usize_lossy(strata[i]) + jitter) / n_t;
        }
    }
    points
}

struct RestartOutcome<T> {
    x: Vec<T>,
    objective: T,
    iterations: usize,
    failed: bool,
    history: Vec<T>,
}

/// Which block of parameters a stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActiveSet {
    All,
    AlphaOnly,
    PhiOnly,
}

struct ObjectiveParts<'a, T> {
    problem: &'a AttributionProblem<'a, T>,
    penalty: T,
    d_alpha: usize,
    active: ActiveSet,
}

impl<T: Scalar> ObjectiveParts<'_, T> {
    fn optimizes_alpha(&self) -> bool {
        self.active != ActiveSet::PhiOnly
    }

    fn optimizes_phi(&self) -> bool {
        self.active != ActiveSet::AlphaOnly
    }

    /// Index of the first free parameter within `x`.
    fn offset(&self) -> usize {
        if self.active == ActiveSet::PhiOnly {
            self.d_alpha
        } else {
            0
        }
    }

    fn free_params(&self) -> usize {
        let d_phi = self.problem.cfg.d_phi();
        match self.active {
            ActiveSet::All => self.d_alpha + d_phi,
            ActiveSet::AlphaOnly => self.d_alpha,
            ActiveSet::PhiOnly => d_phi,
        }
    }

    /// Objective value at `x = [alpha; phi]` (metric plus box penalty).
    /// The penalty is part of the objective whenever alpha is free anywhere
    /// in the decode, so stage values stay comparable.
    fn value(&self, x: &[T]) -> Option<T> {
        let cfg = self.problem.cfg;
        let (alpha, phi) = x.split_at(self.d_alpha);
        let w = embed_relaxed(cfg, alpha, phi);
        let img = self.problem.handle.evaluate(&w).ok()?;
        let mut value = self.problem.metric.value(&img, self.problem.target).ok()?;
        if self.active != ActiveSet::PhiOnly {
            value = value + self.penalty_value(alpha);
        }
        value.is_finite().then_some(value)
    }

    fn penalty_value(&self, alpha: &[T]) -> T {
        let cfg = self.problem.cfg;
        let mut total = T::zero();
        for k in 0..self.d_alpha {
            let v = self.violation(alpha[k], cfg.alpha_lower[k], cfg.alpha_upper[k]);
            total = total + self.penalty * v * v;
        }
        total
    }

    /// Signed violation: positive above the upper bound, negative below the
    /// lower bound, zero inside.
    fn violation(&self, a: T, lo: T, hi: T) -> T {
        if hi.is_finite() && a > hi {
            a - hi
        } else if lo.is_finite() && a < lo {
            a - lo
        } else {
            T::zero()
        }
    }

    /// Normal-equation system at `x`: value, `JᵀJ` over the free parameters,
    /// and `Jᵀr` (half the gradient), where the objective is `‖r‖²` with the
    /// penalty folded in as extra residual rows.
    fn normal_system(&self, x: &[T]) -> Option<(T, Mat<T>, Vec<T>)> {
        let cfg = self.problem.cfg;
        let handle = self.problem.handle;
        let metric = self.problem.metric;
        let (alpha, phi) = x.split_at(self.d_alpha);
        let w = embed_relaxed(cfg, alpha, phi);
        let img = handle.evaluate(&w).ok()?;
        let r = metric.residuals(&img, self.problem.target).ok()?;
        let mut value = r.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b);
        if !value.is_finite() {
            return None;
        }
        let j_w = handle.jacobian(&w).ok()?;
        // Latent-space tangents of the free parameters: U columns when alpha
        // is active, then sigma * V columns when phi is active.
        let n_free = self.free_params();
        let mut jr_cols: Vec<Vec<T>> = Vec::with_capacity(n_free);
        if self.optimizes_alpha() {
            for k in 0..self.d_alpha {
                let col = j_w.matvec(&cfg.basis.u.col(k));
                jr_cols.push(metric.residual_tangent(&img, &col).ok()?);
            }
        }
        if self.optimizes_phi() {
            for k in 0..cfg.d_phi() {
                let col: Vec<T> =
                    j_w.matvec(&cfg.basis.v.col(k)).into_iter().map(|v| v * cfg.sigma).collect();
                jr_cols.push(metric.residual_tangent(&img, &col).ok()?);
            }
        }
        let mut normal = Mat::zeros(n_free, n_free);
        let mut jtr = vec![T::zero(); n_free];
        for i in 0..n_free {
            jtr[i] = crate::linalg::dot(&jr_cols[i], &r);
            for j in i..n_free {
                let v = crate::linalg::dot(&jr_cols[i], &jr_cols[j]);
                normal[(i, j)] = v;
                normal[(j, i)] = v;
            }
        }
        if self.active != ActiveSet::PhiOnly {
            // Penalty enters the objective whenever alpha participates; its
            // residual rows (sqrt(lambda) * violation) only shape the system
            // when alpha is active.
            for k in 0..self.d_alpha {
                let v = self.violation(alpha[k], cfg.alpha_lower[k], cfg.alpha_upper[k]);
                value = value + self.penalty * v * v;
                if self.optimizes_alpha() && v != T::zero() {
                    normal[(k, k)] = normal[(k, k)] + self.penalty;
                    jtr[k] = jtr[k] + self.penalty * v;
                }
            }
        }
        if !value.is_finite()
            || jtr.iter().any(|g| !g.is_finite())
            || !normal.is_finite()
        {
            return None;
        }
        Some((value, normal, jtr))
    }
}

/// One damped least-squares restart. Steps are accepted only when they do
/// not increase the objective; rejected steps raise the damping. `step_caps`
/// bounds each parameter's per-iteration move (the whole step is rescaled if
/// any coordinate exceeds its cap) and `iterate_box` confines the search to
/// a widened region around plausible solutions, keeping the iterate out of
/// the saturated far field.
fn run_restart<T: Scalar>(
    parts: &ObjectiveParts<'_, T>,
    x0: Vec<T>,
    step_caps: &[T],
    iterate_box: &[(T, T)],
    settings: &OptimizerSettings<T>,
) -> RestartOutcome<T> {
    let mut x = x0;
    let failed = |x: Vec<T>| RestartOutcome {
        x,
        objective: T::infinity(),
        iterations: 0,
        failed: true,
        history: vec![],
    };
    let Some(mut value) = parts.value(&x) else {
        return failed(x);
    };
    let floor = value * settings.objective_floor_factor;
    let mut history = vec![value];
    let mut damping = settings.damping_init;
    let n_free = parts.free_params();
    let offset = parts.offset();
    let rel_tol = T::c(settings.rel_tol);
    let mut iterations = 0;
    'outer: for iter in 0..settings.max_iters {
        iterations = iter + 1;
        let Some((current, normal, jtr)) = parts.normal_system(&x) else {
            return failed(x);
        };
        value = current;
        // Marquardt scaling: damp relative to the normal diagonal.
        let diag_scale: Vec<T> = (0..n_free)
            .map(|k| normal[(k, k)].max(T::c(1e-12)))
            .collect();
        let mut accepted = false;
        for _retry in 0..settings.max_inner_retries {
            let mut damped = normal.clone();
            for k in 0..n_free {
                damped[(k, k)] = damped[(k, k)] + damping * diag_scale[k];
            }
            let rhs: Vec<T> = jtr.iter().map(|&g| -g).collect();
            let Ok(mut step) = crate::linalg::solve(&damped, &rhs) else {
                damping = damping * settings.damping_grow;
                continue;
            };
            let mut scale = T::one();
            for (k, &s) in step.iter().enumerate() {
                if s.abs() > step_caps[k] {
                    scale = scale.min(step_caps[k] / s.abs());
                }
            }
            if scale < T::one() {
                for s in step.iter_mut() {
                    *s = *s * scale;
                }
            }
            let mut candidate = x.clone();
            for (k, &s) in step.iter().enumerate() {
                let (lo, hi) = iterate_box[k];
                candidate[offset + k] = (candidate[offset + k] + s).max(lo).min(hi);
            }
            match parts.value(&candidate) {
                Some(new_value) if new_value <= value => {
                    x = candidate;
                    value = new_value;
                    damping = (damping / settings.damping_shrink).max(T::c(1e-12));
                    accepted = true;
                    break;
                }
                _ => {
                    damping = damping * settings.damping_grow;
                }
            }
        }
        history.push(value);
        if !accepted || value <= floor {
            break 'outer;
        }
        if history.len() > settings.patience {
            let before = history[history.len() - 1 - settings.patience];
            if before - value <= rel_tol * before.abs().max(T::c(1e-30)) {
                break 'outer;
            }
        }
    }
    RestartOutcome { x, objective: value, iterations, failed: false, history }
}

fn decode_inner<T: Scalar>(
    problem: &AttributionProblem<'_, T>,
    rng_seed: u64,
    frozen_alpha: Option<&[T]>,
) -> Result<AttributionResult<T>, DecodeError> {
    let handle = problem.handle;
    let cfg = problem.cfg;
    let spec = handle.spec();
    if problem.target.channels != spec.channels
        || problem.target.height != spec.image_h
        || problem.target.width != spec.image_w
    {
        return Err(DecodeError::TargetShape);
    }
    let d_alpha = cfg.d_alpha();
    let d_phi = cfg.d_phi();

    // Initialization box: bound coordinates, or a default box where bounds
    // are infinite.
    let init_lower: Vec<T> = cfg
        .alpha_lower
        .iter()
        .map(|&l| if l.is_finite() { l } else { T::c(-3.0) })
        .collect();
    let init_upper: Vec<T> = cfg
        .alpha_upper
        .iter()
        .map(|&u| if u.is_finite() { u } else { T::c(3.0) })
        .collect();
    let restarts = problem.restarts.max(1);
    let alpha_starts = lhs_initial_guesses(&init_lower, &init_upper, restarts, rng_seed);

    let half = T::c(0.5);
    let mean_width = {
        let mut total = T::zero();
        for k in 0..d_alpha {
            let w = init_upper[k] - init_lower[k];
            total = total + w;
        }
        if d_alpha == 0 {
            T::one()
        } else {
            (total / T::from_usize_lossy(d_alpha)).max(T::c(1e-9))
        }
    };
    let penalty = problem.penalty_weight.unwrap_or_else(|| {
        // 10 * (initial objective) / (mean bound width)²
        let phi0 = vec![half; d_phi];
        let alpha0 = frozen_alpha.map(<[T]>::to_vec).unwrap_or_else(|| alpha_starts[0].clone());
        let w = embed_relaxed(cfg, &alpha0, &phi0);
        let f0 = handle
            .evaluate(&w)
            .ok()
            .and_then(|img| problem.metric.value(&img, problem.target).ok())
            .unwrap_or(T::one());
        T::c(10.0) * f0 / (mean_width * mean_width)
    });

    // Per-iteration caps (trust region) and a widened search box. The box
    // extends half a width beyond the alpha bounds and generously brackets
    // the binary key range; legitimate solutions sit well inside.
    let mut step_caps: Vec<T> = Vec::with_capacity(d_alpha + d_phi);
    let mut iterate_box: Vec<(T, T)> = Vec::with_capacity(d_alpha + d_phi);
    for k in 0..d_alpha {
        let width = (init_upper[k] - init_lower[k]).max(T::c(1e-6));
        step_caps.push(width * T::c(0.2));
        iterate_box.push((init_lower[k] - width * half, init_upper[k] + width * half));
    }
    step_caps.extend(std::iter::repeat_n(T::c(0.25), d_phi));
    iterate_box.extend(std::iter::repeat_n((T::c(-2.0), T::c(3.0)), d_phi));

    let outcomes: Vec<RestartOutcome<T>> = (0..restarts)
        .into_par_iter()
        .map(|r| match frozen_alpha {
            Some(alpha) => {
                // Oracle mode: alpha pinned, only the relaxed key moves.
                let parts = ObjectiveParts { problem, penalty, d_alpha, active: ActiveSet::PhiOnly };
                let mut x0 = alpha.to_vec();
                x0.extend(std::iter::repeat_n(half, d_phi));
                run_restart(
                    &parts,
                    x0,
                    &step_caps[d_alpha..],
                    &iterate_box[d_alpha..],
                    &problem.settings,
                )
            }
            None => {
                // Stage 1 localizes alpha with the key parked at ½; stage 2
                // refines both blocks jointly from there. The objective is
                // identical in both stages, so the combined run stays
                // monotone.
                let mut x0 = alpha_starts[r].clone();
                x0.extend(std::iter::repeat_n(half, d_phi));
                let stage1_parts =
                    ObjectiveParts { problem, penalty, d_alpha, active: ActiveSet::AlphaOnly };
                let mut stage1_settings = problem.settings.clone();
                stage1_settings.max_iters = (problem.settings.max_iters / 2).max(10);
                let stage1 = run_restart(
                    &stage1_parts,
                    x0,
                    &step_caps[..d_alpha],
                    &iterate_box[..d_alpha],
                    &stage1_settings,
                );
                if stage1.failed {
                    return stage1;
                }
                let joint_parts =
                    ObjectiveParts { problem, penalty, d_alpha, active: ActiveSet::All };
                let mut joint = run_restart(
                    &joint_parts,
                    stage1.x.clone(),
                    &step_caps,
                    &iterate_box,
                    &problem.settings,
                );
                joint.iterations += stage1.iterations;
                let mut history = stage1.history;
                history.extend(joint.history.iter().skip(1).copied());
                joint.history = history;
                joint
            }
        })
        .collect();

    let per_restart_residuals: Vec<T> = outcomes
        .iter()
        .map(|o| if o.failed { T::infinity() } else { o.objective })
        .collect();
    let restarts_failed = outcomes.iter().filter(|o| o.failed).count();
    let best_restart = per_restart_residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_finite())
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite residuals"))
        .map(|(i, _)| i)
        .ok_or(DecodeError::AllRestartsFailed(restarts))?;
    let best = &outcomes[best_restart];
    let (alpha_hat, phi_relaxed) = best.x.split_at(d_alpha);
    let mut violation = T::zero();
    for k in 0..d_alpha {
        if cfg.alpha_upper[k].is_finite() {
            violation = violation.max(alpha_hat[k] - cfg.alpha_upper[k]);
        }
        if cfg.alpha_lower[k].is_finite() {
            violation = violation.max(cfg.alpha_lower[k] - alpha_hat[k]);
        }
    }
    Ok(AttributionResult {
        alpha_hat: alpha_hat.to_vec(),
        phi_relaxed: phi_relaxed.to_vec(),
        phi_hat: threshold_bits(phi_relaxed),
        residual: best.objective,
        best_restart,
        per_restart_residuals,
        restarts_failed,
        iterations_used: best.iterations,
        constraint_violation: violation.max(T::zero()),
        alpha_error: None,
    })
}

/// Run the multi-start decode. Deterministic given `(problem, rng_seed)`.
pub fn decode<T: Scalar>(
    problem: &AttributionProblem<'_, T>,
    rng_seed: u64,
) -> Result<AttributionResult<T>, DecodeError> {
    decode_inner(problem, rng_seed, None)
}

/// Decode with the alpha coordinates pinned to a given value; only the
/// relaxed key is optimized. Oracle entry point for error analysis.
pub fn decode_with_frozen_alpha<T: Scalar>(
    problem: &AttributionProblem<'_, T>,
    alpha: &[T],
    rng_seed: u64,
) -> Result<AttributionResult<T>, DecodeError> {
    decode_inner(problem, rng_seed, Some(alpha))
}

/// One row of the decode log.
#[derive(Debug, Clone)]
pub struct DecodeLogRow<T> {
    pub key_id: usize,
    pub seed_index: usize,
    pub postprocess: String,
    pub bit_accuracy: T,
    pub exact_match: bool,
    pub residual: T,
    pub alpha_err_norm: T,
    pub restarts_failed: usize,
}

impl<T: Scalar> DecodeLogRow<T> {
    pub const CSV_HEADER: &'static str =
        "key_id,seed_index,postprocess,bit_accuracy,exact_match,residual,alpha_err_norm,restarts_failed";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.key_id,
            self.seed_index,
            self.postprocess,
            self.bit_accuracy,
            u8::from(self.exact_match),
            self.residual,
            self.alpha_err_norm,
            self.restarts_failed
        )
    }
}

/// Aggregated attribution accuracy over a registry.
#[derive(Debug, Clone)]
pub struct AccuracyReport<T> {
    /// Mean exact-match rate (the attribution accuracy).
    pub overall_accuracy: T,
    pub per_key_accuracy: Vec<T>,
    pub mean_bit_accuracy: T,
    pub mean_alpha_error: T,
    pub rows: Vec<DecodeLogRow<T>>,
}

/// What a decoder returns for one trial; `None` counts as misattribution.
#[derive(Debug, Clone)]
pub struct DecodedTrial<T> {
    pub phi_hat: Vec<u8>,
    pub alpha_hat: Option<Vec<T>>,
    pub residual: T,
    pub restarts_failed: usize,
}

/// Context handed to a decoder for one trial.
pub struct TrialContext<'a, T> {
    pub key: &'a Key,
    pub seed_index: usize,
    pub target: &'a ImageGrid<T>,
    pub alpha_true: &'a [T],
    pub trial_seed: u64,
}

/// Accuracy harness with an injectable decoder (used to sanity-check the
/// harness itself with echo and random-guess decoders).
pub fn evaluate_accuracy_with<T: Scalar, F>(
    handle: &Generator<T>,
    cfg: &FingerprintConfig<T>,
    registry: &KeyRegistry,
    n_seeds: usize,
    postprocess: Option<&PostprocessSpec<T>>,
    rng_seed: u64,
    decoder: F,
) -> Result<AccuracyReport<T>, DecodeError>
where
    F: Fn(&TrialContext<'_, T>) -> Option<DecodedTrial<T>> + Sync,
{
    if registry.is_empty() {
        return Err(DecodeError::EmptyRegistry);
    }
    let jobs: Vec<(usize, usize)> = (0..registry.len())
        .flat_map(|k| (0..n_seeds).map(move |s| (k, s)))
        .collect();
    let attack_desc = postprocess.map_or_else(|| "identity".to_string(), PostprocessSpec::describe);
    let rows: Result<Vec<DecodeLogRow<T>>, DecodeError> = jobs
        .par_iter()
        .map(|&(key_idx, seed_index)| {
            let key = &registry.entries[key_idx];
            let trial_seed =
                stable_hash(&[rng_seed, key.id as u64, seed_index as u64, 0x7261_6c]);
            let z = normal_vec::<T, _>(&mut substream(trial_seed, 0), handle.d_z());
            let w = handle.map_latent(&z)?;
            let alpha_true = project_alpha(cfg, &w)?;
            let clean = crate::fingerprint::generate_fingerprinted(handle, cfg, &z, key)?;
            let target = match postprocess {
                Some(spec) => apply(spec, &clean, handle.output_range(), trial_seed ^ 0x5eed)?,
                None => clean,
            };
            let ctx = TrialContext {
                key,
                seed_index,
                target: &target,
                alpha_true: &alpha_true,
                trial_seed,
            };
            let decoded = decoder(&ctx);
            let row = match decoded {
                Some(trial) => {
                    let exact = trial.phi_hat == key.bits;
                    let matching = trial
                        .phi_hat
                        .iter()
                        .zip(&key.bits)
                        .filter(|(a, b)| a == b)
                        .count();
                    let bit_accuracy =
                        T::from_usize_lossy(matching) / T::from_usize_lossy(key.bits.len().max(1));
                    let alpha_err = trial
                        .alpha_hat
                        .as_ref()
                        .map_or(T::nan(), |a| norm2(&sub_vec(a, &alpha_true)));
                    DecodeLogRow {
                        key_id: key.id,
                        seed_index,
                        postprocess: attack_desc.clone(),
                        bit_accuracy,
                        exact_match: exact,
                        residual: trial.residual,
                        alpha_err_norm: alpha_err,
                        restarts_failed: trial.restarts_failed,
                    }
                }
                None => DecodeLogRow {
                    key_id: key.id,
                    seed_index,
                    postprocess: attack_desc.clone(),
                    bit_accuracy: T::zero(),
                    exact_match: false,
                    residual: T::infinity(),
                    alpha_err_norm: T::nan(),
                    restarts_failed: 0,
                },
            };
            Ok(row)
        })
        .collect();
    let rows = rows?;
    let n = rows.len();
    let overall_accuracy = T::from_usize_lossy(rows.iter().filter(|r| r.exact_match).count())
        / T::from_usize_lossy(n);
    let mean_bit_accuracy =
        rows.iter().map(|r| r.bit_accuracy).fold(T::zero(), |a, b| a + b) / T::from_usize_lossy(n);
    let finite_alpha: Vec<T> = rows
        .iter()
        .map(|r| r.alpha_err_norm)
        .filter(|a| a.is_finite())
        .collect();
    let mean_alpha_error = if finite_alpha.is_empty() {
        T::nan()
    } else {
        finite_alpha.iter().fold(T::zero(), |a, &b| a + b)
            / T::from_usize_lossy(finite_alpha.len())
    };
    let per_key_accuracy = (0..registry.len())
        .map(|k| {
            let hits = rows[k * n_seeds..(k + 1) * n_seeds]
                .iter()
                .filter(|r| r.exact_match)
                .count();
            T::from_usize_lossy(hits) / T::from_usize_lossy(n_seeds)
        })
        .collect();
    Ok(AccuracyReport {
        overall_accuracy,
        per_key_accuracy,
        mean_bit_accuracy,
        mean_alpha_error,
        rows,
    })
}

/// Decoder settings for `evaluate_accuracy`.
#[derive(Debug, Clone)]
pub struct DecodeSettings<T> {
    pub restarts: usize,
    pub penalty_weight: Option<T>,
    pub optimizer: OptimizerSettings<T>,
}

impl<T: Scalar> Default for DecodeSettings<T> {
    fn default() -> Self {
        Self { restarts: 20, penalty_weight: None, optimizer: OptimizerSettings::default() }
    }
}

/// Attribution accuracy of the real decoder over `registry x n_seeds` trials.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_accuracy<T: Scalar>(
    handle: &Generator<T>,
    cfg: &FingerprintConfig<T>,
    registry: &KeyRegistry,
    n_seeds: usize,
    postprocess: Option<&PostprocessSpec<T>>,
    metric: &MetricHandle<T>,
    settings: &DecodeSettings<T>,
    rng_seed: u64,
) -> Result<AccuracyReport<T>, DecodeError> {
    evaluate_accuracy_with(handle, cfg, registry, n_seeds, postprocess, rng_seed, |ctx| {
        let mut problem = AttributionProblem::new(handle, cfg, metric, ctx.target);
        problem.restarts = settings.restarts;
        problem.penalty_weight = settings.penalty_weight;
        problem.settings = settings.optimizer.clone();
        decode(&problem, ctx.trial_seed ^ 0xdec0de).ok().map(|r| DecodedTrial {
            phi_hat: r.phi_hat,
            alpha_hat: Some(r.alpha_hat),
            residual: r.residual,
            restarts_failed: r.restarts_failed,
        })
    })
}
