//! Synthetic differentiable generator `g: R^{d_w} -> R^{d_x}` and latent
//! mapper `psi: R^{d_z} -> R^{d_w}` with exact analytic Jacobians.
//!
//! The generator is a small smooth MLP whose output is squashed into the
//! pixel range; the mapper is a smooth MLP with a decaying per-coordinate
//! output scale so the latent covariance has a clearly ordered spectrum.
//! The generator's first layer carries matching decaying input gains, so
//! high-variance latent directions also produce the largest image response.
//! An affine mode (identity mapper, `g(w) = Aw + b`, no squashing) provides
//! closed-form oracles for the optimization and theory modules.

use thiserror::Error;

use crate::linalg::{norm2, Mat};
use crate::rng::{stable_hash, standard_normal, substream};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("unknown activation tag `{0}`")]
    UnknownActivation(String),
    #[error("activation `{0}` is not continuously differentiable")]
    NonSmoothActivation(String),
    #[error("dimension `{0}` must be positive")]
    ZeroDimension(&'static str),
    #[error("output range is empty or not finite")]
    BadOutputRange,
    #[error("affine mode requires d_z == d_w (got {d_z} vs {d_w})")]
    AffineDims { d_z: usize, d_w: usize },
    #[error("affine mode requires empty hidden widths")]
    AffineHiddenLayers,
    #[error("affine parts shape mismatch: {0}")]
    AffineParts(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input contains non-finite entries")]
    NonFinite,
}

/// Smooth activation functions (all C¹ everywhere).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Tanh,
    Softplus,
    Silu,
}

impl Activation {
    fn parse(tag: &str) -> Result<Self, BuildError> {
        match tag {
            "tanh" => Ok(Self::Tanh),
            "softplus" => Ok(Self::Softplus),
            "silu" | "swish" => Ok(Self::Silu),
            "relu" | "leaky_relu" | "abs" | "hardtanh" => {
                Err(BuildError::NonSmoothActivation(tag.to_string()))
            }
            other => Err(BuildError::UnknownActivation(other.to_string())),
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Tanh => x.tanh(),
            Self::Softplus => {
                // ln(1 + e^x) with overflow guard
                if x > T::c(30.0) {
                    x
                } else {
                    (T::one() + x.exp()).ln()
                }
            }
            Self::Silu => x * logistic(x),
        }
    }

    fn deriv<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Self::Softplus => logistic(x),
            Self::Silu => {
                let s = logistic(x);
                s + x * s * (T::one() - s)
            }
        }
    }
}

fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Architecture and seeding of the synthetic generator pair (psi, g).
///
/// Identical specs reconstruct bit-identical weights; only the spec is ever
/// persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec<T> {
    pub d_z: usize,
    pub d_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub layer_widths: Vec<usize>,
    pub psi_layer_widths: Vec<usize>,
    /// Activation tag; must name a C¹ nonlinearity (`tanh`, `softplus`, `silu`).
    pub activation: String,
    pub seed: u64,
    pub output_range: (T, T),
    /// Affine oracle mode: identity psi (plus bias), `g(w) = Aw + b`, no squashing.
    pub affine: bool,
}

impl<T: Scalar> GeneratorSpec<T> {
    /// Default desk-scale configuration: 64-dim latent, 16x16 grayscale output.
    pub fn default_desk_scale(seed: u64) -> Self {
        Self {
            d_z: 32,
            d_w: 64,
            image_h: 16,
            image_w: 16,
            channels: 1,
            layer_widths: vec![96],
            psi_layer_widths: vec![64],
            activation: "tanh".to_string(),
            seed,
            output_range: (T::zero(), T::one()),
            affine: false,
        }
    }

    /// Affine oracle configuration with `d_w = d_z = d` and an `h x w` output grid.
    pub fn affine(seed: u64, d: usize, image_h: usize, image_w: usize) -> Self {
        Self {
            d_z: d,
            d_w: d,
            image_h,
            image_w,
            channels: 1,
            layer_widths: vec![],
            psi_layer_widths: vec![],
            activation: "tanh".to_string(),
            seed,
            output_range: (T::zero(), T::one()),
            affine: true,
        }
    }

    pub fn d_x(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    MappedFromZ,
    Fingerprinted,
    SyntheticGaussian,
}

/// A point in the semantic latent space.
#[derive(Debug, Clone)]
pub struct LatentSample<T> {
    pub w: Vec<T>,
    pub source: LatentSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Generated,
    Postprocessed,
}

/// A generated image: `channels x height x width`, flattened channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> ImageGrid<T> {
    pub fn d_x(&self) -> usize {
        self.pixels.len()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Fraction of pixels within `band * range_width` of either range edge.
    /// Diagnostic for squashing saturation.
    pub fn saturation_fraction(&self, output_range: (T, T), band: T) -> T {
        let (lo, hi) = output_range;
        let margin = (hi - lo) * band;
        let n = self
            .pixels
            .iter()
            .filter(|&&p| p - lo <= margin || hi - p <= margin)
            .count();
        T::from_usize_lossy(n) / T::from_usize_lossy(self.pixels.len().max(1))
    }
}

#[derive(Debug, Clone)]
struct Dense<T> {
    w: Mat<T>,
    b: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn seeded(seed: u64, fan_out: usize, fan_in: usize, bias_std: f64) -> Self {
        let mut rng = substream(seed, 0);
        let std = T::c(1.0 / (fan_in as f64).sqrt());
        let w = Mat::from_fn(fan_out, fan_in, |_, _| standard_normal::<T, _>(&mut rng) * std);
        let b = (0..fan_out)
            .map(|_| standard_normal::<T, _>(&mut rng) * T::c(bias_std))
            .collect();
        Self { w, b }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        let mut z = self.w.matvec(x);
        for (zi, &bi) in z.iter_mut().zip(&self.b) {
            *zi = *zi + bi;
        }
        z
    }
}

#[derive(Debug, Clone)]
enum PsiNet<T> {
    /// Identity plus bias (affine mode) with optional per-coordinate scale.
    Affine { scale: Vec<T>, bias: Vec<T> },
    Net { hidden: Vec<Dense<T>>, out: Dense<T>, out_scale: Vec<T>, act: Activation },
}

#[derive(Debug, Clone)]
enum GNet<T> {
    Affine { a: Mat<T>, b: Vec<T> },
    Net { hidden: Vec<Dense<T>>, out: Dense<T>, act: Activation },
}

/// Immutable generator handle. All evaluation methods are pure; the handle
/// is safe to share across threads.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    spec: GeneratorSpec<T>,
    psi: PsiNet<T>,
    g: GNet<T>,
}

/// Decaying per-coordinate profile, geometric from `hi` down to `lo`.
fn geometric_profile<T: Scalar>(n: usize, hi: f64, lo: f64) -> Vec<T> {
    if n == 1 {
        return vec![T::c(hi)];
    }
    (0..n)
        .map(|i| T::c(hi * (lo / hi).powf(i as f64 / (n - 1) as f64)))
        .collect()
}

// Latent scale spread (psi output) and matching generator input gains. The
// shared ordering is what makes major principal components of the latent
// distribution also the directions of strongest image response.
const PSI_SCALE_HI: f64 = 2.0;
const PSI_SCALE_LO: f64 = 0.2;
const GEN_GAIN_HI: f64 = 1.0;
const GEN_GAIN_LO: f64 = 0.4;

// Spatial smoothing passes applied to the output layer at init. Latent
// directions then map to low-frequency image patterns, as in real
// generators, which is what postprocessing robustness rests on.
const OUTPUT_SMOOTHING_PASSES: usize = 2;

/// In-place separable binomial smoothing (taps 1-4-6-4-1) of a flattened
/// `channels x h x w` field with edge-mirrored padding.
fn smooth_spatial<T: Scalar>(field: &mut [T], channels: usize, h: usize, w: usize, passes: usize) {
    let taps = [
        T::c(1.0 / 16.0),
        T::c(4.0 / 16.0),
        T::c(6.0 / 16.0),
        T::c(4.0 / 16.0),
        T::c(1.0 / 16.0),
    ];
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let m = if i < 0 { -i - 1 } else if i >= n { 2 * n - 1 - i } else { i };
        m.clamp(0, n - 1) as usize
    };
    let plane = h * w;
    let mut tmp = vec![T::zero(); plane];
    for _ in 0..passes {
        for c in 0..channels {
            let base = c * plane;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for (k, &t) in taps.iter().enumerate() {
                        let sx = mirror(x as isize + k as isize - 2, w);
                        acc = acc + t * field[base + y * w + sx];
                    }
                    tmp[y * w + x] = acc;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for (k, &t) in taps.iter().enumerate() {
                        let sy = mirror(y as isize + k as isize - 2, h);
                        acc = acc + t * tmp[sy * w + x];
                    }
                    field[base + y * w + x] = acc;
                }
            }
        }
    }
}

/// Smooth every column of the output layer (each hidden unit's spatial
/// pattern) and its bias, preserving the original column norms.
fn smooth_output_layer<T: Scalar>(layer: &mut Dense<T>, channels: usize, h: usize, w: usize) {
    let cols = layer.w.cols();
    for j in 0..cols {
        let mut col = layer.w.col(j);
        let norm_before = norm2(&col);
        smooth_spatial(&mut col, channels, h, w, OUTPUT_SMOOTHING_PASSES);
        let norm_after = norm2(&col);
        if norm_after > T::zero() {
            let s = norm_before / norm_after;
            for v in col.iter_mut() {
                *v = *v * s;
            }
        }
        layer.w.set_col(j, &col);
    }
    let norm_before = norm2(&layer.b);
    smooth_spatial(&mut layer.b, channels, h, w, OUTPUT_SMOOTHING_PASSES);
    let norm_after = norm2(&layer.b);
    if norm_after > T::zero() {
        let s = norm_before / norm_after;
        for v in layer.b.iter_mut() {
            *v = *v * s;
        }
    }
}

pub fn build_generator<T: Scalar>(spec: &GeneratorSpec<T>) -> Result<Generator<T>, BuildError> {
    for (name, v) in [
        ("d_z", spec.d_z),
        ("d_w", spec.d_w),
        ("image_h", spec.image_h),
        ("image_w", spec.image_w),
        ("channels", spec.channels),
    ] {
        if v == 0 {
            return Err(BuildError::ZeroDimension(name));
        }
    }
    let (lo, hi) = spec.output_range;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(BuildError::BadOutputRange);
    }
    let act = Activation::parse(&spec.activation)?;
    let d_x = spec.d_x();

    if spec.affine {
        if spec.d_z != spec.d_w {
            return Err(BuildError::AffineDims { d_z: spec.d_z, d_w: spec.d_w });
        }
        if !spec.layer_widths.is_empty() || !spec.psi_layer_widths.is_empty() {
            return Err(BuildError::AffineHiddenLayers);
        }
        let mut rng = substream(stable_hash(&[spec.seed, 1, 0]), 0);
        let psi_bias: Vec<T> = (0..spec.d_w)
            .map(|_| standard_normal::<T, _>(&mut rng) * T::c(0.5))
            .collect();
        let layer = Dense::<T>::seeded(stable_hash(&[spec.seed, 2, 0]), d_x, spec.d_w, 0.5);
        return Ok(Generator {
            spec: spec.clone(),
            psi: PsiNet::Affine { scale: vec![T::one(); spec.d_w], bias: psi_bias },
            g: GNet::Affine { a: layer.w, b: layer.b },
        });
    }

    // psi network
    let mut psi_hidden = Vec::new();
    let mut fan_in = spec.d_z;
    for (k, &width) in spec.psi_layer_widths.iter().enumerate() {
        if width == 0 {
            return Err(BuildError::ZeroDimension("psi_layer_widths"));
        }
        psi_hidden.push(Dense::seeded(stable_hash(&[spec.seed, 1, k as u64]), width, fan_in, 0.1));
        fan_in = width;
    }
    let psi_out = Dense::seeded(stable_hash(&[spec.seed, 1, 900]), spec.d_w, fan_in, 0.25);
    let out_scale = geometric_profile(spec.d_w, PSI_SCALE_HI, PSI_SCALE_LO);

    // g network, with decaying input gains folded into the first layer
    let mut g_hidden = Vec::new();
    let mut fan_in = spec.d_w;
    let gains = geometric_profile::<T>(spec.d_w, GEN_GAIN_HI, GEN_GAIN_LO);
    for (k, &width) in spec.layer_widths.iter().enumerate() {
        if width == 0 {
            return Err(BuildError::ZeroDimension("layer_widths"));
        }
        let mut layer = Dense::seeded(stable_hash(&[spec.seed, 2, k as u64]), width, fan_in, 0.1);
        if k == 0 {
            for i in 0..width {
                let row = layer.w.row_mut(i);
                for (j, g) in gains.iter().enumerate() {
                    row[j] = row[j] * *g;
                }
            }
        }
        g_hidden.push(layer);
        fan_in = width;
    }
    let mut g_out = Dense::seeded(stable_hash(&[spec.seed, 2, 900]), d_x, fan_in, 0.6);
    if spec.layer_widths.is_empty() {
        for i in 0..d_x {
            let row = g_out.w.row_mut(i);
            for (j, g) in gains.iter().enumerate() {
                row[j] = row[j] * *g;
            }
        }
    }
    smooth_output_layer(&mut g_out, spec.channels, spec.image_h, spec.image_w);

    Ok(Generator {
        spec: spec.clone(),
        psi: PsiNet::Net { hidden: psi_hidden, out: psi_out, out_scale, act },
        g: GNet::Net { hidden: g_hidden, out: g_out, act },
    })
}

impl<T: Scalar> Generator<T> {
    /// Oracle constructor: identity-plus-scale psi and a prescribed affine map.
    /// Used to build generators whose Gram matrix is known in closed form.
    pub fn affine_from_parts(
        psi_scale: Vec<T>,
        psi_bias: Vec<T>,
        a: Mat<T>,
        b: Vec<T>,
        image_shape: (usize, usize, usize),
        output_range: (T, T),
    ) -> Result<Self, BuildError> {
        let d_w = psi_scale.len();
        let (channels, image_h, image_w) = image_shape;
        let d_x = channels * image_h * image_w;
        if psi_bias.len() != d_w || a.cols() != d_w || a.rows() != d_x || b.len() != d_x {
            return Err(BuildError::AffineParts(format!(
                "psi_scale {}, psi_bias {}, A {}x{}, b {}, d_x {}",
                d_w,
                psi_bias.len(),
                a.rows(),
                a.cols(),
                b.len(),
                d_x
            )));
        }
        let spec = GeneratorSpec {
            d_z: d_w,
            d_w,
            image_h,
            image_w,
            channels,
            layer_widths: vec![],
            psi_layer_widths: vec![],
            activation: "tanh".to_string(),
            seed: 0,
            output_range,
            affine: true,
        };
        Ok(Self {
            spec,
            psi: PsiNet::Affine { scale: psi_scale, bias: psi_bias },
            g: GNet::Affine { a, b },
        })
    }

    pub fn spec(&self) -> &GeneratorSpec<T> {
        &self.spec
    }

    pub fn d_w(&self) -> usize {
        self.spec.d_w
    }

    pub fn d_z(&self) -> usize {
        self.spec.d_z
    }

    pub fn d_x(&self) -> usize {
        self.spec.d_x()
    }

    pub fn output_range(&self) -> (T, T) {
        self.spec.output_range
    }

    fn check_dim(len: usize, expected: usize) -> Result<(), EvalError> {
        if len != expected {
            return Err(EvalError::DimensionMismatch { expected, got: len });
        }
        Ok(())
    }

    /// `w = psi(z)`.
    pub fn map_latent(&self, z: &[T]) -> Result<LatentSample<T>, EvalError> {
        Self::check_dim(z.len(), self.spec.d_z)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        let w = match &self.psi {
            PsiNet::Affine { scale, bias } => z
                .iter()
                .zip(scale)
                .zip(bias)
                .map(|((&zi, &si), &bi)| zi * si + bi)
                .collect(),
            PsiNet::Net { hidden, out, out_scale, act } => {
                let mut a: Vec<T> = z.to_vec();
                for layer in hidden {
                    a = layer.forward(&a).into_iter().map(|v| act.apply(v)).collect();
                }
                let mut w = out.forward(&a);
                for (wi, &si) in w.iter_mut().zip(out_scale) {
                    *wi = *wi * si;
                }
                w
            }
        };
        Ok(LatentSample { w, source: LatentSource::MappedFromZ })
    }

    fn squash(&self, y: T) -> T {
        let (lo, hi) = self.spec.output_range;
        lo + (hi - lo) * logistic(y)
    }

    fn squash_deriv(&self, y: T) -> T {
        let (lo, hi) = self.spec.output_range;
        let p = logistic(y);
        (hi - lo) * p * (T::one() - p)
    }

    /// `x = g(w)` as an image grid.
    pub fn evaluate(&self, w: &[T]) -> Result<ImageGrid<T>, EvalError> {
        Self::check_dim(w.len(), self.spec.d_w)?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        let pixels = match &self.g {
            GNet::Affine { a, b } => {
                let mut x = a.matvec(w);
                for (xi, &bi) in x.iter_mut().zip(b) {
                    *xi = *xi + bi;
                }
                x
            }
            GNet::Net { hidden, out, act } => {
                let mut a_vec: Vec<T> = w.to_vec();
                for layer in hidden {
                    a_vec = layer.forward(&a_vec).into_iter().map(|v| act.apply(v)).collect();
                }
                out.forward(&a_vec).into_iter().map(|y| self.squash(y)).collect()
            }
        };
        Ok(ImageGrid {
            channels: self.spec.channels,
            height: self.spec.image_h,
            width: self.spec.image_w,
            pixels,
            provenance: Provenance::Generated,
        })
    }

    /// Analytic Jacobian `J_w` of `g` at `w`, shape `d_x x d_w`.
    pub fn jacobian(&self, w: &[T]) -> Result<Mat<T>, EvalError> {
        Self::check_dim(w.len(), self.spec.d_w)?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        match &self.g {
            GNet::Affine { a, .. } => Ok(a.clone()),
            GNet::Net { hidden, out, act } => {
                let mut a_vec: Vec<T> = w.to_vec();
                let mut jac: Option<Mat<T>> = None;
                for layer in hidden {
                    let z = layer.forward(&a_vec);
                    let mut next = match jac {
                        None => layer.w.clone(),
                        Some(j) => layer.w.matmul(&j),
                    };
                    for (i, &zi) in z.iter().enumerate() {
                        let d = act.deriv(zi);
                        for v in next.row_mut(i) {
                            *v = *v * d;
                        }
                    }
                    jac = Some(next);
                    a_vec = z.into_iter().map(|v| act.apply(v)).collect();
                }
                let z = out.forward(&a_vec);
                let mut full = match jac {
                    None => out.w.clone(),
                    Some(j) => out.w.matmul(&j),
                };
                for (i, &zi) in z.iter().enumerate() {
                    let d = self.squash_deriv(zi);
                    for v in full.row_mut(i) {
                        *v = *v * d;
                    }
                }
                Ok(full)
            }
        }
    }

    /// Vector-Jacobian product `J_wᵀ u` without materializing `J_w`.
    pub fn vjp(&self, w: &[T], cotangent: &[T]) -> Result<Vec<T>, EvalError> {
        Self::check_dim(w.len(), self.spec.d_w)?;
        Self::check_dim(cotangent.len(), self.spec.d_x())?;
        match &self.g {
            GNet::Affine { a, .. } => Ok(a.t_matvec(cotangent)),
            GNet::Net { hidden, out, act } => {
                let mut a_vec: Vec<T> = w.to_vec();
                let mut pre_acts = Vec::with_capacity(hidden.len());
                for layer in hidden {
                    let z = layer.forward(&a_vec);
                    a_vec = z.iter().map(|&v| act.apply(v)).collect();
                    pre_acts.push(z);
                }
                let z_out = out.forward(&a_vec);
                let mut u: Vec<T> = cotangent
                    .iter()
                    .zip(&z_out)
                    .map(|(&c, &z)| c * self.squash_deriv(z))
                    .collect();
                u = out.w.t_matvec(&u);
                for (layer, z) in hidden.iter().zip(&pre_acts).rev() {
                    for (ui, &zi) in u.iter_mut().zip(z) {
                        *ui = *ui * act.deriv(zi);
                    }
                    u = layer.w.t_matvec(&u);
                }
                Ok(u)
            }
        }
    }

    /// Upper bound on the Jacobian spectral norm along the segment
    /// `[w, w + delta]`, estimated by sampling.
    pub fn segment_lipschitz(&self, w: &[T], delta: &[T], probes: usize) -> Result<T, EvalError> {
        let mut max_norm = T::zero();
        for k in 0..probes.max(2) {
            let t = T::from_usize_lossy(k) / T::from_usize_lossy(probes.max(2) - 1);
            let point: Vec<T> = w.iter().zip(delta).map(|(&wi, &di)| wi + t * di).collect();
            let j = self.jacobian(&point)?;
            let gram = j.t_matmul(&j);
            let top = crate::linalg::sym_eigen(&gram)
                .map(|e| e.values[0].max(T::zero()).sqrt())
                .unwrap_or_else(|_| gram.frobenius_norm().sqrt());
            max_norm = max_norm.max(top);
        }
        Ok(max_norm)
    }
}

/// Euclidean distance between the pixels of two images.
pub fn pixel_distance<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> T {
    norm2(&crate::linalg::sub_vec(&a.pixels, &b.pixels))
}
