//! Latent-space fingerprinting testbed for generative models.
//!
//! Binary user keys are embedded as strength-scaled perturbations along
//! principal components of a generator's latent distribution, decoded back
//! by box-constrained multi-start optimization, and evaluated for the
//! accuracy/quality tradeoff under image postprocessing attacks.
//!
//! The numerical core is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32`/`f64`); experiments and the CLI use [`Real`].

pub(crate) mod dct;
pub mod fingerprint;
pub mod attribution;
pub mod latent_model;
pub mod linalg;
pub mod metrics;
pub mod postprocess;
pub mod rng;
pub mod scalar;
pub mod spectral;

pub use scalar::Scalar;

/// Default scalar type used by experiments and the CLI.
pub type Real = f64;

/// Generator handle at the default scalar type.
pub type RealGenerator = latent_model::Generator<Real>;
/// Dense matrix at the default scalar type.
pub type RealMat = linalg::Mat<Real>;
