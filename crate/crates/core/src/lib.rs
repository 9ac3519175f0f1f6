//! Two-stage energy-guided reverse-SDE sampling for exemplar-based
//! sketch-to-photo translation, at toy scale with exactly checkable parts.
//!
//! * [`sde`]: variance-preserving forward SDE and its perturbation kernel.
//! * [`score`]: analytic Gaussian-mixture scores and a small DSM-trained MLP.
//! * [`energy`]: shape and appearance energies with closed-form gradients.
//! * [`sampler`]: the guided Euler-Maruyama sampler, both inversion stages and
//!   the ablation variants.
//! * [`metrics`]: shape fidelity, PSNR, sliced Wasserstein, mixture recovery.
//! * [`pipeline`]: file formats, configuration, toy data, experiment harness.

pub mod energy;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod sde;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Image, Shape};
