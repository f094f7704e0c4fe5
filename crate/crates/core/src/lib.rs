//! Frequency-aware flow matching for 2D periodic flow fields.
//!
//! The crate bundles everything needed to train and evaluate a dual-branch
//! (salient flow attention + Fourier mixing) velocity network on
//! pseudo-spectral shear-flow data:
//!
//! - [`fields`]: field containers, radial spectra, metrics and the `FieldPack` format
//! - [`biaslab`]: closed-form and Monte-Carlo checks of forward-diffusion spectral bias
//! - [`interpolant`]: interpolant schedules, training objectives and samplers
//! - [`autodiff`]: a small reverse-mode tape used by every trainable component
//! - [`attention`], [`fourier`], [`backbone`]: the velocity network
//! - [`mae`]: masked-autoencoder surrogate and the alignment regulariser
//! - [`shearflow`]: the incompressible shear-flow solver and dataset builder
//! - [`train`]: optimiser, training loops, sampling, rollout and reports

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod biaslab;
pub mod error;
pub mod fields;
pub mod fourier;
pub mod interpolant;
pub mod mae;
pub mod params;
pub mod rng;
pub mod shearflow;
pub mod train;

pub use error::{Error, Result};
pub use fields::{FieldSeries, MetricReport, SpectrumProfile};
