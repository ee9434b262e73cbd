//! Generalized dipole scanning in weighted inner-product norms, the
//! sLORETA/eLORETA metric family, minimum-variance beamformer powers, and
//! numerical certification of their equivalences on synthetic data.
//!
//! Module map:
//!
//! * [`linalg`] - metrics (symmetric PSD operators with cached spectra), spectral
//!   powers, pseudoinverses and rank-one inverse updates.
//! * [`matrix_io`] - the plain-text matrix format shared by every file interface.
//! * [`forward`] - synthetic leadfields, noise models, single-source scenarios and
//!   covariance pairs.
//! * [`scan`] - weighted least-squares fits, goodness of fit, sLORETA power,
//!   metric recipes (classic/Sekihara sLORETA, eLORETA) and grid scans.
//! * [`beamformer`] - filter weights, UG/NAI/SAM powers (scalar and vector), the
//!   trace-ratio NAI and the GOF transfer functions.
//! * [`lab`] - expected scan objectives, the noise-distortion derivative, the
//!   whitening sufficiency/necessity experiments and the trace-ratio NAI bias
//!   construction.
//! * [`report`] - certification summaries and per-instance CSV detail.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beamformer;
pub mod error;
pub mod forward;
pub mod lab;
pub mod linalg;
pub mod matrix_io;
pub mod report;
pub mod scan;

pub use error::{Error, Result};
pub use linalg::{Metric, RankOneUpdate};

/// Dense real matrix used throughout the crate.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense real column vector.
pub type Vector = nalgebra::DVector<f64>;
