//! Discriminative Riemannian manifold embedding and alignment (DRMEA) for
//! unsupervised domain adaptation.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense column-major matrices, covariance, symmetric eigensolver.
//! - [`autodiff`]: a reverse-mode tape over matrix expressions, including a
//!   differentiable top-`d'` subspace projector.
//! - [`model`]: the two-layer manifold network with a softmax classifier.
//! - [`losses`]: cross-entropy, inter/intra-class structure losses and the
//!   Grassmannian alignment loss.
//! - [`anchors`]: epoch-frozen source class means.
//! - [`bound`]: eigen-gap error index and perturbation bound analysis.
//! - [`data`]: synthetic domain pairs, CSV ingestion, class-balanced batching.
//! - [`trainer`]: optimizers, training loop, run logging.
//! - [`svg`]: dependency-free line charts used by the CLI and the web demo.

pub mod anchors;
pub mod autodiff;
pub mod bound;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod svg;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, SymEig};

/// Formats a value with 17 significant digits, the text precision used by
/// every CSV and model file this crate writes. Parsing the output with
/// `str::parse::<f64>` recovers the exact bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
