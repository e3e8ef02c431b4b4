//! Image segmentation with spatially regularized Student-t mixtures.
//!
//! The model treats each pixel's feature vector as a draw from a K-component
//! mixture of multivariate Student-t distributions whose mixing probabilities
//! vary over the pixel lattice. A conjugate Dirichlet prior ties each pixel's
//! mixing vector to a Gaussian-smoothed neighbourhood average, which
//! regularizes the segmentation without a discrete MRF. Everything is fitted
//! by EM with closed-form updates; the per-pixel mixing field doubles as a
//! soft segmentation whose entropy localizes uncertain regions.
//!
//! The crate is organized around small, testable pieces:
//!
//! - [`field`]: pixel lattice plus feature / probability / label containers.
//! - [`special`]: log-gamma, digamma and trigamma.
//! - [`studentt`]: multivariate Student-t component (density, weights, nu solver).
//! - [`prior`]: Gaussian smoothing and the Dirichlet prior field updates.
//! - [`features`]: Lab conversion, quadrature Gabor bank, PCA reduction.
//! - [`em`]: model init, E/M steps, objective, the fit loop.
//! - [`synth`]: synthetic mixing fields and image sampling for validation.
//! - [`eval`]: Rand indices, boundary F-measure, correlation, subject stats.
//! - [`io`]: PPM/PGM/PNG images, probability-field files, `.seg` ground truth.
//! - [`run`]: the pipeline the `stseg` binary and the examples call into.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each one exercises a major capability end to end on generated data.

pub mod em;
pub mod error;
pub mod eval;
pub mod features;
pub mod field;
pub mod io;
pub mod prior;
pub mod run;
pub mod special;
pub mod studentt;
pub mod synth;

pub use error::{Error, Result};
