//! Spectral laboratory for shell-flux experiments on the d-torus.
//!
//! Everything here works with sparse Fourier representations of real,
//! divergence-free vector fields under the normalized (mass one) Haar
//! measure, so Plancherel sums and flux triple sums carry no 2*pi factors.
//!
//! Module map:
//! - [`profile`]: the smooth step and the radial Littlewood-Paley cutoff.
//! - [`spectral`]: sparse spectral fields and pointwise/multiplier ops.
//! - [`blocks`]: lattice block sets and the block-structured fields built
//!   from them (shell blocks, intermittent cubes, shear modes).
//! - [`timeprof`]: gluing cutoff families and the projection wavenumber
//!   schedule, plus 1-d adaptive quadrature.
//! - [`flux`]: shell-to-shell flux sums, triad kernels over block fields,
//!   energy ledgers, and jump tables.
//! - [`solutions`]: the three constructed solutions (glued, projected,
//!   shear) and their space-time norm reports.
//! - [`accept`]: the acceptance checks that `labcli verify` and the
//!   `acceptance` integration test run.
//! - [`cli`]: run configuration, output bundles, and the CLI entry points.

pub mod accept;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod flux;
pub mod profile;
pub mod solutions;
pub mod spectral;
pub mod timeprof;
pub mod util;

pub use error::FluxError;

/// Dyadic wavenumber `lambda_q = 2^q`.
pub fn lambda(q: i32) -> f64 {
    (q as f64).exp2()
}
