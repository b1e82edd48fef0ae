//! Gaussian-quadrature lookup table for the two-point expectation `E[phi(u) phi(v)]`.
//!
//! Inputs are preprocessed to a common norm, so both marginal variances of every pair are
//! equal at every layer and the expectation depends only on `(s, c)`. The table is filled
//! once per nonlinearity and grid, then every kernel entry at every layer is a constant-time
//! bilinear lookup.

pub mod cache;
mod grid;
mod table;

pub use grid::{build_grid, default_u_max, GridSpec, QuadratureGrid};
pub use table::{populate, LookupTable};
