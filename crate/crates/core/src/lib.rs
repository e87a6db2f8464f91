//! Numerical laboratory for alpha-balanced metrics on triples (X, L, E).
//!
//! The crate computes twisted Bergman kernel expansions two independent ways
//! (an L^2 route through holomorphic section bases and a local jet-level
//! recursion), runs the balanced-metric fixed-point iteration on circle
//! invariant model geometries over P^1 and P^1 x P^1, and evaluates the
//! residuals of the uncoupled and coupled limit equations.

pub mod bergman;
pub mod geometry;
pub mod error;
pub mod jet;
pub mod jet1d;
pub mod quad;

pub use error::Error;

/// Complex double-precision scalar used throughout the jet algebra.
pub type C64 = num_complex::Complex64;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
