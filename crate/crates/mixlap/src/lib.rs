//! Discrete variational machinery for `-Δ_p u + ε(-Δ_p)^s u = λ|u|^{q-2}u + |u|^{r-2}u`
//! in a bounded domain with zero exterior data.

pub mod bubbles;
pub mod driver;
pub mod error;
pub mod functionals;
pub mod lattice;
pub mod operators;
mod quad;
pub mod solvers;

pub use error::{Error, Result};
