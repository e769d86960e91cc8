//! Quasi-stationary distributions of absorbed diffusions.
//!
//! A diffusion killed on an absorbing set settles, conditional on survival,
//! into a quasi-stationary distribution (QSD): survival times become
//! exponential with a killing rate `lambda`, and the conditioned law `u`
//! solves the stationary Fokker-Planck eigenproblem `L u = -lambda u`. This
//! crate estimates both from simulation and sharpens the estimate with a
//! constrained linear solve:
//!
//! * [`sampler`] runs a regenerating trajectory (restarting from its own
//!   history on each kill) to histogram a reference density `v` and collect
//!   survival times;
//! * [`operator`] discretizes the Fokker-Planck operator on the histogram
//!   grid with conservative central differences;
//! * [`solver`] projects `v` onto the discrete eigenspace by a least-norm
//!   correction, globally or block-by-block with shifted re-solves for
//!   grids too large to factor at once;
//! * [`coupling`] measures the contraction rate of the underlying dynamics
//!   from coupling times of paired chains;
//! * [`sensitivity`] combines contraction with finite-time coupling errors
//!   into Wasserstein bounds between the QSD and the stationary law of a
//!   modified (unkilled) process;
//! * [`models`] ships the ready-made example systems used throughout the
//!   test suite and CLI.

pub mod absorption;
pub mod coupling;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod models;
pub mod operator;
pub mod sampler;
pub mod sde;
pub mod sensitivity;
pub mod solver;
pub mod survival;

pub use error::{Error, Result};
