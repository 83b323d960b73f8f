//! Supervised CP factorization of multiway arrays.
//!
//! A sample-by-features array `X: n × d_1 × … × d_K` is modeled as
//! `X = ⟦U, V_1, …, V_K⟧ + E` with latent scores `U = Y B + F`, where `Y` holds
//! sample covariates, the rows of `F` are `N(0, Σ_f)` and `E` is iid
//! `N(0, σ²_e)`. Parameters are estimated by maximum likelihood with an EM
//! algorithm; [`cp_als`] provides the unsupervised least-squares baseline.

pub mod cp_als;
pub mod error;
pub mod io;
pub(crate) mod linalg;
pub mod model_selection;
pub mod simulation;
pub mod supcp;
pub mod tensor;

pub use error::{Error, Result};
pub use linalg::derive_seed;
pub use tensor::{LoadingSet, Matrix, MultiwayArray};
