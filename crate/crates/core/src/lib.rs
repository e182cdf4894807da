//! Reconstruction of missing values in spatio-temporal gridded data with
//! conditional missing-data importance-weighted autoencoders.
//!
//! The crate trains deep latent variable models on incomplete grids, recovers
//! per-cell cumulative distribution functions of the missing values by
//! self-normalized importance sampling, ensembles models across data splits,
//! and scores predictions with a threshold-weighted quadratic score.

pub mod error;
pub mod dist;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
