//! Partial communication equilibria in a CARA-Gaussian market driven by an
//! Ornstein-Uhlenbeck factor, with insiders who receive private signals at
//! fixed times and reveal them only through prices.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod acceptance;
pub mod cli;
pub mod common;
pub mod config;
pub mod densities;
pub mod engine;
pub mod error;
pub mod gaussian;
pub mod limit;
pub mod linalg;
pub mod lq;
pub mod market;
pub mod output;
pub mod quadrature;
pub mod rng;
pub mod sim;

pub use error::{PceError, Result};

pub type Mat = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
