//! Economic complexity toolkit.
//!
//! End-to-end pipeline over trade panels: RCA and the Fitness-Complexity
//! fixed point, logPRODY and Herfindahl, HMM regularization of the binary
//! export matrix, NODF nestedness with null-model significance, velocity and
//! Herfindahl fields on the product plane with a gradient-model fit, and the
//! SPSb/NWKR forecasting pair with convergence diagnostics and a CAGR
//! backtesting harness. Every random computation derives from one explicit
//! 64-bit seed.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod forecast;
pub mod hmm;
pub mod metrics;
pub mod nestedness;
pub mod plane;
pub mod plot;
pub mod seeding;

pub use error::{Error, Result};
