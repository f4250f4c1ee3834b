//! Decision-focused vehicle relocation.
//!
//! A demand predictor for free-moving vehicles feeds a relocation quadratic
//! program for dedicated vehicles. The program is solved by ADMM and
//! differentiated through its unrolled iterations, so the predictor can be
//! trained on the downstream matching loss instead of forecast error alone.
//!
//! Module map:
//!
//! * [`qp`] standardized QP and the shared penalized system
//! * [`relocation`] relocation instance, vectorization, aggregation
//! * [`admm`] ADMM forward pass and Jacobians of the iterates
//! * [`predictor`] graph-smoothed windowed predictor with its VJP
//! * [`spo`] integrated loss, training loop and evaluation regimes
//! * [`datagen`] synthetic hex-grid city, demand, fleets and targets
//! * [`metrics`] RMSE / SMAPE and divergence tables
//! * [`config`], [`commands`] experiment driver behind the `spo` binary

pub mod admm;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod predictor;
pub mod qp;
pub mod relocation;
pub mod sparse;
pub mod spo;

#[cfg(test)]
mod test_support;

pub use admm::{AdmmConfig, Solution, SolveStatus};
pub use error::{Result, SpoError};
pub use qp::{KktReport, PenaltySystem, StandardQP};
pub use relocation::{FlowPlan, RelocationInstance};
