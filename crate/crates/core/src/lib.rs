//! Fast mean-reverting fractional Ornstein–Uhlenbeck factor models for the
//! Merton portfolio problem: factor simulation, constant-coefficient Merton
//! solvers, first-order expansions and Monte Carlo estimators.

pub mod asymptotics;
pub mod error;
pub mod fou;
pub mod harness;
pub mod market;
pub mod mc;
pub mod merton;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
pub use fou::{FactorPath, FactorSimulator, FouParams, HistoryPolicy, SimGrid};
pub use market::{Averages, MarketModel, ModelSpec};
pub use merton::{MertonSolution, UtilitySpec};


