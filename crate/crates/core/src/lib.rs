//! Portfolio trading environment, policy networks, expert generators, meta-selection and backtesting.

pub mod backtest;
pub mod env;
pub mod error;
pub mod experts;
pub mod marketdata;
pub mod meta;
pub mod policy;
pub mod portfolio;
pub mod synth;
pub mod trainer;

pub use error::{CoreError, Result};
pub use portfolio::PortfolioVector;
