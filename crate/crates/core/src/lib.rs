//! Learnable wavelet scattering features fused with scale attention and
//! multi-resolution temporal attention for multi-step time-series
//! forecasting, trained with a trend/seasonal/residual-aware loss.

pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod filterbank;
pub mod forecaster;
pub mod hstm;
pub mod invariance;
pub mod mrta;
pub mod safe;
pub mod trainer;
pub mod tsr;

pub use error::{Error, Result};
