pub mod baselines;
pub mod config;
pub mod covariate_forecast;
pub mod dataio;
pub mod error;
pub mod feature_select;
pub mod fmt;
pub mod hyperopt;
pub mod kernel;
pub mod metrics;
mod ols;
mod optim;
pub mod panel;
pub mod pipeline;
pub mod ppgp;
pub mod synth;

pub use error::{Error, Result};
pub use panel::GridPanel;
