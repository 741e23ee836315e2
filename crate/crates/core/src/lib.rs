//! Quantile forecasting for retail demand series with a mix of fast
//! movers and intermittent, mostly-zero items.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod series;
pub mod sparse_arm;

pub use error::{ForecastError, Result};
pub use exec::ExecMode;
