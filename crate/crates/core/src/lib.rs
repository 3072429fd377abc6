//! Joint mean and quantile regression for time-series and gridded
//! spatio-temporal data.
//!
//! A multi-head network is trained on a combined squared-error + pinball
//! objective so that a single model predicts the conditional mean together
//! with several conditional quantiles. Spatio-temporal inputs are handled
//! by convolutional LSTM layers; univariate problems by dense stacks.
//! Baselines (independent per-task models, linear quantile regression,
//! MC-dropout with Gaussian intervals) and a quantile evaluation suite
//! (tilted loss, crossing diagnostics, interval coverage/width) round out
//! the toolkit.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod layers;
pub mod losses;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
