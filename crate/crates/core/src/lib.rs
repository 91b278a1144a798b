// `!(x > 0.0)` is used on purpose so NaN fails validation; index loops read
// closer to the math in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod battery;
pub mod config;
pub mod env;
pub mod error;
pub mod fleet;
pub mod macpo;
pub mod microgrid;
pub mod nn;
pub mod pos;
pub mod run;
pub mod scalar;
pub mod year;

pub use error::{Error, Result};
pub use scalar::Scalar;

// The simulator, the environment and the planners run in f64; these name the
// generic building blocks at that precision.
pub type CellPack = battery::CellPack<f64>;
pub type OcvCurve = battery::OcvCurve<f64>;
pub type SohParams = battery::SohParams<f64>;
pub type SohState = battery::SohState<f64>;
pub type SopWindow = battery::SopWindow<f64>;
pub type DegradationPrice = microgrid::DegradationPrice<f64>;
pub type Mlp = nn::Mlp<f64>;
pub type GaussianPolicy = nn::GaussianPolicy<f64>;
pub type Adam = nn::Adam<f64>;
