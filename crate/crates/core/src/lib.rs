//! Post-hoc calibration of reward model scores against measurable output
//! characteristics such as response length.
//!
//! A reward is treated as a quality term plus a bias term that depends only
//! on the characteristic. The bias is estimated by smoothing reward against
//! the characteristic and subtracted, which recovers rewards and preference
//! margins with the characteristic's influence removed.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod lowess;
pub mod matrix;
pub mod metrics;
pub mod synth;

pub use calibrate::{
    calibrate, CalibratedSample, CalibratedSet, CalibrationConfig, Method, Preference,
};
pub use dataset::{PreferencePair, SampleSet, ScoredSample};
pub use error::{Error, Result};
pub use lowess::{lowess_fit, lowess_fit_multi, FittedCurve, LowessConfig};
pub use matrix::Matrix;
