//! Fully coupled slow–fast systems driven by a state-dependent switching
//! process: averaging, centered Poisson equations, the quadratic
//! moderate-deviation rate and Monte Carlo checks of tail decay.

pub mod chain;
pub mod error;
pub mod mc;
pub mod model;
pub mod poisson;
pub mod rate;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
