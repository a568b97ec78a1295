//! Conformal constrained policy optimization for orchestrating a cheap base
//! model and an expensive guide model.

pub mod env;
pub mod error;
pub mod numerics;
pub mod calibration;
pub mod cli;
pub mod collector;
pub mod config;
pub mod cpo;
pub mod policy;
pub mod trace;
pub mod trainer;
pub mod vtrace;

pub use error::{Error, Result};
