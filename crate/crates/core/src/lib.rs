pub mod action;
pub mod control;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod model;
pub mod perception;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
