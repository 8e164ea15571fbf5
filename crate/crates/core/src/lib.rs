pub mod arch;
pub mod cli;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod generator;
pub mod image;
pub mod ndiff;
pub mod semisup;
pub mod toyeval;
pub mod training;

pub use error::{Error, Result};
pub use ndiff::{Adadelta, Gradients, Graph, Mode, Tensor};
