pub mod autodiff;
pub mod capsules;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod nn;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
