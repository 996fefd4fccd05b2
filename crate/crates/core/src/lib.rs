pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod momentum;
pub mod params;
pub mod train;

pub use error::{Error, Result};
