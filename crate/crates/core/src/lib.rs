pub mod atlas;
pub mod config;
pub mod data;
pub mod inference;
pub mod error;
pub mod evaluation;
pub mod latent;
pub mod losses;
pub mod networks;
pub mod parts;
pub mod raster;
pub mod training;

pub use error::{Error, Result};
