pub mod adapt;
pub mod augment;
pub mod cli;
pub mod consensus;
pub mod detector;
pub mod ema;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod labelspace;
pub mod losses;
pub mod plot;
pub mod raster;
pub mod synthdocs;

pub use error::{Error, Result};
