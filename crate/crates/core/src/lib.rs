pub mod checkpoint;
pub mod deform;
pub mod error;
pub mod image;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod segment;
pub mod synth;
pub mod track;
pub mod train;

pub use error::{Error, Result};
