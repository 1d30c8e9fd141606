pub mod encoder;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod sketch;

pub use error::{Error, Result, TraceId};
