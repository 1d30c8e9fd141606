//! SVG import/export, configuration files and bundled assets.

pub mod canned;
mod config;
mod svg;

pub(crate) use config::parse_document;
pub use config::{load_config, Config};
pub use svg::{svg_export, svg_import};
