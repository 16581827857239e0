pub mod api;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod layout;
pub mod metrics;
pub mod mcl;
pub mod model;
pub mod svg;
pub mod toylab;
pub mod trainer;

pub use error::{Error, Result};
