pub mod caputo;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod fields;
pub mod gmsfem;
pub mod map;
pub mod mesh;
pub mod model;
pub mod sampling;

pub use error::{Error, Result};
