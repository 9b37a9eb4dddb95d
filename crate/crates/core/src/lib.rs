pub mod checkpoint;
pub mod error;
pub mod head;
pub mod inference;
pub mod lattice;
pub mod model;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
