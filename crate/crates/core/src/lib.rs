pub mod adapters;
pub mod backbones;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod frechet;
pub mod gradcheck;
pub mod placement;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{LabError, Result};
