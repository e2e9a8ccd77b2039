pub mod datagen;
pub mod decompose;
pub mod error;
pub mod insights;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod ranksearch;
pub mod rng;
pub mod subspace;
pub mod transform;

pub use error::{Error, Result};
pub use linalg::Matrix;
