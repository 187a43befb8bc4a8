pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod training;

pub use error::{Error, ErrorKind, Result};
