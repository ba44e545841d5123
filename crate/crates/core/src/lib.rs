pub mod assignment;
pub mod clustering;
pub mod corpus;
pub mod defgen;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod mapping;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
