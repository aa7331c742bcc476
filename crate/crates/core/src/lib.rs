pub mod clusterer;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod seeding;
pub mod synthetic;
pub mod tokenizer;

pub use error::{Error, Result};
