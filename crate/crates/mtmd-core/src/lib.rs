//! Two-tower multi-task multi-domain ad ranker, small enough to train on one
//! CPU core: a deterministic f64 autodiff kernel, domain-adapted feature
//! processing, mixture-of-expert towers, KL distillation from a teacher
//! oracle, and file formats for datasets, checkpoints, and embeddings.

pub mod adapt;
pub mod baseline;
pub mod config;
pub mod data;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod export;
pub mod experts;
pub mod numkernel;
pub mod report;
pub mod schema;
pub mod teacher;
pub mod towers;
pub mod trainer;

pub use error::{Error, Result};
