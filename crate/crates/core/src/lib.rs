//! Class-incremental point cloud classification on synthetic assemblies of
//! basic shapes: data generation, a small transformer encoder with masked
//! token pretraining, adapter-based incremental learning with prototypes,
//! and evaluation.

pub mod assembly;
pub mod cil_engine;
pub mod dataset_io;
pub mod encoder;
pub mod error;
pub mod eval_bench;
pub mod geometry;
pub mod numerics;
pub mod pointops;
pub mod rng;
pub mod tokenizer_pretrain;

pub use error::{Error, Result};
