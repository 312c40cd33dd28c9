//! Two-stage text-to-SQL tooling: gold schema-link extraction, token-budgeted
//! schema chunking, prompt rendering, model backends, output post-processing
//! and execution-accuracy evaluation.

pub mod chunker;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalx;
pub mod infer;
pub mod linkex;
pub mod pipeline;
pub mod postproc;
pub mod prompts;
pub mod template;

pub use error::{Error, Result};
