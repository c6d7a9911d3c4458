//! Knowledge-graph guided radiology report generation at desk scale.
//!
//! The pipeline distills disease-related features from regional image features
//! through a 14-node chest-disease graph, fuses the two streams, splices the
//! result into an instruction prompt, and decodes a report with a small causal
//! decoder. Everything runs on the in-crate tape engine in [`autodiff`].

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod evalsuite;
pub mod fusion;
pub mod harness;
pub mod generator;
pub mod kgraph;
pub mod model;
pub mod nn;
pub mod rng;
pub mod templates;

pub use error::{Error, Result};
