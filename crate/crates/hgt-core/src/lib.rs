//! Hypergraph-transformer toolkit for detecting and forecasting structured
//! interaction events (action-triplets, safety-check achievement, clipping)
//! from frame-feature sequences.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod schema;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
