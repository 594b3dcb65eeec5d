//! Amortized community detection on graphs.

pub mod attention;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod generate;
pub mod graph;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod posenc;
pub mod snap;
pub mod train;

pub use error::{AcdError, Result};
pub use graph::{ClusterSets, LabeledGraph};
