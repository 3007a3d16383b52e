//! Source-only checkpoint ranking from class-conditional representation
//! graphs: global spectral complexity, local Ollivier-Ricci curvature and
//! higher-order topology, combined by a non-negative linear score learned
//! from positive and negative views of the source data.

pub mod cache;
pub mod curvature;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod ingest;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod ssl;
pub mod topology;
pub mod transport;
pub mod verify;
pub mod views;

pub use error::{Error, Result};
