//! Multispectral (RGB + thermal) feature fusion and prototype-based few-shot
//! detection on dense feature maps, with a reverse-mode differentiation layer
//! and brute-force oracles for verification.

pub mod attention;
pub mod audit;
pub mod config;
pub mod error;
pub mod eval;
pub mod fault;
pub mod fmp;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod prototype;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::ParamStore;
pub use tensor::{FeatureMap, Matrix, Tensor};
