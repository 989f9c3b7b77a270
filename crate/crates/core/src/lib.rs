//! Desk-scale simulator of distributed multi-modal patchwork learning:
//! per-modality β-VAEs, GNN-based modality fusion with virtual target nodes,
//! federated training over heterogeneous modality availability, a
//! product-of-experts fusion baseline, synthetic multi-modal data, and the
//! generation-/representation-quality evaluation protocol.

pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
