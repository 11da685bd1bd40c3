//! Multi-spectral object re-identification: three ViT-style encoder streams
//! (RGB / NIR / TIR), a cyclic token-permutation fusion module, cross-spectrum
//! token reconstruction with missing-spectrum substitution, metric-learning
//! objectives, and retrieval evaluation.

pub mod tensor;

pub mod checkpoint;
pub mod config;
pub mod crm;
pub mod data;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tpm;
pub mod train;
pub mod vit;
