//! Metric-learning training engine built around an embedding queue.
//!
//! The crate trains a small MLP encoder together with a normalized linear
//! classifier whose rows act as identity-representative vectors. Past
//! embeddings are kept in a FIFO queue and re-used by the classifier loss
//! after a drift compensation step, so each classifier update sees far more
//! identities than a single mini-batch contains.
//!
//! Module map:
//! - [`linalg`]: dense f64 vectors and matrices with deterministic semantics
//! - [`encoder`]: MLP forward/backward with exact analytic gradients
//! - [`losses`]: normalized-softmax losses with ArcFace/CosFace margins
//! - [`broadface`]: the embedding queue, compensation and split objectives
//! - [`optim`]: SGD with momentum, weight decay and a step schedule
//! - [`data`]: synthetic many-class datasets and file ingestion
//! - [`eval`]: verification, identification and retrieval metrics
//! - [`gradcheck`]: central finite-difference verification of all gradients
//! - [`trainer`]: epoch-level orchestration shared by the CLI and tests

pub mod broadface;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod optim;
pub mod trainer;
