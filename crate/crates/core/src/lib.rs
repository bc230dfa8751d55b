//! Query-anchored user embeddings at desk scale.
//!
//! A hierarchical multi-modal encoder turns a user's event history into a
//! short run of injected vectors; a small decoder-only transformer reads
//! them followed by a scenario query and a `<USER_EMB>` sentinel, and the
//! hidden state at the sentinel becomes a 128-d unit-norm embedding. The
//! same backbone powers contrastive + generative pretraining, soft-prompt
//! tuning, and KV-cache-amortized multi-scenario serving.

pub mod api;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod hier;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod probe;
pub mod serve;
pub mod synth;
pub mod tensor;
pub mod tune;
pub mod vocab;

pub use error::{Error, Result};
