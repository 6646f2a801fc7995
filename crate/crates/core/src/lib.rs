//! A sharded, dynamically growing embedding service.
//!
//! Tables map arbitrary byte-string keys to dense vectors that are created
//! on first use, trained with per-key optimizers, sampled for candidate
//! losses, and searched by inner product. See the crate README for a tour.

pub mod client;
pub mod codec;
pub mod config;
pub mod entry;
pub mod error;
pub mod init;
pub mod key;
pub mod optim;
pub mod retrieval;
pub mod sampler;
pub mod service;
pub mod store;

pub use config::{
    BloomSpec, Initializer, LifetimePolicy, OptimizerKind, OptimizerSpec, SamplerStrategy, StorageBackend, TableConfig,
    TableId,
};
pub use entry::EmbeddingEntry;
pub use error::{Error, Result};
pub use key::EmbeddingKey;
pub use store::EmbeddingStore;
