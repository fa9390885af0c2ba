//! Embedding acquisition: providers (remote service or deterministic mock),
//! a content-addressed cache, and the gateway that validates and normalizes
//! every vector.

pub mod cache;
pub mod gateway;
pub mod mock;
pub mod provider;
pub mod remote;
pub mod vector;
pub mod wire;

pub use cache::{CacheError, EmbeddingCache};
pub use gateway::{EmbedError, EmbeddingGateway, GatewayOptions, GatewayStats, RetryPolicy};
pub use mock::{mock_embed, Anchor, MockProvider, PlantedSignal};
pub use provider::{EmbeddingProvider, ImageInput, ProviderDescriptor, ProviderError};
pub use remote::RemoteProvider;
pub use vector::{l2_normalize, DegenerateEmbedding, EmbeddingVector, Modality};
