use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::vector::Modality;

/// What a provider is and what it can embed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    /// URL of a remote service, or `mock:{seed}`.
    pub endpoint: String,
    pub model_id: String,
    pub dim: usize,
    pub modalities: BTreeSet<Modality>,
}

impl ProviderDescriptor {
    pub fn supports(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }
}

/// Image payload handed to a provider. `bytes` is only present when the
/// provider asked for them.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub image_id: &'a str,
    pub digest: &'a str,
    pub bytes: Option<&'a [u8]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider overloaded (HTTP 503): {0}")]
    Overloaded(String),
    #[error("provider rejected request (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_) | ProviderError::Overloaded(_))
    }
}

/// Source of raw embeddings. Vectors need not be normalized; the gateway
/// validates and normalizes everything it returns.
pub trait EmbeddingProvider: Send + Sync {
    fn descriptor(&self) -> &ProviderDescriptor;

    /// Whether [`EmbeddingProvider::embed_image`] needs the image bytes or
    /// only the digest.
    fn needs_image_bytes(&self) -> bool;

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, ProviderError>;

    fn embed_image(&self, image: ImageInput<'_>, prompt: &str) -> Result<Vec<f32>, ProviderError>;
}
