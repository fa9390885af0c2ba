//! JSON bodies of the embedding service protocol.
//!
//! ```text
//! GET  /v1/info        -> InfoResponse
//! POST /v1/embed_text  EmbedTextRequest  -> EmbedResponse
//! POST /v1/embed_image EmbedImageRequest -> EmbedResponse
//! 400 {"error": ...} malformed input; 503 transient overload (retryable)
//! ```

use serde::{Deserialize, Serialize};

use super::vector::Modality;

pub const INFO_PATH: &str = "/v1/info";
pub const EMBED_TEXT_PATH: &str = "/v1/embed_text";
pub const EMBED_IMAGE_PATH: &str = "/v1/embed_image";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub model_id: String,
    pub dim: usize,
    pub modalities: Vec<Modality>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub image_base64: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Vec<f32>,
    pub dim: usize,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}
