use std::collections::BTreeSet;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::provider::{EmbeddingProvider, ImageInput, ProviderDescriptor, ProviderError};
use super::wire::{
    EmbedImageRequest, EmbedResponse, EmbedTextRequest, ErrorResponse, InfoResponse,
    EMBED_IMAGE_PATH, EMBED_TEXT_PATH, INFO_PATH,
};

/// Embedding service reached over HTTP.
pub struct RemoteProvider {
    base: String,
    agent: ureq::Agent,
    descriptor: ProviderDescriptor,
}

impl RemoteProvider {
    /// Queries `/v1/info` and builds the descriptor from it.
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, ProviderError> {
        let base = endpoint.trim_end_matches('/').to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut provider = Self {
            base,
            agent,
            descriptor: ProviderDescriptor {
                endpoint: endpoint.to_string(),
                model_id: String::new(),
                dim: 0,
                modalities: BTreeSet::new(),
            },
        };
        let info: InfoResponse = provider.get(INFO_PATH)?;
        if info.dim == 0 {
            return Err(ProviderError::Protocol("service reports dim 0".into()));
        }
        provider.descriptor.model_id = info.model_id;
        provider.descriptor.dim = info.dim;
        provider.descriptor.modalities = info.modalities.into_iter().collect();
        Ok(provider)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ProviderError> {
        let resp = self
            .agent
            .get(&format!("{}{path}", self.base))
            .call()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        decode(resp)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ProviderError> {
        let resp = self
            .agent
            .post(&format!("{}{path}", self.base))
            .send_json(body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        decode(resp)
    }

    fn check(&self, resp: EmbedResponse) -> Result<Vec<f32>, ProviderError> {
        if resp.embedding.len() != resp.dim {
            return Err(ProviderError::Protocol(format!(
                "response declares dim {} but carries {} values",
                resp.dim,
                resp.embedding.len()
            )));
        }
        if resp.model_id != self.descriptor.model_id {
            return Err(ProviderError::Protocol(format!(
                "response model '{}' differs from service model '{}'",
                resp.model_id, self.descriptor.model_id
            )));
        }
        if let Some(w) = resp.warning {
            log::warn!("{}: {w}", self.descriptor.endpoint);
        }
        Ok(resp.embedding)
    }
}

fn decode<T: DeserializeOwned>(mut resp: ureq::http::Response<ureq::Body>) -> Result<T, ProviderError> {
    let status = resp.status().as_u16();
    if status == 200 {
        return resp
            .body_mut()
            .read_json::<T>()
            .map_err(|e| ProviderError::Protocol(format!("unreadable response body: {e}")));
    }
    let text = resp.body_mut().read_to_string().unwrap_or_default();
    let message = serde_json::from_str::<ErrorResponse>(&text)
        .map(|e| e.error)
        .unwrap_or(text);
    match status {
        503 => Err(ProviderError::Overloaded(message)),
        s if s >= 500 => Err(ProviderError::Transport(format!("HTTP {s}: {message}"))),
        s => Err(ProviderError::Rejected { status: s, message }),
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn needs_image_bytes(&self) -> bool {
        true
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        let resp: EmbedResponse = self.post(
            EMBED_TEXT_PATH,
            &EmbedTextRequest {
                text: text.to_string(),
            },
        )?;
        self.check(resp)
    }

    fn embed_image(&self, image: ImageInput<'_>, prompt: &str) -> Result<Vec<f32>, ProviderError> {
        let bytes = image.bytes.ok_or_else(|| {
            ProviderError::Protocol(format!("image '{}' sent without bytes", image.image_id))
        })?;
        let resp: EmbedResponse = self.post(
            EMBED_IMAGE_PATH,
            &EmbedImageRequest {
                image_base64: STANDARD.encode(bytes),
                prompt: prompt.to_string(),
            },
        )?;
        self.check(resp)
    }
}
