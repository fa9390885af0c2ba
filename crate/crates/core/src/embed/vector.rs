use std::fmt;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A unit-norm embedding together with where it came from.
#[derive(Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Arc<[f32]>,
    pub model_id: String,
    /// Hash of (modality, image digest, prompt or text); see [`input_digest`].
    pub input_digest: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt()
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingVector")
            .field("dim", &self.dim())
            .field("model_id", &self.model_id)
            .field("input_digest", &self.input_digest)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Content address of an embedding request. Text requests have no image
/// digest.
pub fn input_digest(modality: Modality, image_digest: Option<&str>, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(modality.as_str().as_bytes());
    h.update([0u8]);
    if let Some(d) = image_digest {
        h.update(d.as_bytes());
    }
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("cannot normalize a zero or non-finite vector")]
pub struct DegenerateEmbedding;

/// Scales `v` to unit L2 norm. Accumulates in f64.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>, DegenerateEmbedding> {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| (f64::from(*x) / norm) as f32).collect())
}

/// Little-endian f32 sequence, base64 encoded.
pub fn encode_values_b64(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_values_b64(s: &str) -> Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32 values", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
