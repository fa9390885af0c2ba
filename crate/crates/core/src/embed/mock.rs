//! Deterministic in-process embedding provider.
//!
//! Every vector is drawn from a ChaCha stream keyed by a SHA-256 of
//! (seed, modality, payload digest, prompt), so equal inputs give equal
//! vectors and anything else gives an independent direction. In planted mode
//! selected inputs are pulled towards shared anchor directions, which lets
//! end-to-end tests know the right answer in advance.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::provider::{EmbeddingProvider, ImageInput, ProviderDescriptor, ProviderError};
use super::vector::{l2_normalize, Modality};
use crate::model::Dataset;

/// Default spread of planted vectors around their anchor.
pub const DEFAULT_PLANT_NOISE: f64 = 0.05;

fn keyed_unit_vector(seed: u64, dim: usize, domain: &str, digest: &str, prompt: &str) -> Vec<f32> {
    let mut h = Sha256::new();
    h.update(b"ctxbench-mock-v1");
    h.update(seed.to_le_bytes());
    for part in [domain, digest, prompt] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let raw: Vec<f32> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    // A gaussian draw of positive dimension is zero with probability zero.
    l2_normalize(&raw).expect("gaussian draw is never the zero vector")
}

/// Pseudorandom unit vector keyed by (seed, modality, digest, prompt).
/// Text inputs pass an empty digest.
pub fn mock_embed(seed: u64, dim: usize, modality: Modality, digest: &str, prompt: &str) -> Vec<f32> {
    keyed_unit_vector(seed, dim, modality.as_str(), digest, prompt)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anchor {
    pub key: String,
    /// Plant at the antipode of the anchor direction.
    pub negate: bool,
}

impl Anchor {
    pub fn new(key: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            negate: false,
        }
    }

    pub fn negated(key: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            negate: true,
        }
    }
}

/// Inputs that should land next to a shared anchor direction.
///
/// Texts match by suffix: every query-side prompt ends with the query text,
/// so a planted query text is found inside any prompt that wraps it. The
/// longest registered suffix wins.
#[derive(Debug, Clone)]
pub struct PlantedSignal {
    text_anchors: HashMap<String, Anchor>,
    image_anchors: HashMap<String, Anchor>,
    prompted_image_anchors: HashMap<(String, String), Anchor>,
    noise: f64,
}

impl Default for PlantedSignal {
    fn default() -> Self {
        Self::new(DEFAULT_PLANT_NOISE)
    }
}

impl PlantedSignal {
    pub fn new(noise: f64) -> Self {
        Self {
            text_anchors: HashMap::new(),
            image_anchors: HashMap::new(),
            prompted_image_anchors: HashMap::new(),
            noise,
        }
    }

    /// Plants every image on an anchor named after its digest and every query
    /// text on the anchor of its ground-truth image.
    pub fn for_dataset(d: &Dataset) -> Self {
        let mut planted = Self::default();
        let mut digests = HashMap::new();
        for g in &d.groups {
            for img in &g.images {
                planted.plant_image(&img.digest, Anchor::new(&img.digest));
                digests.insert(img.image_id.as_str(), img.digest.as_str());
            }
        }
        for q in &d.queries {
            if let Some(digest) = digests.get(q.image_id.as_str()) {
                planted.plant_text(&q.text, Anchor::new(*digest));
            }
        }
        planted
    }

    pub fn plant_text(&mut self, text: &str, anchor: Anchor) {
        self.text_anchors.insert(text.to_string(), anchor);
    }

    pub fn plant_image(&mut self, digest: &str, anchor: Anchor) {
        self.image_anchors.insert(digest.to_string(), anchor);
    }

    /// Plants one (image, prompt) pair; takes precedence over the image's
    /// digest-wide anchor.
    pub fn plant_image_prompt(&mut self, digest: &str, prompt: &str, anchor: Anchor) {
        self.prompted_image_anchors
            .insert((digest.to_string(), prompt.to_string()), anchor);
    }

    fn image_anchor(&self, digest: &str, prompt: &str) -> Option<&Anchor> {
        self.prompted_image_anchors
            .get(&(digest.to_string(), prompt.to_string()))
            .or_else(|| self.image_anchors.get(digest))
    }

    fn text_anchor(&self, text: &str) -> Option<&Anchor> {
        if self.text_anchors.is_empty() {
            return None;
        }
        text.char_indices()
            .map(|(i, _)| &text[i..])
            .find_map(|suffix| self.text_anchors.get(suffix))
    }
}

pub struct MockProvider {
    seed: u64,
    descriptor: ProviderDescriptor,
    planted: Option<PlantedSignal>,
}

impl MockProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self::with_model_id(seed, dim, format!("mock-d{dim}"))
    }

    pub fn with_model_id(seed: u64, dim: usize, model_id: impl Into<String>) -> Self {
        assert!(dim > 0, "mock dimension must be positive");
        Self {
            seed,
            descriptor: ProviderDescriptor {
                endpoint: format!("mock:{seed}"),
                model_id: model_id.into(),
                dim,
                modalities: BTreeSet::from([Modality::Text, Modality::Image]),
            },
            planted: None,
        }
    }

    pub fn planted(mut self, signal: PlantedSignal) -> Self {
        self.planted = Some(signal);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn anchored(&self, anchor: &Anchor, noise: f64, modality: Modality, digest: &str, prompt: &str) -> Vec<f32> {
        let dim = self.descriptor.dim;
        let center = keyed_unit_vector(self.seed, dim, "anchor", &anchor.key, "");
        let jitter = mock_embed(self.seed, dim, modality, digest, prompt);
        let sign = if anchor.negate { -1.0 } else { 1.0 };
        let mixed: Vec<f32> = center
            .iter()
            .zip(&jitter)
            .map(|(c, j)| (sign * f64::from(*c) + noise * f64::from(*j)) as f32)
            .collect();
        l2_normalize(&mixed).unwrap_or(center)
    }

    /// The vector this provider produces for an input, without any I/O.
    pub fn vector_for(&self, modality: Modality, digest: &str, prompt: &str) -> Vec<f32> {
        if let Some(planted) = &self.planted {
            let anchor = match modality {
                Modality::Text => planted.text_anchor(prompt),
                Modality::Image => planted.image_anchor(digest, prompt),
            };
            if let Some(anchor) = anchor {
                return self.anchored(anchor, planted.noise, modality, digest, prompt);
            }
        }
        mock_embed(self.seed, self.descriptor.dim, modality, digest, prompt)
    }
}

impl EmbeddingProvider for MockProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn needs_image_bytes(&self) -> bool {
        false
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        Ok(self.vector_for(Modality::Text, "", text))
    }

    fn embed_image(&self, image: ImageInput<'_>, prompt: &str) -> Result<Vec<f32>, ProviderError> {
        Ok(self.vector_for(Modality::Image, image.digest, prompt))
    }
}
