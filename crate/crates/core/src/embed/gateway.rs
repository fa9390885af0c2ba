use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use thiserror::Error;

use super::cache::{CacheError, EmbeddingCache};
use super::provider::{EmbeddingProvider, ImageInput, ProviderDescriptor, ProviderError};
use super::vector::{input_digest, l2_normalize, EmbeddingVector, Modality};
use crate::dataset::read_image_bytes;
use crate::model::ImageRef;
use crate::prompt::{RenderedPrompt, Side};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider unreachable after {attempts} attempt(s): {last}")]
    Transport { attempts: u32, last: ProviderError },
    #[error("embedding protocol violation: {0}")]
    Protocol(String),
    #[error("embedding provider rejected the request: {0}")]
    Rejected(ProviderError),
    #[error("provider returned a zero or non-finite vector for input {input_digest}")]
    Degenerate { input_digest: String },
    #[error("model '{model_id}' does not embed {modality}")]
    Unsupported { model_id: String, modality: Modality },
    #[error("{0:?}-side prompt passed where an image prompt is required")]
    WrongSide(Side),
    #[error("cannot read image '{image_id}': {source}")]
    ImageIo {
        image_id: String,
        #[source]
        source: io::Error,
    },
    #[error("image '{image_id}' does not match its recorded digest")]
    Integrity { image_id: String },
    #[error("no cached embedding for input {input_digest} and the gateway is cache-only")]
    CacheMiss { input_digest: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

impl EmbedError {
    /// Failures caused by the provider or the network rather than local data.
    pub fn is_provider_failure(&self) -> bool {
        matches!(
            self,
            EmbedError::Transport { .. } | EmbedError::Protocol(_) | EmbedError::Rejected(_) | EmbedError::Degenerate { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    /// Adds up to 50% random delay on top of each backoff step.
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let base = self.base_delay.mul_f64(2f64.powi(attempt.saturating_sub(1) as i32));
        if self.jitter {
            base.mul_f64(1.0 + rand::rng().random_range(0.0..0.5))
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatewayOptions {
    pub retry: RetryPolicy,
    /// Maximum in-flight provider requests.
    pub parallelism: usize,
    /// Serve from the cache only; misses are errors.
    pub offline: bool,
    /// Read and check image bytes even when the provider only needs digests.
    pub verify_images: bool,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            parallelism: 4,
            offline: false,
            verify_images: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct GatewayStats {
    /// Provider requests issued, retries included.
    pub provider_calls: u64,
    pub cache_hits: u64,
}

/// The only path by which embeddings enter the harness. Every vector it
/// returns has the provider's declared dimension and unit norm.
pub struct EmbeddingGateway {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Option<EmbeddingCache>,
    options: GatewayOptions,
    threads: rayon::ThreadPool,
    provider_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl EmbeddingGateway {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, cache: Option<EmbeddingCache>, options: GatewayOptions) -> Self {
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallelism.max(1))
            .thread_name(|i| format!("embed-{i}"))
            .build()
            .expect("embedding thread pool");
        Self {
            provider,
            cache,
            options,
            threads,
            provider_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// Gateway with an in-memory cache and default options.
    pub fn with_provider(provider: impl EmbeddingProvider + 'static) -> Self {
        Self::new(Arc::new(provider), Some(EmbeddingCache::in_memory()), GatewayOptions::default())
    }

    pub fn descriptor(&self) -> &ProviderDescriptor {
        self.provider.descriptor()
    }

    pub fn model_id(&self) -> &str {
        &self.provider.descriptor().model_id
    }

    pub fn dim(&self) -> usize {
        self.provider.descriptor().dim
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            provider_calls: self.provider_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }

    /// Runs `f` on the gateway's bounded pool, so parallel iterators inside
    /// it keep at most `parallelism` requests in flight.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.threads.install(f)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.require(Modality::Text)?;
        let digest = input_digest(Modality::Text, None, text);
        if let Some(hit) = self.lookup(&digest)? {
            return Ok(hit);
        }
        let raw = self.call(|| self.provider.embed_text(text))?;
        self.finish(digest, raw)
    }

    pub fn embed_image(&self, image: &ImageRef, prompt: &RenderedPrompt) -> Result<EmbeddingVector, EmbedError> {
        if prompt.side != Side::Image {
            return Err(EmbedError::WrongSide(prompt.side));
        }
        self.require(Modality::Image)?;
        let digest = input_digest(Modality::Image, Some(&image.digest), &prompt.text);
        if let Some(hit) = self.lookup(&digest)? {
            return Ok(hit);
        }
        let bytes = if self.provider.needs_image_bytes() || self.options.verify_images {
            let bytes = read_image_bytes(image).map_err(|source| EmbedError::ImageIo {
                image_id: image.image_id.clone(),
                source,
            })?;
            if !image.matches_bytes(&bytes) {
                return Err(EmbedError::Integrity {
                    image_id: image.image_id.clone(),
                });
            }
            Some(bytes)
        } else {
            None
        };
        let input = ImageInput {
            image_id: &image.image_id,
            digest: &image.digest,
            bytes: bytes.as_deref(),
        };
        let raw = self.call(|| self.provider.embed_image(input, &prompt.text))?;
        self.finish(digest, raw)
    }

    fn require(&self, modality: Modality) -> Result<(), EmbedError> {
        let d = self.provider.descriptor();
        if d.supports(modality) {
            Ok(())
        } else {
            Err(EmbedError::Unsupported {
                model_id: d.model_id.clone(),
                modality,
            })
        }
    }

    fn vector(&self, values: Arc<[f32]>, input_digest: String) -> EmbeddingVector {
        EmbeddingVector {
            values,
            model_id: self.model_id().to_string(),
            input_digest,
        }
    }

    fn lookup(&self, digest: &str) -> Result<Option<EmbeddingVector>, EmbedError> {
        if let Some(values) = self.cache.as_ref().and_then(|c| c.get(self.model_id(), digest)) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Some(self.vector(values, digest.to_string())));
        }
        if self.options.offline {
            return Err(EmbedError::CacheMiss {
                input_digest: digest.to_string(),
            });
        }
        Ok(None)
    }

    fn call(&self, request: impl Fn() -> Result<Vec<f32>, ProviderError>) -> Result<Vec<f32>, EmbedError> {
        let policy = self.options.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.provider_calls.fetch_add(1, Ordering::Relaxed);
            match request() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < policy.max_attempts => {
                    let wait = policy.delay(attempt);
                    log::warn!("embedding request failed ({e}); retry {attempt} in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(e) if e.is_retryable() => {
                    return Err(EmbedError::Transport {
                        attempts: attempt,
                        last: e,
                    })
                }
                Err(ProviderError::Protocol(m)) => return Err(EmbedError::Protocol(m)),
                Err(e) => return Err(EmbedError::Rejected(e)),
            }
        }
    }

    fn finish(&self, digest: String, raw: Vec<f32>) -> Result<EmbeddingVector, EmbedError> {
        let dim = self.dim();
        if raw.len() != dim {
            return Err(EmbedError::Protocol(format!(
                "model '{}' declares dim {dim} but returned {} values",
                self.model_id(),
                raw.len()
            )));
        }
        let values: Arc<[f32]> = l2_normalize(&raw)
            .map_err(|_| EmbedError::Degenerate {
                input_digest: digest.clone(),
            })?
            .into();
        let values = match &self.cache {
            Some(cache) => cache.insert(self.model_id(), &digest, values)?,
            None => values,
        };
        Ok(self.vector(values, digest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::mock::MockProvider;
    use crate::prompt::render_image_prompt;
    use std::collections::BTreeSet;
    use std::sync::Mutex;

    /// Provider with scripted responses, for failure paths.
    struct Scripted {
        descriptor: ProviderDescriptor,
        responses: Mutex<Vec<Result<Vec<f32>, ProviderError>>>,
    }

    impl Scripted {
        fn new(dim: usize, mut responses: Vec<Result<Vec<f32>, ProviderError>>) -> Self {
            responses.reverse();
            Self {
                descriptor: ProviderDescriptor {
                    endpoint: "scripted".into(),
                    model_id: "scripted".into(),
                    dim,
                    modalities: BTreeSet::from([Modality::Text, Modality::Image]),
                },
                responses: Mutex::new(responses),
            }
        }
    }

    impl EmbeddingProvider for Scripted {
        fn descriptor(&self) -> &ProviderDescriptor {
            &self.descriptor
        }
        fn needs_image_bytes(&self) -> bool {
            true
        }
        fn embed_text(&self, _text: &str) -> Result<Vec<f32>, ProviderError> {
            self.responses.lock().unwrap().pop().expect("script exhausted")
        }
        fn embed_image(&self, _image: ImageInput<'_>, _prompt: &str) -> Result<Vec<f32>, ProviderError> {
            self.responses.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn fast_retry() -> GatewayOptions {
        GatewayOptions {
            retry: RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(1),
                jitter: false,
            },
            ..Default::default()
        }
    }

    fn gateway(p: impl EmbeddingProvider + 'static) -> EmbeddingGateway {
        EmbeddingGateway::new(Arc::new(p), Some(EmbeddingCache::in_memory()), fast_retry())
    }

    fn image(dir: &std::path::Path, name: &str, bytes: &[u8]) -> ImageRef {
        let path = dir.join(name);
        std::fs::write(&path, bytes).unwrap();
        ImageRef {
            image_id: name.into(),
            source: crate::model::ImageSource::Other,
            uri: path.display().to_string(),
            digest: ImageRef::digest_bytes(bytes),
        }
    }

    #[test]
    fn repeated_text_is_identical_and_cached() {
        let gw = EmbeddingGateway::with_provider(MockProvider::new(1, 32));
        let a = gw.embed_text("abc").unwrap();
        let b = gw.embed_text("abc").unwrap();
        assert_eq!(a, b);
        assert_eq!(gw.stats(), GatewayStats { provider_calls: 1, cache_hits: 1 });
    }

    #[test]
    fn short_vectors_are_renormalized() {
        let gw = gateway(Scripted::new(2, vec![Ok(vec![0.6 * 0.98, 0.8 * 0.98])]));
        let v = gw.embed_text("x").unwrap();
        assert!((v.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn dim_mismatch_is_protocol_violation_and_not_retried() {
        let gw = gateway(Scripted::new(768, vec![Ok(vec![0.1; 512])]));
        assert!(matches!(gw.embed_text("x"), Err(EmbedError::Protocol(_))));
        assert_eq!(gw.stats().provider_calls, 1);
    }

    #[test]
    fn transport_errors_retry_then_fail_with_attempts() {
        let err = || Err(ProviderError::Transport("refused".into()));
        let gw = gateway(Scripted::new(2, vec![err(), err(), err()]));
        match gw.embed_text("x") {
            Err(EmbedError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overload_then_success() {
        let gw = gateway(Scripted::new(
            2,
            vec![Err(ProviderError::Overloaded("busy".into())), Ok(vec![1.0, 1.0])],
        ));
        let v = gw.embed_text("x").unwrap();
        assert_eq!(gw.stats().provider_calls, 2);
        assert!((v.values[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn rejection_is_not_retried() {
        let gw = gateway(Scripted::new(
            2,
            vec![Err(ProviderError::Rejected { status: 400, message: "bad".into() })],
        ));
        assert!(matches!(gw.embed_text("x"), Err(EmbedError::Rejected(_))));
        assert_eq!(gw.stats().provider_calls, 1);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let gw = gateway(Scripted::new(2, vec![Ok(vec![0.0, 0.0])]));
        assert!(matches!(gw.embed_text("x"), Err(EmbedError::Degenerate { .. })));
    }

    #[test]
    fn story_prompts_get_separate_entries() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(dir.path(), "a.png", b"a");
        let gw = EmbeddingGateway::with_provider(MockProvider::new(1, 32));
        let ctx1 = crate::fixtures::story("g-c1", "g", "Comedy", &[]);
        let ctx2 = crate::fixtures::story("g-c2", "g", "Thriller", &[]);
        let g = Some(crate::prompt::Granularity::GenreTitle);
        let p1 = render_image_prompt(Some(&ctx1), g, None, false).unwrap();
        let p2 = render_image_prompt(Some(&ctx2), g, None, false).unwrap();
        let v1 = gw.embed_image(&img, &p1).unwrap();
        let v2 = gw.embed_image(&img, &p2).unwrap();
        assert_ne!(v1.input_digest, v2.input_digest);
        assert_ne!(v1.values, v2.values);
        let warm = gw.embed_image(&img, &p1).unwrap();
        assert_eq!(warm, v1);
        assert_eq!(gw.stats(), GatewayStats { provider_calls: 2, cache_hits: 1 });
    }

    #[test]
    fn query_prompts_are_refused_for_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(dir.path(), "a.png", b"a");
        let gw = EmbeddingGateway::with_provider(MockProvider::new(1, 8));
        let mut p = render_image_prompt(None, None, None, false).unwrap();
        p.side = Side::Query;
        assert!(matches!(gw.embed_image(&img, &p), Err(EmbedError::WrongSide(Side::Query))));
    }

    #[test]
    fn unreadable_and_tampered_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = image(dir.path(), "a.png", b"a");
        let gw = gateway(Scripted::new(2, vec![]));
        let p = render_image_prompt(None, None, None, false).unwrap();
        img.digest = ImageRef::digest_bytes(b"b");
        assert!(matches!(gw.embed_image(&img, &p), Err(EmbedError::Integrity { .. })));
        img.uri = dir.path().join("missing.png").display().to_string();
        assert!(matches!(gw.embed_image(&img, &p), Err(EmbedError::ImageIo { .. })));
    }

    #[test]
    fn offline_gateway_reports_misses() {
        let gw = EmbeddingGateway::new(
            Arc::new(MockProvider::new(1, 8)),
            Some(EmbeddingCache::in_memory()),
            GatewayOptions {
                offline: true,
                ..Default::default()
            },
        );
        assert!(matches!(gw.embed_text("x"), Err(EmbedError::CacheMiss { .. })));
        assert_eq!(gw.stats().provider_calls, 0);
    }

    #[test]
    fn seeds_differ_through_gateway() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(dir.path(), "a.png", b"a");
        let p = render_image_prompt(None, None, None, false).unwrap();
        let a = EmbeddingGateway::with_provider(MockProvider::new(7, 64)).embed_image(&img, &p).unwrap();
        let b = EmbeddingGateway::with_provider(MockProvider::new(8, 64)).embed_image(&img, &p).unwrap();
        assert_ne!(a.values, b.values);
    }
}
