use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunnerError;
use crate::dataset::ValidationOptions;
use crate::forge::{ForgeConfig, TextGenDescriptor};
use crate::model::AbstractionLevel;
use crate::prompt::{Granularity, InjectionStrategy};
use crate::retrieval::{MatchMode, PoolSpec};

/// How the in-process mock embeds inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    /// Independent pseudorandom directions.
    Random,
    /// Queries sit next to their ground-truth image.
    Planted,
    /// Queries sit next to their ground-truth (image, story) entry.
    StoryAware,
}

impl std::str::FromStr for MockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random" => Ok(MockMode::Random),
            "planted" => Ok(MockMode::Planted),
            "story_aware" => Ok(MockMode::StoryAware),
            _ => Err(format!("unknown mock mode '{s}'")),
        }
    }
}

impl MockMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MockMode::Random => "random",
            MockMode::Planted => "planted",
            MockMode::StoryAware => "story_aware",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    /// `mock:<seed>` or the base URL of an embedding service.
    pub endpoint: String,
    pub mock_mode: MockMode,
    pub mock_dim: usize,
    pub timeout_secs: u64,
    pub parallelism: usize,
    /// Check image bytes against their digests before embedding.
    pub verify_images: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            endpoint: "mock:42".into(),
            mock_mode: MockMode::Random,
            mock_dim: 64,
            timeout_secs: 60,
            parallelism: 4,
            verify_images: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn mock_seed(&self) -> Option<Result<u64, RunnerError>> {
        self.endpoint.strip_prefix("mock:").map(|s| {
            s.parse()
                .map_err(|_| RunnerError::Config(format!("mock endpoint needs a numeric seed, got '{}'", self.endpoint)))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// `None` uses the built-in synthetic generator.
    pub provider: Option<TextGenDescriptor>,
    /// Record/replay store for generation responses.
    pub replay: Option<PathBuf>,
    /// Refuse to call the provider; serve recorded answers only.
    pub replay_only: bool,
    pub timeout_secs: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            provider: None,
            replay: None,
            replay_only: false,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub forge: ForgeConfig,
    pub generation: GenerationConfig,
    pub embedding: EmbeddingConfig,
    pub strategies: Vec<InjectionStrategy>,
    pub granularities: Vec<Granularity>,
    pub levels: Vec<AbstractionLevel>,
    pub level_aware: Vec<bool>,
    pub match_modes: Vec<MatchMode>,
    pub paper_faithful: bool,
    pub strict_sentences: bool,
    /// Run directories are created below this one.
    pub output_dir: PathBuf,
    /// Embedding cache; defaults to `<output_dir>/embeddings.jsonl`.
    pub cache: Option<PathBuf>,
    /// Also compute within-group discrimination ranks in `analyze`.
    pub discrimination: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            manifest: None,
            forge: ForgeConfig::default(),
            generation: GenerationConfig::default(),
            embedding: EmbeddingConfig::default(),
            strategies: InjectionStrategy::ALL.to_vec(),
            granularities: vec![Granularity::PlusFullSynopsis],
            levels: AbstractionLevel::ALL.to_vec(),
            level_aware: vec![false],
            match_modes: vec![MatchMode::ImageIdentity],
            paper_faithful: false,
            strict_sentences: false,
            output_dir: PathBuf::from("runs"),
            cache: None,
            discrimination: true,
        }
    }
}

/// One (strategy, granularity, level, level-aware) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub strategy: InjectionStrategy,
    pub granularity: Option<Granularity>,
    pub level: AbstractionLevel,
    pub level_aware: bool,
}

impl Cell {
    pub fn pool_spec(&self) -> PoolSpec {
        PoolSpec {
            strategy: self.strategy,
            granularity: self.granularity,
            focus: self.level_aware.then_some(self.level),
        }
    }
}

/// The fields that decide a run's results.
#[derive(Serialize)]
struct DigestView<'a> {
    dataset_digest: &'a str,
    endpoint: &'a str,
    mock_mode: Option<MockMode>,
    mock_dim: Option<usize>,
    strategies: &'a [InjectionStrategy],
    granularities: &'a [Granularity],
    levels: &'a [AbstractionLevel],
    level_aware: &'a [bool],
    match_modes: &'a [MatchMode],
    paper_faithful: bool,
    strict_sentences: bool,
    discrimination: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| RunnerError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<(), RunnerError> {
        if self.strategies.is_empty() || self.levels.is_empty() {
            return Err(RunnerError::Config("at least one strategy and one level are required".into()));
        }
        if self.level_aware.is_empty() || self.match_modes.is_empty() {
            return Err(RunnerError::Config("level_aware and match_modes must not be empty".into()));
        }
        if self.strategies.iter().any(|s| s.uses_context()) && self.granularities.is_empty() {
            return Err(RunnerError::Config("context strategies need at least one granularity".into()));
        }
        if self.embedding.parallelism == 0 {
            return Err(RunnerError::Config("parallelism must be at least 1".into()));
        }
        if let Some(seed) = self.embedding.mock_seed() {
            seed?;
            if self.embedding.mock_dim == 0 {
                return Err(RunnerError::Config("mock_dim must be positive".into()));
            }
        } else if !(self.embedding.endpoint.starts_with("http://") || self.embedding.endpoint.starts_with("https://")) {
            return Err(RunnerError::Config(format!(
                "embedding endpoint '{}' is neither mock:<seed> nor an http(s) URL",
                self.embedding.endpoint
            )));
        }
        Ok(())
    }

    pub fn validation(&self) -> ValidationOptions {
        ValidationOptions {
            paper_faithful: self.paper_faithful,
            strict_sentences: self.strict_sentences,
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.output_dir.join("embeddings.jsonl"))
    }

    pub fn dataset_path(&self) -> Result<&Path, RunnerError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| RunnerError::Config("no dataset path configured (use --dataset)".into()))
    }

    /// Every configured cell in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut strategies = self.strategies.clone();
        strategies.sort();
        strategies.dedup();
        let mut granularities = self.granularities.clone();
        granularities.sort();
        granularities.dedup();
        let mut levels = self.levels.clone();
        levels.sort();
        levels.dedup();
        let mut aware = self.level_aware.clone();
        aware.sort();
        aware.dedup();
        let mut out = Vec::new();
        for s in strategies {
            let gs: Vec<Option<Granularity>> = if s.uses_context() {
                granularities.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for g in gs {
                for &la in &aware {
                    for &level in &levels {
                        out.push(Cell {
                            strategy: s,
                            granularity: g,
                            level,
                            level_aware: la,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn sorted_match_modes(&self) -> Vec<MatchMode> {
        let mut m = self.match_modes.clone();
        m.sort();
        m.dedup();
        m
    }

    /// Digest naming the run directory.
    pub fn digest(&self, dataset_digest: &str) -> String {
        let mock = self.embedding.mock_seed().is_some();
        let view = DigestView {
            dataset_digest,
            endpoint: &self.embedding.endpoint,
            mock_mode: mock.then_some(self.embedding.mock_mode),
            mock_dim: mock.then_some(self.embedding.mock_dim),
            strategies: &self.strategies,
            granularities: &self.granularities,
            levels: &self.levels,
            level_aware: &self.level_aware,
            match_modes: &self.match_modes,
            paper_faithful: self.paper_faithful,
            strict_sentences: self.strict_sentences,
            discrimination: self.discrimination,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&view).expect("digest view serializes")))
    }
}
