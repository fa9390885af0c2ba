//! The command layer: configuration, run directories and the subcommands
//! that tie forging, embedding, retrieval and analysis together.

pub mod config;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::report::{
    discrimination_csv, divergence_csv, metrics_csv, metrics_json, parse_metrics_json, write_text, DiscriminationRow,
    DiscriminationSummary, DivergenceReport, LevelComparison,
};
use crate::analysis::{
    aggregate_report, mann_whitney_u, mean_rank_by_category, query_divergence, within_group_ranks, Alternative,
    AnalysisError, CategorizedRank, CellKey, CellMetrics, DivergenceSample, MetricCell, MetricTable, Target,
};
use crate::dataset::{
    load_dataset, load_manifest, save_dataset, validate_dataset, verify_image_digests, DatasetError, DatasetIndex,
    ValidationReport, Violation,
};
use crate::embed::{
    EmbedError, EmbeddingCache, EmbeddingGateway, EmbeddingProvider, GatewayOptions, GatewayStats, ImageInput,
    MockProvider, PlantedSignal, ProviderDescriptor, ProviderError, RemoteProvider, RetryPolicy,
};
use crate::fixtures::story_aware_signal;
use crate::forge::{
    forge_dataset, unit_count, ForgeControl, ForgeError, HttpTextGenerator, ReplayGenerator, ReplayMode,
    SyntheticGenerator, TextGenerator,
};
use crate::model::{AbstractionLevel, Dataset};
use crate::retrieval::{build_pool, embed_query, gt_rank, rank_vector, Pool, PoolSpec, RetrievalError};

pub use config::{Cell, EmbeddingConfig, ExperimentConfig, GenerationConfig, MockMode};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const EFFECTIVE_CONFIG: &str = "config.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("dataset {path} is invalid ({} violation(s)); first: {}", .violations.len(), .violations.first().map(|v| v.to_string()).unwrap_or_default())]
    Invalid { path: PathBuf, violations: Vec<Violation> },
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("embedding provider at {endpoint}: {source}")]
    Provider {
        endpoint: String,
        #[source]
        source: ProviderError,
    },
    #[error("{0}")]
    MissingArtifact(String),
    #[error("run directory {} is in use by another process (delete {} if that process is gone)", .0.display(), .0.join(LOCK_FILE).display())]
    Locked(PathBuf),
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn embed_exit_code(e: &EmbedError) -> i32 {
    match e {
        e if e.is_provider_failure() => 3,
        EmbedError::CacheMiss { .. } | EmbedError::ImageIo { .. } | EmbedError::Integrity { .. } => 2,
        EmbedError::Unsupported { .. } => 2,
        _ => 4,
    }
}

fn retrieval_exit_code(e: &RetrievalError) -> i32 {
    match e {
        RetrievalError::EntryEmbedding { source, .. } | RetrievalError::QueryEmbedding { source, .. } => {
            embed_exit_code(source)
        }
        RetrievalError::InvalidSpec(_) | RetrievalError::UnknownContext(_) | RetrievalError::ContextNotInPool { .. } => 2,
        _ => 4,
    }
}

impl RunnerError {
    /// 0 success, 2 invalid input or configuration, 3 provider or transport
    /// failure, 4 internal error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_)
            | RunnerError::Dataset(_)
            | RunnerError::Invalid { .. }
            | RunnerError::MissingArtifact(_)
            | RunnerError::Locked(_) => 2,
            RunnerError::Provider { .. } => 3,
            RunnerError::Embed(e) => embed_exit_code(e),
            RunnerError::Retrieval(e) => retrieval_exit_code(e),
            RunnerError::Analysis(e) => match e {
                AnalysisError::Embed(e) => embed_exit_code(e),
                AnalysisError::Retrieval(e) => retrieval_exit_code(e),
                AnalysisError::MissingPair { .. } => 2,
                AnalysisError::Inconsistent(_) => 2,
                _ => 4,
            },
            RunnerError::Forge(e) => match e {
                ForgeError::Generation { .. } | ForgeError::Provider { .. } => 3,
                ForgeError::Interrupted { .. } => 4,
                _ => 2,
            },
            RunnerError::Io { .. } => 4,
        }
    }

    fn is_cache_miss(&self) -> bool {
        let embed = match self {
            RunnerError::Embed(e) => Some(e),
            RunnerError::Retrieval(RetrievalError::EntryEmbedding { source, .. })
            | RunnerError::Retrieval(RetrievalError::QueryEmbedding { source, .. }) => Some(source),
            RunnerError::Analysis(AnalysisError::Embed(e)) => Some(e),
            RunnerError::Analysis(AnalysisError::Retrieval(
                RetrievalError::EntryEmbedding { source, .. } | RetrievalError::QueryEmbedding { source, .. },
            )) => Some(source),
            _ => None,
        };
        matches!(embed, Some(EmbedError::CacheMiss { .. }))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), RunnerError> {
    write_text(path, text).map_err(io_err(path))
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, RunnerError> {
        std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(RunnerError::Locked(run_dir.to_path_buf())),
            Err(e) => Err(RunnerError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Stand-in provider for cache-only runs. It is never called because the
/// gateway refuses misses before reaching it.
struct CacheOnlyProvider {
    descriptor: ProviderDescriptor,
}

impl EmbeddingProvider for CacheOnlyProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn needs_image_bytes(&self) -> bool {
        false
    }

    fn embed_text(&self, _: &str) -> Result<Vec<f32>, ProviderError> {
        Err(ProviderError::Transport("cache-only provider".into()))
    }

    fn embed_image(&self, _: ImageInput<'_>, _: &str) -> Result<Vec<f32>, ProviderError> {
        Err(ProviderError::Transport("cache-only provider".into()))
    }
}

/// A validated dataset together with the run directory its config maps to.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub dataset_path: PathBuf,
    pub dataset: Dataset,
    pub dataset_digest: String,
    pub config_digest: String,
    pub run_dir: PathBuf,
    pub warnings: Vec<Violation>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, RunnerError> {
    config.check()?;
    let path = config.dataset_path()?.to_path_buf();
    let bytes = std::fs::read(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;
    let dataset_digest = hex::encode(Sha256::digest(&bytes));
    let dataset = load_dataset(&path)?;
    let mut report = validate_dataset(&dataset, config.validation());
    if config.embedding.verify_images {
        report.violations.extend(verify_image_digests(&dataset));
    }
    if !report.is_valid() {
        return Err(RunnerError::Invalid {
            path,
            violations: report.violations,
        });
    }
    for w in &report.warnings {
        warn!("{w}");
    }
    let config_digest = config.digest(&dataset_digest);
    let run_dir = config.output_dir.join(&config_digest[..16]);
    Ok(Prepared {
        config: config.clone(),
        dataset_path: path,
        dataset,
        dataset_digest,
        config_digest,
        run_dir,
        warnings: report.warnings,
    })
}

fn gateway_options(config: &ExperimentConfig, offline: bool) -> GatewayOptions {
    GatewayOptions {
        retry: RetryPolicy::default(),
        parallelism: config.embedding.parallelism,
        offline,
        verify_images: config.embedding.verify_images,
    }
}

fn open_cache(config: &ExperimentConfig) -> Result<EmbeddingCache, RunnerError> {
    let path = config.cache_path();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    EmbeddingCache::open(&path).map_err(|e| RunnerError::Embed(e.into()))
}

/// The configured mock, named so that differently shaped mocks never share
/// cache entries.
pub fn mock_provider(embedding: &EmbeddingConfig, dataset: &Dataset, dataset_digest: &str) -> Result<MockProvider, RunnerError> {
    let seed = embedding
        .mock_seed()
        .ok_or_else(|| RunnerError::Config(format!("'{}' is not a mock endpoint", embedding.endpoint)))??;
    let dim = embedding.mock_dim;
    let mode = embedding.mock_mode;
    Ok(match mode {
        MockMode::Random => MockProvider::with_model_id(seed, dim, format!("mock-random-s{seed}-d{dim}")),
        MockMode::Planted | MockMode::StoryAware => {
            let signal: PlantedSignal = if mode == MockMode::Planted {
                PlantedSignal::for_dataset(dataset)
            } else {
                story_aware_signal(dataset)
            };
            let id = format!("mock-{}-s{seed}-d{dim}-{}", mode.as_str(), &dataset_digest[..12]);
            MockProvider::with_model_id(seed, dim, id).planted(signal)
        }
    })
}

/// Gateway for live runs: mock or remote provider behind the shared cache.
pub fn live_gateway(prepared: &Prepared) -> Result<EmbeddingGateway, RunnerError> {
    let config = &prepared.config;
    let provider: Arc<dyn EmbeddingProvider> = if config.embedding.mock_seed().is_some() {
        Arc::new(mock_provider(&config.embedding, &prepared.dataset, &prepared.dataset_digest)?)
    } else {
        let timeout = Duration::from_secs(config.embedding.timeout_secs);
        let remote = RemoteProvider::connect(&config.embedding.endpoint, timeout).map_err(|source| RunnerError::Provider {
            endpoint: config.embedding.endpoint.clone(),
            source,
        })?;
        Arc::new(remote)
    };
    Ok(EmbeddingGateway::new(provider, Some(open_cache(config)?), gateway_options(config, false)))
}

/// Record of one evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub dataset_path: PathBuf,
    pub dataset_digest: String,
    pub provider: ProviderDescriptor,
    pub cells: usize,
    pub stats: RunStats,
    pub started_unix: u64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub provider_calls: u64,
    pub cache_hits: u64,
}

impl From<GatewayStats> for RunStats {
    fn from(s: GatewayStats) -> Self {
        Self {
            provider_calls: s.provider_calls,
            cache_hits: s.cache_hits,
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn read_run_manifest(run_dir: &Path) -> Result<RunManifest, RunnerError> {
    let path = run_dir.join(RUN_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        RunnerError::MissingArtifact(format!(
            "{} not found; run `ctxbench evaluate` with the same configuration first",
            path.display()
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| RunnerError::MissingArtifact(format!("{} is unreadable: {e}", path.display())))
}

/// Gateway that serves only cached embeddings of the model recorded by a
/// previous evaluate run.
pub fn cached_gateway(prepared: &Prepared) -> Result<(EmbeddingGateway, RunManifest), RunnerError> {
    let manifest = read_run_manifest(&prepared.run_dir)?;
    let provider = CacheOnlyProvider {
        descriptor: manifest.provider.clone(),
    };
    let gateway = EmbeddingGateway::new(
        Arc::new(provider),
        Some(open_cache(&prepared.config)?),
        gateway_options(&prepared.config, true),
    );
    Ok((gateway, manifest))
}

/// Cells grouped by the pool they rank against.
fn cells_by_pool(config: &ExperimentConfig) -> BTreeMap<PoolSpec, Vec<Cell>> {
    let mut out: BTreeMap<PoolSpec, Vec<Cell>> = BTreeMap::new();
    for cell in config.cells() {
        out.entry(cell.pool_spec()).or_default().push(cell);
    }
    out
}

/// Ground-truth ranks of every query of `cell`, one list per match mode.
fn cell_ranks(
    index: &DatasetIndex<'_>,
    pool: &Pool,
    cell: &Cell,
    modes: &[crate::retrieval::MatchMode],
    gateway: &EmbeddingGateway,
) -> Result<Vec<Vec<usize>>, RunnerError> {
    let queries: Vec<_> = index.queries_at(cell.level).collect();
    let per_query: Vec<Vec<usize>> = gateway.install(|| {
        queries
            .par_iter()
            .map(|q| {
                let qv = embed_query(index, pool.spec, q, gateway)?;
                let ranking = rank_vector(pool, &qv, &q.query_id, &q.image_id, &q.context_id)?;
                modes.iter().map(|m| gt_rank(&ranking, *m)).collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, RetrievalError>>()
    })?;
    Ok((0..modes.len())
        .map(|m| per_query.iter().map(|r| r[m]).collect())
        .collect())
}

fn levels_of(config: &ExperimentConfig) -> Vec<AbstractionLevel> {
    let mut levels = config.levels.clone();
    levels.sort();
    levels.dedup();
    levels
}

/// Result of `evaluate`.
pub struct EvaluateOutcome {
    pub run_dir: PathBuf,
    pub table: MetricTable,
    pub manifest: RunManifest,
}

/// Builds every configured pool, ranks every query and writes the metric
/// tables, the effective config and the run manifest.
pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<EvaluateOutcome, RunnerError> {
    let started = Instant::now();
    let prepared = prepare(config)?;
    let _lock = RunLock::acquire(&prepared.run_dir)?;
    let gateway = live_gateway(&prepared)?;
    let index = DatasetIndex::new(&prepared.dataset);
    let modes = config.sorted_match_modes();

    let mut cells = Vec::new();
    for (spec, pool_cells) in cells_by_pool(config) {
        let pool = build_pool(&index, spec, &gateway)?;
        info!("pool {:?}: {} entries", spec, pool.len());
        for cell in &pool_cells {
            let ranks = cell_ranks(&index, &pool, cell, &modes, &gateway)?;
            for (mode, ranks) in modes.iter().zip(ranks) {
                cells.push(MetricCell {
                    key: CellKey {
                        strategy: cell.strategy,
                        granularity: cell.granularity,
                        level: cell.level,
                        level_aware: cell.level_aware,
                        match_mode: *mode,
                    },
                    metrics: CellMetrics::from_ranks(&ranks)?,
                });
            }
        }
    }
    // Bare query texts feed the divergence analysis; embedding them now lets
    // `analyze` run from the cache alone.
    for level in levels_of(config) {
        if let Err(e) = query_divergence(&index, level, &gateway) {
            match e {
                AnalysisError::MissingPair { .. } => warn!("divergence unavailable at {level}: {e}"),
                e => return Err(e.into()),
            }
        }
    }

    let table = MetricTable::new(gateway.model_id(), gateway.dim(), cells);
    let run_dir = &prepared.run_dir;
    write_file(&run_dir.join("metrics.csv"), &metrics_csv(&table))?;
    write_file(&run_dir.join("metrics.json"), &metrics_json(&table))?;
    write_file(&run_dir.join(EFFECTIVE_CONFIG), &to_json(config))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: prepared.config_digest.clone(),
        dataset_path: prepared.dataset_path.clone(),
        dataset_digest: prepared.dataset_digest.clone(),
        provider: gateway.descriptor().clone(),
        cells: table.cells.len(),
        stats: gateway.stats().into(),
        started_unix: unix_now().saturating_sub(started.elapsed().as_secs()),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    write_file(&run_dir.join(RUN_MANIFEST), &to_json(&manifest))?;
    Ok(EvaluateOutcome {
        run_dir: prepared.run_dir,
        table,
        manifest,
    })
}

/// Result of `embed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EmbedOutcome {
    pub pools: usize,
    pub entries: usize,
    pub queries: usize,
    pub stats: RunStats,
}

/// Embeds everything `evaluate` and `analyze` need, without ranking.
pub fn cmd_embed(config: &ExperimentConfig) -> Result<EmbedOutcome, RunnerError> {
    let prepared = prepare(config)?;
    let gateway = live_gateway(&prepared)?;
    let index = DatasetIndex::new(&prepared.dataset);
    let mut outcome = EmbedOutcome {
        pools: 0,
        entries: 0,
        queries: 0,
        stats: RunStats::default(),
    };
    for (spec, pool_cells) in cells_by_pool(config) {
        let pool = build_pool(&index, spec, &gateway)?;
        outcome.pools += 1;
        outcome.entries += pool.len();
        for cell in pool_cells {
            let queries: Vec<_> = index.queries_at(cell.level).collect();
            gateway.install(|| {
                queries
                    .par_iter()
                    .try_for_each(|q| embed_query(&index, spec, q, &gateway).map(drop))
            })?;
            outcome.queries += queries.len();
        }
    }
    for level in levels_of(config) {
        if let Err(e) = query_divergence(&index, level, &gateway) {
            match e {
                AnalysisError::MissingPair { .. } => warn!("divergence unavailable at {level}: {e}"),
                e => return Err(e.into()),
            }
        }
    }
    outcome.stats = gateway.stats().into();
    Ok(outcome)
}

/// Result of `analyze`.
pub struct AnalyzeOutcome {
    pub run_dir: PathBuf,
    pub divergence: DivergenceReport,
    pub discrimination: Vec<DiscriminationSummary>,
    pub stats: RunStats,
}

fn divergence_report(model_id: &str, samples: &[DivergenceSample]) -> Result<DivergenceReport, RunnerError> {
    let mut by_level: BTreeMap<AbstractionLevel, Vec<f64>> = BTreeMap::new();
    for s in samples {
        by_level.entry(s.level).or_default().push(s.divergence);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_by_level = by_level.iter().map(|(l, v)| (*l, mean(v))).collect();
    let mut comparisons = Vec::new();
    if let Some(base) = by_level.get(&AbstractionLevel::L1) {
        for (level, values) in by_level.iter().filter(|(l, _)| **l != AbstractionLevel::L1) {
            comparisons.push(LevelComparison {
                baseline: AbstractionLevel::L1,
                level: *level,
                baseline_mean: mean(base),
                level_mean: mean(values),
                two_sided: mann_whitney_u(values, base, Alternative::TwoSided)?,
                level_greater: mann_whitney_u(values, base, Alternative::AGreater)?,
            });
        }
    }
    Ok(DivergenceReport {
        model_id: model_id.to_string(),
        samples: samples.len(),
        mean_by_level,
        comparisons,
    })
}

/// Discrimination rows and per-cell means for one cell.
fn cell_discrimination(
    index: &DatasetIndex<'_>,
    pool: &Pool,
    cell: &Cell,
    gateway: &EmbeddingGateway,
) -> Result<(Vec<DiscriminationRow>, DiscriminationSummary), RunnerError> {
    let queries: Vec<_> = index.queries_at(cell.level).collect();
    let per_query: Vec<Vec<CategorizedRank>> = gateway.install(|| {
        queries
            .par_iter()
            .map(|q| {
                let qv = embed_query(index, pool.spec, q, gateway)?;
                let group = index.group_of_image(&q.image_id).ok_or_else(|| {
                    AnalysisError::InvalidInput(format!("image '{}' belongs to no group", q.image_id))
                })?;
                within_group_ranks(
                    pool,
                    &qv,
                    Target {
                        image_id: &q.image_id,
                        context_id: &q.context_id,
                        group_id: &group.group_id,
                    },
                )
            })
            .collect::<Result<Vec<_>, AnalysisError>>()
    })?;
    let mut rows = Vec::new();
    for (q, ranks) in queries.iter().zip(&per_query) {
        for (category, (count, mean_rank)) in crate::analysis::discrimination::summarize(ranks) {
            rows.push(DiscriminationRow {
                strategy: cell.strategy,
                granularity: cell.granularity,
                level: cell.level,
                level_aware: cell.level_aware,
                query_id: q.query_id.clone(),
                category,
                count,
                mean_rank,
            });
        }
    }
    let summary = DiscriminationSummary {
        strategy: cell.strategy,
        granularity: cell.granularity,
        level: cell.level,
        level_aware: cell.level_aware,
        queries: queries.len(),
        mean_rank: mean_rank_by_category(per_query.iter().map(Vec::as_slice)),
    };
    Ok((rows, summary))
}

fn analyze_inner(prepared: &Prepared, gateway: &EmbeddingGateway) -> Result<AnalyzeOutcome, RunnerError> {
    let config = &prepared.config;
    let index = DatasetIndex::new(&prepared.dataset);
    let mut samples = Vec::new();
    for level in levels_of(config) {
        samples.extend(query_divergence(&index, level, gateway)?);
    }
    let divergence = divergence_report(gateway.model_id(), &samples)?;
    let run_dir = &prepared.run_dir;
    write_file(&run_dir.join("divergence.csv"), &divergence_csv(&samples))?;
    write_file(&run_dir.join("divergence.json"), &to_json(&divergence))?;

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    if config.discrimination {
        for (spec, pool_cells) in cells_by_pool(config) {
            let pool = build_pool(&index, spec, gateway)?;
            for cell in &pool_cells {
                let (r, s) = cell_discrimination(&index, &pool, cell, gateway)?;
                rows.extend(r);
                summaries.push(s);
            }
        }
        write_file(&run_dir.join("discrimination.csv"), &discrimination_csv(&rows))?;
        write_file(&run_dir.join("discrimination_summary.json"), &to_json(&summaries))?;
    }
    Ok(AnalyzeOutcome {
        run_dir: prepared.run_dir.clone(),
        divergence,
        discrimination: summaries,
        stats: gateway.stats().into(),
    })
}

/// Query divergence with L1-versus-level tests, and within-group
/// discrimination ranks, computed from cached embeddings only.
pub fn cmd_analyze(config: &ExperimentConfig) -> Result<AnalyzeOutcome, RunnerError> {
    let prepared = prepare(config)?;
    let (gateway, _) = cached_gateway(&prepared)?;
    let _lock = RunLock::acquire(&prepared.run_dir)?;
    analyze_inner(&prepared, &gateway).map_err(|e| {
        if e.is_cache_miss() {
            RunnerError::MissingArtifact(format!(
                "{e}; run `ctxbench evaluate` (or `ctxbench embed`) with the same configuration first"
            ))
        } else {
            e
        }
    })
}

/// Checks a dataset file and, optionally, its images.
pub fn cmd_validate(config: &ExperimentConfig) -> Result<ValidationReport, RunnerError> {
    let path = config.dataset_path()?;
    let dataset = load_dataset(path)?;
    let mut report = validate_dataset(&dataset, config.validation());
    if config.embedding.verify_images {
        report.violations.extend(verify_image_digests(&dataset));
    }
    Ok(report)
}

/// Merges the metric tables of several runs of one model.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<MetricTable, RunnerError> {
    if run_dirs.is_empty() {
        return Err(RunnerError::Config("report needs at least one run directory".into()));
    }
    let mut tables = Vec::new();
    for dir in run_dirs {
        let path = dir.join("metrics.json");
        let text = std::fs::read_to_string(&path).map_err(|_| {
            RunnerError::MissingArtifact(format!("{} not found; run `ctxbench evaluate` first", path.display()))
        })?;
        tables.push(parse_metrics_json(&text)?);
    }
    let table = aggregate_report(&tables)?;
    write_file(&out_dir.join("metrics.csv"), &metrics_csv(&table))?;
    write_file(&out_dir.join("metrics.json"), &metrics_json(&table))?;
    Ok(table)
}

/// Result of `forge`.
pub struct ForgeOutcome {
    pub dataset_path: PathBuf,
    pub units: usize,
    pub generator_model: String,
}

fn generator_for(config: &GenerationConfig) -> Result<Arc<dyn TextGenerator>, RunnerError> {
    let timeout = Duration::from_secs(config.timeout_secs);
    let live: Option<Arc<dyn TextGenerator>> = match &config.provider {
        Some(d) if !config.replay_only => Some(Arc::new(HttpTextGenerator::new(d.clone(), timeout))),
        Some(_) => None,
        None => Some(Arc::new(SyntheticGenerator::default())),
    };
    let Some(store) = &config.replay else {
        return live.ok_or_else(|| RunnerError::Config("replay_only needs a replay store".into()));
    };
    let model_id = match (&config.provider, &live) {
        (Some(d), _) => d.model_id.clone(),
        (None, Some(g)) => g.model_id().to_string(),
        (None, None) => unreachable!("a synthetic generator is always live"),
    };
    let mode = if config.replay_only {
        ReplayMode::ReplayOnly
    } else {
        ReplayMode::RecordMissing
    };
    let replay = ReplayGenerator::open(store, live, &model_id, mode)
        .map_err(|e| RunnerError::Config(format!("replay store: {e}")))?;
    Ok(Arc::new(replay))
}

/// Path of the checkpoint kept next to a forged dataset.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".checkpoint.jsonl");
    out.with_file_name(name)
}

/// Forges a dataset from the configured manifest into `out`, resuming from
/// the checkpoint beside it.
pub fn cmd_forge(config: &ExperimentConfig, out: &Path, control: ForgeControl) -> Result<ForgeOutcome, RunnerError> {
    let manifest_path = config
        .manifest
        .as_deref()
        .ok_or_else(|| RunnerError::Config("no manifest configured (use --manifest)".into()))?;
    let manifest = load_manifest(manifest_path)?;
    let generator = generator_for(&config.generation)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let dataset = forge_dataset(&manifest, &config.forge, generator.as_ref(), Some(&checkpoint_path(out)), control)?;
    save_dataset(&dataset, out)?;
    Ok(ForgeOutcome {
        dataset_path: out.to_path_buf(),
        units: unit_count(&config.forge),
        generator_model: generator.model_id().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::synthetic_dataset;
    use crate::model::ImageSource;
    use crate::prompt::InjectionStrategy;
    use crate::retrieval::MatchMode;

    fn setup(groups: usize, size: usize) -> (tempfile::TempDir, ExperimentConfig) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&synthetic_dataset(groups, size, ImageSource::Coco), &path).unwrap();
        let config = ExperimentConfig {
            dataset: Some(path),
            output_dir: dir.path().join("runs"),
            ..Default::default()
        };
        (dir, config)
    }

    #[test]
    fn evaluate_writes_one_row_per_strategy_and_level() {
        let (_dir, config) = setup(3, 5);
        let out = cmd_evaluate(&config).unwrap();
        let csv = std::fs::read_to_string(out.run_dir.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 * 4);
        for f in ["metrics.json", RUN_MANIFEST, EFFECTIVE_CONFIG] {
            assert!(out.run_dir.join(f).exists(), "{f}");
        }
        assert!(!out.run_dir.join(LOCK_FILE).exists());
        let echoed: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(out.run_dir.join(EFFECTIVE_CONFIG)).unwrap()).unwrap();
        assert_eq!(echoed, config);
    }

    #[test]
    fn warm_rerun_calls_no_provider() {
        let (_dir, config) = setup(2, 5);
        let first = cmd_evaluate(&config).unwrap();
        assert!(first.manifest.stats.provider_calls > 0);
        let second = cmd_evaluate(&config).unwrap();
        assert_eq!(second.manifest.stats.provider_calls, 0);
        assert_eq!(
            std::fs::read(first.run_dir.join("metrics.csv")).unwrap(),
            std::fs::read(second.run_dir.join("metrics.csv")).unwrap()
        );
    }

    #[test]
    fn planted_mock_is_perfect() {
        let (_dir, mut config) = setup(3, 5);
        config.embedding.mock_mode = MockMode::Planted;
        let out = cmd_evaluate(&config).unwrap();
        for c in &out.table.cells {
            assert_eq!(c.metrics.recall_at(1), Some(1.0), "{:?}", c.key);
            assert_eq!(c.metrics.mrr, 1.0);
        }
    }

    #[test]
    fn analyze_needs_evaluate_first() {
        let (_dir, config) = setup(2, 5);
        let err = cmd_analyze(&config).err().unwrap();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("evaluate"), "{err}");
    }

    #[test]
    fn analyze_after_evaluate_is_offline() {
        let (_dir, mut config) = setup(2, 5);
        config.strategies = vec![InjectionStrategy::CtxB];
        config.match_modes = vec![MatchMode::ImageIdentity, MatchMode::EntryExact];
        cmd_evaluate(&config).unwrap();
        let out = cmd_analyze(&config).unwrap();
        assert_eq!(out.stats.provider_calls, 0);
        assert_eq!(out.divergence.samples, 2 * 5 * 4);
        assert_eq!(out.divergence.comparisons.len(), 3);
        let csv = std::fs::read_to_string(out.run_dir.join("discrimination.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 * (2 * 5 * 2) * 4);
    }

    #[test]
    fn second_holder_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        let err = RunLock::acquire(dir.path()).err().unwrap();
        assert!(matches!(err, RunnerError::Locked(_)));
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn invalid_dataset_exits_with_two() {
        let (_dir, mut config) = setup(1, 5);
        config.paper_faithful = true;
        let mut d = synthetic_dataset(1, 5, ImageSource::Coco);
        d.contexts.pop();
        save_dataset(&d, config.dataset.as_ref().unwrap()).unwrap();
        let err = cmd_evaluate(&config).err().unwrap();
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn report_merges_runs() {
        let (_dir, mut config) = setup(2, 5);
        config.strategies = vec![InjectionStrategy::NoCtx];
        let a = cmd_evaluate(&config).unwrap();
        config.strategies = vec![InjectionStrategy::CtxQ];
        let b = cmd_evaluate(&config).unwrap();
        let out = tempfile::tempdir().unwrap();
        let merged = cmd_report(&[a.run_dir, b.run_dir], out.path()).unwrap();
        assert_eq!(merged.cells.len(), 8);
        assert!(out.path().join("metrics.csv").exists());
    }

    #[test]
    fn checkpoint_sits_beside_the_dataset() {
        assert_eq!(checkpoint_path(Path::new("a/b.jsonl")), PathBuf::from("a/b.jsonl.checkpoint.jsonl"));
    }
}
