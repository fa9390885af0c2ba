//! Retrieval pools of (image, story) entries and exhaustive cosine ranking.
//!
//! Scores are dot products of unit vectors accumulated in f64 in index order
//! and rounded to f32, so every ranking is reproducible bit for bit. Ties are
//! broken by ascending `entry_id`, never by insertion order.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetIndex;
use crate::embed::vector::{decode_values_b64, encode_values_b64};
use crate::embed::{EmbedError, EmbeddingGateway, EmbeddingVector};
use crate::model::{AbstractionLevel, LeveledQuery};
use crate::prompt::{image_prompt_for, query_prompt_for, Granularity, InjectionStrategy, PromptError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid pool configuration: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("embedding image '{image_id}' under context '{context_id}' failed: {source}")]
    EntryEmbedding {
        image_id: String,
        context_id: String,
        #[source]
        source: EmbedError,
    },
    #[error("embedding query '{query_id}' failed: {source}")]
    QueryEmbedding {
        query_id: String,
        #[source]
        source: EmbedError,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("duplicate pool entry '{0}'")]
    DuplicateEntry(String),
    #[error("context '{0}' is not in the dataset")]
    UnknownContext(String),
    #[error("query '{query_id}' refers to context '{context_id}', which has no entries in the pool")]
    ContextNotInPool { query_id: String, context_id: String },
    #[error("pool was built with a level focus of {pool:?} but query '{query_id}' is {query}")]
    LevelMismatch {
        query_id: String,
        query: AbstractionLevel,
        pool: Option<AbstractionLevel>,
    },
    #[error("ground truth for query '{0}' is not in the ranking")]
    GroundTruthAbsent(String),
    #[error("pool dump {path}: {message}")]
    Dump { path: PathBuf, message: String },
}

/// Which pool a configuration needs. `focus` is set for level-aware runs,
/// whose image prompts carry the level instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PoolSpec {
    pub strategy: InjectionStrategy,
    pub granularity: Option<Granularity>,
    pub focus: Option<AbstractionLevel>,
}

impl PoolSpec {
    pub fn new(
        strategy: InjectionStrategy,
        granularity: Option<Granularity>,
        focus: Option<AbstractionLevel>,
    ) -> Result<Self, RetrievalError> {
        match (strategy.uses_context(), granularity) {
            (true, None) => Err(RetrievalError::InvalidSpec(format!("{strategy} needs a granularity"))),
            (false, Some(g)) => Err(RetrievalError::InvalidSpec(format!(
                "{strategy} injects no context but granularity {g} was given"
            ))),
            _ => Ok(Self {
                strategy,
                granularity,
                focus,
            }),
        }
    }

    pub fn level_aware(&self) -> bool {
        self.focus.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub entry_id: String,
    pub image_id: String,
    pub context_id: String,
    pub group_id: String,
    pub embedding: EmbeddingVector,
}

pub fn entry_id(image_id: &str, context_id: &str) -> String {
    format!("{image_id}::{context_id}")
}

/// An immutable set of entries, ordered by `entry_id`.
#[derive(Debug)]
pub struct Pool {
    pub spec: PoolSpec,
    entries: Vec<PoolEntry>,
    dim: usize,
    contexts: HashSet<String>,
    groups: HashMap<String, Vec<usize>>,
}

impl Pool {
    pub fn from_entries(spec: PoolSpec, mut entries: Vec<PoolEntry>) -> Result<Self, RetrievalError> {
        entries.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].entry_id == w[1].entry_id) {
            return Err(RetrievalError::DuplicateEntry(w[0].entry_id.clone()));
        }
        let dim = entries.first().map_or(0, |e| e.embedding.dim());
        if let Some(bad) = entries.iter().find(|e| e.embedding.dim() != dim) {
            return Err(RetrievalError::DimMismatch {
                expected: dim,
                found: bad.embedding.dim(),
            });
        }
        let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            groups.entry(e.group_id.clone()).or_default().push(i);
        }
        Ok(Self {
            spec,
            contexts: entries.iter().map(|e| e.context_id.clone()).collect(),
            entries,
            dim,
            groups,
        })
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains_context(&self, context_id: &str) -> bool {
        self.contexts.contains(context_id)
    }

    /// Indexes of a group's entries, in `entry_id` order.
    pub fn group_entries(&self, group_id: &str) -> &[usize] {
        self.groups.get(group_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Embeds one entry per (image, context) pair of every group. Any failure
/// aborts the whole build.
pub fn build_pool(index: &DatasetIndex<'_>, spec: PoolSpec, gateway: &EmbeddingGateway) -> Result<Pool, RetrievalError> {
    let mut tasks = Vec::new();
    for g in &index.dataset.groups {
        for ctx in index.contexts_of_group(&g.group_id) {
            for img in &g.images {
                tasks.push((img, *ctx, g.group_id.as_str()));
            }
        }
    }
    let entries = gateway.install(|| {
        tasks
            .par_iter()
            .map(|(img, ctx, group_id)| {
                let prompt = image_prompt_for(spec.strategy, ctx, spec.granularity, spec.focus)?;
                let embedding = gateway
                    .embed_image(img, &prompt)
                    .map_err(|source| RetrievalError::EntryEmbedding {
                        image_id: img.image_id.clone(),
                        context_id: ctx.context_id.clone(),
                        source,
                    })?;
                Ok(PoolEntry {
                    entry_id: entry_id(&img.image_id, &ctx.context_id),
                    image_id: img.image_id.clone(),
                    context_id: ctx.context_id.clone(),
                    group_id: group_id.to_string(),
                    embedding,
                })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()
    })?;
    Pool::from_entries(spec, entries)
}

/// Dot product with a fixed left-to-right f64 accumulation, rounded to f32.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc as f32
}

/// Cosine score of a query against an entry (both are unit vectors).
pub fn score(query: &EmbeddingVector, entry: &PoolEntry) -> Result<f32, RetrievalError> {
    if query.dim() != entry.embedding.dim() {
        return Err(RetrievalError::DimMismatch {
            expected: entry.embedding.dim(),
            found: query.dim(),
        });
    }
    Ok(dot(&query.values, &entry.embedding.values))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    /// Index into [`Pool::entries`].
    pub index: usize,
    pub score: f32,
}

/// Descending by score, then ascending by entry id.
pub fn ranking_order(pool: &Pool) -> impl Fn(&Scored, &Scored) -> Ordering + '_ {
    move |a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| pool.entries[a.index].entry_id.cmp(&pool.entries[b.index].entry_id))
    }
}

/// A complete ordering of a pool for one query.
#[derive(Debug, Clone)]
pub struct Ranking<'p> {
    pub query_id: String,
    pub gt_image_id: String,
    pub gt_context_id: String,
    pool: &'p Pool,
    order: Vec<Scored>,
}

impl<'p> Ranking<'p> {
    pub fn order(&self) -> &[Scored] {
        &self.order
    }

    pub fn entry(&self, position: usize) -> &'p PoolEntry {
        &self.pool.entries[self.order[position].index]
    }

    /// `(entry_id, score)` pairs, best first.
    pub fn iter(&self) -> impl Iterator<Item = (&'p str, f32)> + '_ {
        self.order
            .iter()
            .map(|s| (self.pool.entries[s.index].entry_id.as_str(), s.score))
    }
}

/// Ranks the whole pool for an already embedded query.
pub fn rank_vector<'p>(
    pool: &'p Pool,
    query_vec: &EmbeddingVector,
    query_id: &str,
    gt_image_id: &str,
    gt_context_id: &str,
) -> Result<Ranking<'p>, RetrievalError> {
    if !pool.is_empty() && query_vec.dim() != pool.dim {
        return Err(RetrievalError::DimMismatch {
            expected: pool.dim,
            found: query_vec.dim(),
        });
    }
    let mut order: Vec<Scored> = pool
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| Scored {
            index,
            score: dot(&query_vec.values, &e.embedding.values),
        })
        .collect();
    order.sort_by(ranking_order(pool));
    Ok(Ranking {
        query_id: query_id.to_string(),
        gt_image_id: gt_image_id.to_string(),
        gt_context_id: gt_context_id.to_string(),
        pool,
        order,
    })
}

/// Embeds a query under the pool's strategy.
pub fn embed_query(
    index: &DatasetIndex<'_>,
    pool_spec: PoolSpec,
    query: &LeveledQuery,
    gateway: &EmbeddingGateway,
) -> Result<EmbeddingVector, RetrievalError> {
    let ctx = index
        .context(&query.context_id)
        .ok_or_else(|| RetrievalError::UnknownContext(query.context_id.clone()))?;
    if let Some(focus) = pool_spec.focus {
        if focus != query.level {
            return Err(RetrievalError::LevelMismatch {
                query_id: query.query_id.clone(),
                query: query.level,
                pool: pool_spec.focus,
            });
        }
    }
    let prompt = query_prompt_for(
        pool_spec.strategy,
        query,
        ctx,
        pool_spec.granularity,
        pool_spec.level_aware(),
    )?;
    gateway
        .embed_text(&prompt.text)
        .map_err(|source| RetrievalError::QueryEmbedding {
            query_id: query.query_id.clone(),
            source,
        })
}

/// Embeds `query` the way the pool's strategy prescribes and ranks every entry.
pub fn rank<'p>(
    index: &DatasetIndex<'_>,
    pool: &'p Pool,
    query: &LeveledQuery,
    gateway: &EmbeddingGateway,
) -> Result<Ranking<'p>, RetrievalError> {
    if !pool.contains_context(&query.context_id) {
        return Err(RetrievalError::ContextNotInPool {
            query_id: query.query_id.clone(),
            context_id: query.context_id.clone(),
        });
    }
    let qv = embed_query(index, pool.spec, query, gateway)?;
    rank_vector(pool, &qv, &query.query_id, &query.image_id, &query.context_id)
}

/// What counts as retrieving the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchMode {
    /// The exact (image, context) entry.
    EntryExact,
    /// Any entry showing the ground-truth image, whatever its story.
    ImageIdentity,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::EntryExact => "EntryExact",
            MatchMode::ImageIdentity => "ImageIdentity",
        }
    }
}

impl std::str::FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "entryexact" | "exact" => Ok(MatchMode::EntryExact),
            "imageidentity" | "image" => Ok(MatchMode::ImageIdentity),
            _ => Err(format!("unknown match mode '{s}'")),
        }
    }
}

impl std::fmt::Display for MatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// 1-based rank of the ground truth.
pub fn gt_rank(r: &Ranking<'_>, mode: MatchMode) -> Result<usize, RetrievalError> {
    let hit = |e: &PoolEntry| match mode {
        MatchMode::EntryExact => e.image_id == r.gt_image_id && e.context_id == r.gt_context_id,
        MatchMode::ImageIdentity => e.image_id == r.gt_image_id,
    };
    r.order
        .iter()
        .position(|s| hit(&r.pool.entries[s.index]))
        .map(|p| p + 1)
        .ok_or_else(|| RetrievalError::GroundTruthAbsent(r.query_id.clone()))
}

#[derive(Serialize, Deserialize)]
struct DumpRecord {
    entry_id: String,
    image_id: String,
    context_id: String,
    group_id: String,
    model_id: String,
    input_digest: String,
    dim: usize,
    values_b64: String,
}

pub fn write_pool_dump(pool: &Pool, path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in &pool.entries {
        let record = DumpRecord {
            entry_id: e.entry_id.clone(),
            image_id: e.image_id.clone(),
            context_id: e.context_id.clone(),
            group_id: e.group_id.clone(),
            model_id: e.embedding.model_id.clone(),
            input_digest: e.embedding.input_digest.clone(),
            dim: e.embedding.dim(),
            values_b64: encode_values_b64(&e.embedding.values),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_pool_dump(spec: PoolSpec, path: &Path) -> Result<Pool, RetrievalError> {
    let fail = |message: String| RetrievalError::Dump {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| fail(e.to_string()))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| fail(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DumpRecord = serde_json::from_str(&line).map_err(|e| fail(format!("line {}: {e}", i + 1)))?;
        let values = decode_values_b64(&r.values_b64).map_err(|e| fail(format!("line {}: {e}", i + 1)))?;
        if values.len() != r.dim {
            return Err(fail(format!("line {}: dim {} but {} values", i + 1, r.dim, values.len())));
        }
        entries.push(PoolEntry {
            entry_id: r.entry_id,
            image_id: r.image_id,
            context_id: r.context_id,
            group_id: r.group_id,
            embedding: EmbeddingVector {
                values: values.into(),
                model_id: r.model_id,
                input_digest: r.input_digest,
            },
        });
    }
    Pool::from_entries(spec, entries)
}
