//! Dataset synthesis: sample image groups, have a text generator write two
//! stories per group and four leveled queries per (image, story), then
//! validate the result.
//!
//! Work is split into units (one story, or the queries of one image under
//! one story) processed in a fixed order. Each finished unit is appended to
//! an optional checkpoint file, so an interrupted forge resumes where it
//! stopped and produces the same bytes as an uninterrupted one.

pub mod generator;
pub mod prompts;
pub mod sampling;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{validate_dataset, DatasetError, ManifestRecord, ValidationOptions, Violation};
use crate::model::{context_id, Dataset, DatasetMetadata, ImageGroup, ImageRef, ImageSource, LeveledQuery, StoryContext};

pub use generator::{
    GenerationError, GenerationRequest, HttpTextGenerator, RateLimiter, ReplayGenerator, ReplayMode, RequestKind,
    SyntheticGenerator, TextGenDescriptor, TextGenerator,
};
pub use sampling::sample_groups;

pub const DEFAULT_GENRES: [&str; 8] = [
    "Comedy", "Thriller", "Romance", "Horror", "Drama", "Science Fiction", "Mystery", "Fantasy",
];

pub const STORIES_PER_GROUP: usize = 2;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Manifest(#[from] DatasetError),
    #[error("not enough images: {0}")]
    InsufficientImages(String),
    #[error("invalid forge configuration: {0}")]
    InvalidConfig(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("generation for {unit} failed after {attempts} attempt(s): {last_error}")]
    Generation {
        unit: String,
        attempts: u32,
        last_error: String,
        /// Raw responses, one per attempt.
        responses: Vec<String>,
    },
    #[error("generation provider failed for {unit}: {source}")]
    Provider {
        unit: String,
        #[source]
        source: GenerationError,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("interrupted after {completed} unit(s)")]
    Interrupted { completed: usize },
    #[error("forged dataset is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub source: ImageSource,
    pub group_size: usize,
    pub group_count: usize,
    pub seed: u64,
    pub genre_pool: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Tries per unit, counting schema-repair re-prompts.
    pub max_attempts: u32,
    pub paper_faithful: bool,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            source: ImageSource::Coco,
            group_size: 10,
            group_count: 100,
            seed: 42,
            genre_pool: DEFAULT_GENRES.iter().map(|g| g.to_string()).collect(),
            temperature: 0.7,
            max_tokens: 2048,
            max_attempts: 3,
            paper_faithful: true,
        }
    }
}

impl ForgeConfig {
    fn check(&self) -> Result<(), ForgeError> {
        let mut distinct: Vec<String> = self.genre_pool.iter().map(|g| g.trim().to_lowercase()).collect();
        distinct.sort();
        distinct.dedup();
        if distinct.len() < STORIES_PER_GROUP || distinct.len() != self.genre_pool.len() {
            return Err(ForgeError::InvalidConfig(format!(
                "genre pool needs at least {STORIES_PER_GROUP} distinct genres and no duplicates"
            )));
        }
        if self.genre_pool.iter().any(|g| g.trim().is_empty()) {
            return Err(ForgeError::InvalidConfig("genre pool has an empty genre".into()));
        }
        if self.max_attempts == 0 {
            return Err(ForgeError::InvalidConfig("max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    /// Digest of everything that shapes the output, including the generator.
    pub fn digest(&self, generator_model: &str) -> String {
        let json = serde_json::to_vec(&(self, generator_model, prompts::prompt_version())).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Test hooks for interrupting a forge.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForgeControl {
    /// Stop with `Interrupted` once this many units are done in this call.
    pub stop_after: Option<usize>,
}

fn generate<T>(
    unit: &str,
    request: &mut GenerationRequest,
    base_prompt: &str,
    generator: &dyn TextGenerator,
    max_attempts: u32,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, ForgeError> {
    let mut responses: Vec<String> = Vec::new();
    let mut last_error = String::new();
    for attempt in 1..=max_attempts {
        request.attempt = attempt;
        let prompt = match responses.last() {
            None => base_prompt.to_string(),
            Some(prev) => prompts::repair_prompt(base_prompt, &last_error, prev),
        };
        let text = generator.generate(request, &prompt).map_err(|source| ForgeError::Provider {
            unit: unit.to_string(),
            source,
        })?;
        match parse(&text) {
            Ok(v) => return Ok(v),
            Err(e) => {
                log::warn!("{unit}: attempt {attempt} unusable: {e}");
                last_error = e;
                responses.push(text);
            }
        }
    }
    Err(ForgeError::Generation {
        unit: unit.to_string(),
        attempts: max_attempts,
        last_error,
        responses,
    })
}

/// Writes one story for `group` in the requested genre.
pub fn generate_story(
    group: &ImageGroup,
    context_id: &str,
    genre: &str,
    generator: &dyn TextGenerator,
    config: &ForgeConfig,
) -> Result<StoryContext, ForgeError> {
    let mut request = GenerationRequest {
        kind: RequestKind::Story,
        group_id: group.group_id.clone(),
        image_ids: group.images.iter().map(|i| i.image_id.clone()).collect(),
        context_id: context_id.to_string(),
        genre: genre.to_string(),
        schema_version: prompts::STORY_PROMPT_VERSION.into(),
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        attempt: 1,
    };
    let prompt = prompts::story_prompt(group, genre);
    generate(&format!("story {context_id}"), &mut request, &prompt, generator, config.max_attempts, |t| {
        prompts::parse_story(t, group, context_id, genre)
    })
}

/// Writes the four leveled queries of `image` under `ctx`.
pub fn generate_queries(
    image: &ImageRef,
    ctx: &StoryContext,
    generator: &dyn TextGenerator,
    config: &ForgeConfig,
) -> Result<Vec<LeveledQuery>, ForgeError> {
    let scene = ctx.scenes.get(&image.image_id).ok_or_else(|| {
        ForgeError::Precondition(format!("story '{}' has no scene for image '{}'", ctx.context_id, image.image_id))
    })?;
    let mut request = GenerationRequest {
        kind: RequestKind::Queries,
        group_id: ctx.group_id.clone(),
        image_ids: vec![image.image_id.clone()],
        context_id: ctx.context_id.clone(),
        genre: ctx.genre.clone(),
        schema_version: prompts::QUERIES_PROMPT_VERSION.into(),
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        attempt: 1,
    };
    let prompt = prompts::queries_prompt(image, ctx, scene);
    generate(
        &format!("queries ({}, {})", image.image_id, ctx.context_id),
        &mut request,
        &prompt,
        generator,
        config.max_attempts,
        |t| prompts::parse_queries(t, &image.image_id, &ctx.context_id),
    )
}

/// Picks `STORIES_PER_GROUP` distinct genres for every group.
pub fn assign_genres(config: &ForgeConfig, groups: usize) -> Vec<Vec<String>> {
    let mut rng = sampling::rng_for(config.seed, "genres");
    (0..groups)
        .map(|_| {
            config
                .genre_pool
                .choose_multiple(&mut rng, STORIES_PER_GROUP)
                .cloned()
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CheckpointRecord {
    Header { config_digest: String },
    Story { unit: String, story: StoryContext },
    Queries { unit: String, queries: Vec<LeveledQuery> },
}

enum UnitOutput {
    Story(StoryContext),
    Queries(Vec<LeveledQuery>),
}

struct Checkpoint {
    path: PathBuf,
    file: File,
    done: HashMap<String, UnitOutput>,
}

impl Checkpoint {
    fn open(path: &Path, config_digest: &str) -> Result<Self, ForgeError> {
        let fail = |message: String| ForgeError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let mut done = HashMap::new();
        let mut valid_len = 0u64;
        let mut has_header = false;
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| fail(e.to_string()))?);
            for (i, line) in reader.split(b'\n').enumerate() {
                let line = line.map_err(|e| fail(e.to_string()))?;
                let record: CheckpointRecord = match serde_json::from_slice(&line) {
                    Ok(r) => r,
                    // A torn last line is dropped below by truncation.
                    Err(_) if line.is_empty() => continue,
                    Err(e) => {
                        let total = std::fs::metadata(path).map_err(|e| fail(e.to_string()))?.len();
                        if valid_len + line.len() as u64 == total {
                            log::warn!("{}: dropping torn final record", path.display());
                            break;
                        }
                        return Err(fail(format!("line {}: {e}", i + 1)));
                    }
                };
                valid_len += line.len() as u64 + 1;
                match record {
                    CheckpointRecord::Header { config_digest: d } => {
                        if d != config_digest {
                            return Err(fail(
                                "written by a different configuration or generator; delete it to start over".into(),
                            ));
                        }
                        has_header = true;
                    }
                    CheckpointRecord::Story { unit, story } => {
                        done.insert(unit, UnitOutput::Story(story));
                    }
                    CheckpointRecord::Queries { unit, queries } => {
                        done.insert(unit, UnitOutput::Queries(queries));
                    }
                }
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| fail(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| fail(e.to_string()))?;
        let on_disk = file.metadata().map_err(|e| fail(e.to_string()))?.len();
        let mut cp = Self {
            path: path.to_path_buf(),
            file,
            done,
        };
        if valid_len > on_disk {
            // The last record is complete but lacks its newline.
            cp.file.write_all(b"\n").map_err(|e| fail(e.to_string()))?;
        } else {
            cp.file.set_len(valid_len).map_err(|e| fail(e.to_string()))?;
        }
        if !has_header {
            cp.append(&CheckpointRecord::Header {
                config_digest: config_digest.to_string(),
            })?;
        }
        Ok(cp)
    }

    fn append(&mut self, record: &CheckpointRecord) -> Result<(), ForgeError> {
        let mut line = serde_json::to_vec(record).expect("checkpoint record serializes");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| ForgeError::Checkpoint {
                path: self.path.clone(),
                message: e.to_string(),
            })
    }
}

/// Runs the whole pipeline. With a checkpoint path, finished units are
/// reused and new ones recorded.
pub fn forge_dataset(
    manifest: &[ManifestRecord],
    config: &ForgeConfig,
    generator: &dyn TextGenerator,
    checkpoint: Option<&Path>,
    control: ForgeControl,
) -> Result<Dataset, ForgeError> {
    config.check()?;
    let groups = sample_groups(manifest, config.source, config.group_size, config.group_count, config.seed)?;
    let genres = assign_genres(config, groups.len());
    let config_digest = config.digest(generator.model_id());
    let mut cp = checkpoint.map(|p| Checkpoint::open(p, &config_digest)).transpose()?;
    let unit_key = |parts: &[&str]| hex::encode(Sha256::digest(format!("{config_digest}\0{}", parts.join("\0"))));

    let mut fresh = 0usize;
    let mut tick = |cp: &mut Option<Checkpoint>, record: CheckpointRecord| -> Result<(), ForgeError> {
        if let Some(cp) = cp.as_mut() {
            cp.append(&record)?;
        }
        fresh += 1;
        match control.stop_after {
            Some(n) if fresh >= n => Err(ForgeError::Interrupted { completed: fresh }),
            _ => Ok(()),
        }
    };

    let mut dataset = Dataset {
        metadata: DatasetMetadata {
            source: Some(config.source),
            group_size: Some(config.group_size),
            group_count: Some(config.group_count),
            seed: Some(config.seed),
            generator_model_id: Some(generator.model_id().to_string()),
            prompt_version: Some(prompts::prompt_version()),
            temperature: Some(config.temperature),
            genre_pool: config.genre_pool.clone(),
            ..Default::default()
        },
        ..Default::default()
    };
    for (group, pair) in groups.iter().zip(&genres) {
        for (ci, genre) in pair.iter().enumerate() {
            let cid = context_id(&group.group_id, ci + 1);
            let key = unit_key(&["story", &cid]);
            let story = match cp.as_ref().and_then(|c| c.done.get(&key)) {
                Some(UnitOutput::Story(s)) => s.clone(),
                _ => {
                    let s = generate_story(group, &cid, genre, generator, config)?;
                    tick(&mut cp, CheckpointRecord::Story {
                        unit: key,
                        story: s.clone(),
                    })?;
                    s
                }
            };
            for image in &group.images {
                let key = unit_key(&["queries", &image.image_id, &cid]);
                let queries = match cp.as_ref().and_then(|c| c.done.get(&key)) {
                    Some(UnitOutput::Queries(q)) => q.clone(),
                    _ => {
                        let q = generate_queries(image, &story, generator, config)?;
                        tick(&mut cp, CheckpointRecord::Queries {
                            unit: key,
                            queries: q.clone(),
                        })?;
                        q
                    }
                };
                dataset.queries.extend(queries);
            }
            dataset.contexts.push(story);
        }
        dataset.groups.push(group.clone());
    }

    let report = validate_dataset(
        &dataset,
        ValidationOptions {
            paper_faithful: config.paper_faithful,
            strict_sentences: true,
        },
    );
    if !report.is_valid() {
        return Err(ForgeError::Validation(report.violations));
    }
    Ok(dataset)
}

/// Number of units a forge of this shape processes.
pub fn unit_count(config: &ForgeConfig) -> usize {
    config.group_count * STORIES_PER_GROUP * (1 + config.group_size)
}
