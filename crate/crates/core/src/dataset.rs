//! JSONL storage, schema validation and lookup indexes for [`Dataset`]s and
//! image manifests.
//!
//! A dataset file holds one record per line. Every record carries a `kind`
//! tag: `meta` (at most one, first), `group`, `context` or `query`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    join_aspects, AbstractionLevel, Dataset, DatasetMetadata, ImageGroup, ImageRef, LeveledQuery,
    StoryContext,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl DatasetError {
    fn io(path: &Path, source: io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Meta(DatasetMetadata),
    Group(ImageGroup),
    Context(StoryContext),
    Query(LeveledQuery),
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RecordRef<'a> {
    Meta(&'a DatasetMetadata),
    Group(&'a ImageGroup),
    Context(&'a StoryContext),
    Query(&'a LeveledQuery),
}

/// Reads a dataset. An empty file yields an empty dataset (which does not
/// validate).
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut dataset = Dataset::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        match record {
            Record::Meta(m) => dataset.metadata = m,
            Record::Group(g) => dataset.groups.push(g),
            Record::Context(c) => dataset.contexts.push(c),
            Record::Query(q) => dataset.queries.push(q),
        }
    }
    Ok(dataset)
}

/// Serializes a dataset to JSONL bytes (UTF-8, LF endings).
pub fn dataset_to_jsonl(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    write_dataset(d, &mut out).expect("writing to a Vec cannot fail");
    out
}

fn write_dataset<W: Write>(d: &Dataset, mut w: W) -> io::Result<()> {
    let records = std::iter::once(RecordRef::Meta(&d.metadata))
        .chain(d.groups.iter().map(RecordRef::Group))
        .chain(d.contexts.iter().map(RecordRef::Context))
        .chain(d.queries.iter().map(RecordRef::Query));
    for record in records {
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    write_dataset(d, BufWriter::new(file)).map_err(|e| DatasetError::io(path, e))
}

/// One line of an image manifest. `movie` and `order` are optional
/// extensions used to keep LSMDC groups within one film and in temporal order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(flatten)]
    pub image: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub movie: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<u64>,
}

impl From<ImageRef> for ManifestRecord {
    fn from(image: ImageRef) -> Self {
        Self {
            image,
            movie: None,
            order: None,
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_manifest(records: &[ManifestRecord], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> io::Result<()> {
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| DatasetError::io(path, e))
}

/// Resolves an image URI to its bytes. Plain paths and `file://` URIs are
/// supported.
pub fn read_image_bytes(image: &ImageRef) -> io::Result<Vec<u8>> {
    let uri = image.uri.as_str();
    let path = if let Some(rest) = uri.strip_prefix("file://") {
        rest
    } else if uri.contains("://") {
        return Err(io::Error::new(
            io::ErrorKind::Unsupported,
            format!("unsupported image uri scheme: {uri}"),
        ));
    } else {
        uri
    };
    std::fs::read(path)
}

/// Counts sentences: a sentence ends at `.`, `!` or `?` followed by
/// whitespace or end of text. Trailing text without a terminator counts as
/// one more sentence.
pub fn count_sentences(text: &str) -> usize {
    let chars: Vec<char> = text.trim().chars().collect();
    let mut count = 0;
    let mut pending = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i;
            while j + 1 < chars.len() && matches!(chars[j + 1], '.' | '!' | '?') {
                j += 1;
            }
            let at_boundary = j + 1 == chars.len() || chars[j + 1].is_whitespace();
            if at_boundary && pending {
                count += 1;
                pending = false;
            }
            i = j + 1;
            continue;
        }
        if !c.is_whitespace() {
            pending = true;
        }
        i += 1;
    }
    if pending {
        count += 1;
    }
    count
}

/// Rule broken by a dataset record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Rule {
    NoGroups,
    DuplicateId,
    GroupSize,
    ContextCount,
    UnknownGroup,
    EmptyField,
    ScenesIncomplete,
    SentenceCount,
    GenreCollision,
    UnknownContext,
    ImageOutsideGroup,
    QueryText,
    DuplicateQuery,
    LevelSetIncomplete,
    Integrity,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::NoGroups => "no groups",
            Rule::DuplicateId => "duplicate identifier",
            Rule::GroupSize => "group size",
            Rule::ContextCount => "contexts per group",
            Rule::UnknownGroup => "unknown group",
            Rule::EmptyField => "empty field",
            Rule::ScenesIncomplete => "scenes incomplete",
            Rule::SentenceCount => "sentence count",
            Rule::GenreCollision => "genre collision",
            Rule::UnknownContext => "unknown context",
            Rule::ImageOutsideGroup => "image outside group",
            Rule::QueryText => "query text mismatch",
            Rule::DuplicateQuery => "duplicate query",
            Rule::LevelSetIncomplete => "level set incomplete",
            Rule::Integrity => "image integrity",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Location of the offending record, e.g. `contexts[3].scenes`.
    pub path: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.path, self.rule, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Findings downgraded from violations (sentence counts in lenient mode).
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationOptions {
    /// Enforce group size in {5, 10, 20} and exactly two contexts per group.
    pub paper_faithful: bool,
    /// Treat sentence-count mismatches as violations instead of warnings.
    pub strict_sentences: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            paper_faithful: false,
            strict_sentences: false,
        }
    }
}

pub const PAPER_GROUP_SIZES: [usize; 3] = [5, 10, 20];
pub const CONTEXTS_PER_GROUP: usize = 2;

fn violate(out: &mut Vec<Violation>, path: String, rule: Rule, detail: String) {
    out.push(Violation { path, rule, detail });
}

pub fn validate_dataset(d: &Dataset, opts: ValidationOptions) -> ValidationReport {
    let mut report = ValidationReport::default();

    if d.groups.is_empty() {
        violate(&mut report.violations, "groups".into(), Rule::NoGroups, "dataset has no image groups".into());
    }

    let mut group_images: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    let mut seen_images: HashSet<&str> = HashSet::new();
    for (gi, g) in d.groups.iter().enumerate() {
        let path = format!("groups[{gi}]");
        if group_images.contains_key(g.group_id.as_str()) {
            violate(&mut report.violations, path.clone(), Rule::DuplicateId, format!("group_id '{}' repeated", g.group_id));
        }
        if g.size != g.images.len() {
            violate(&mut report.violations, 
                path.clone(),
                Rule::GroupSize,
                format!("size {} but {} images listed", g.size, g.images.len()),
            );
        }
        if g.images.is_empty() {
            violate(&mut report.violations, path.clone(), Rule::GroupSize, "group has no images".into());
        }
        if opts.paper_faithful && !PAPER_GROUP_SIZES.contains(&g.images.len()) {
            violate(&mut report.violations, 
                path.clone(),
                Rule::GroupSize,
                format!("size {} not in {:?}", g.images.len(), PAPER_GROUP_SIZES),
            );
        }
        let members = group_images.entry(&g.group_id).or_default();
        for (ii, img) in g.images.iter().enumerate() {
            if !seen_images.insert(&img.image_id) {
                violate(&mut report.violations, 
                    format!("{path}.images[{ii}]"),
                    Rule::DuplicateId,
                    format!("image_id '{}' appears more than once", img.image_id),
                );
            }
            members.insert(&img.image_id);
        }
    }

    let mut context_group: HashMap<&str, &str> = HashMap::new();
    let mut contexts_per_group: BTreeMap<&str, Vec<&StoryContext>> = BTreeMap::new();
    for (ci, c) in d.contexts.iter().enumerate() {
        let path = format!("contexts[{ci}]");
        if context_group.insert(&c.context_id, &c.group_id).is_some() {
            violate(&mut report.violations, path.clone(), Rule::DuplicateId, format!("context_id '{}' repeated", c.context_id));
        }
        for (name, value) in [("genre", &c.genre), ("title", &c.title)] {
            if value.trim().is_empty() {
                violate(&mut report.violations, format!("{path}.{name}"), Rule::EmptyField, format!("{name} is empty"));
            }
        }
        let Some(members) = group_images.get(c.group_id.as_str()) else {
            violate(&mut report.violations, path, Rule::UnknownGroup, format!("group '{}' does not exist", c.group_id));
            continue;
        };
        contexts_per_group.entry(&c.group_id).or_default().push(c);

        let missing: Vec<&str> = members
            .iter()
            .filter(|id| !c.scenes.contains_key(**id))
            .copied()
            .collect();
        if !missing.is_empty() {
            violate(&mut report.violations, 
                format!("{path}.scenes"),
                Rule::ScenesIncomplete,
                format!("no scene for {}", missing.join(", ")),
            );
        }
        let foreign: Vec<&str> = c
            .scenes
            .keys()
            .filter(|id| !members.contains(id.as_str()))
            .map(String::as_str)
            .collect();
        if !foreign.is_empty() {
            violate(&mut report.violations, 
                format!("{path}.scenes"),
                Rule::ScenesIncomplete,
                format!("scenes for images outside the group: {}", foreign.join(", ")),
            );
        }
        for (id, scene) in &c.scenes {
            if scene.trim().is_empty() {
                violate(&mut report.violations, format!("{path}.scenes.{id}"), Rule::EmptyField, "scene is empty".into());
            }
        }

        for (name, text, expected) in [
            ("synopsis_3sent", &c.synopsis_3sent, 3),
            ("synopsis_1sent", &c.synopsis_1sent, 1),
        ] {
            let found = count_sentences(text);
            if found != expected {
                let v = Violation {
                    path: format!("{path}.{name}"),
                    rule: Rule::SentenceCount,
                    detail: format!("expected {expected} sentence(s), found {found}"),
                };
                if opts.strict_sentences {
                    report.violations.push(v);
                } else {
                    report.warnings.push(v);
                }
            }
        }
        if c.synopsis_full.trim().is_empty() {
            report.violations.push(Violation {
                path: format!("{path}.synopsis_full"),
                rule: Rule::EmptyField,
                detail: "synopsis_full is empty".into(),
            });
        }
    }

    for (gi, g) in d.groups.iter().enumerate() {
        let ctxs = contexts_per_group.get(g.group_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let bad_count = if opts.paper_faithful {
            ctxs.len() != CONTEXTS_PER_GROUP
        } else {
            ctxs.is_empty()
        };
        if bad_count {
            report.violations.push(Violation {
                path: format!("groups[{gi}]"),
                rule: Rule::ContextCount,
                detail: format!("group '{}' has {} contexts", g.group_id, ctxs.len()),
            });
        }
        let mut genres = HashSet::new();
        for c in ctxs {
            if !genres.insert(c.genre.trim().to_lowercase()) {
                report.violations.push(Violation {
                    path: format!("groups[{gi}]"),
                    rule: Rule::GenreCollision,
                    detail: format!("genre '{}' used by more than one context", c.genre),
                });
            }
        }
    }

    let mut query_ids = HashSet::new();
    let mut levels_seen: HashMap<(&str, &str), BTreeSet<AbstractionLevel>> = HashMap::new();
    for (qi, q) in d.queries.iter().enumerate() {
        let path = format!("queries[{qi}]");
        if !query_ids.insert(q.query_id.as_str()) {
            report.violations.push(Violation {
                path: path.clone(),
                rule: Rule::DuplicateId,
                detail: format!("query_id '{}' repeated", q.query_id),
            });
        }
        for (name, value) in [("aspect_a", &q.aspect_a), ("aspect_b", &q.aspect_b)] {
            if value.trim().is_empty() {
                report.violations.push(Violation {
                    path: format!("{path}.{name}"),
                    rule: Rule::EmptyField,
                    detail: format!("{name} is empty"),
                });
            }
        }
        if q.text != join_aspects(&q.aspect_a, &q.aspect_b) {
            report.violations.push(Violation {
                path: format!("{path}.text"),
                rule: Rule::QueryText,
                detail: "text is not the join of its aspects".into(),
            });
        }
        let Some(group_id) = context_group.get(q.context_id.as_str()) else {
            report.violations.push(Violation {
                path,
                rule: Rule::UnknownContext,
                detail: format!("context '{}' does not exist", q.context_id),
            });
            continue;
        };
        let in_group = group_images
            .get(group_id)
            .is_some_and(|members| members.contains(q.image_id.as_str()));
        if !in_group {
            report.violations.push(Violation {
                path: path.clone(),
                rule: Rule::ImageOutsideGroup,
                detail: format!("image '{}' is not in group '{group_id}'", q.image_id),
            });
        }
        let levels = levels_seen.entry((&q.image_id, &q.context_id)).or_default();
        if !levels.insert(q.level) {
            report.violations.push(Violation {
                path,
                rule: Rule::DuplicateQuery,
                detail: format!(
                    "second {} query for ({}, {})",
                    q.level, q.image_id, q.context_id
                ),
            });
        }
    }

    for g in &d.groups {
        for c in contexts_per_group.get(g.group_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            for img in &g.images {
                let have = levels_seen
                    .get(&(img.image_id.as_str(), c.context_id.as_str()))
                    .map_or(0, BTreeSet::len);
                if have != AbstractionLevel::ALL.len() {
                    report.violations.push(Violation {
                        path: format!("queries({}, {})", img.image_id, c.context_id),
                        rule: Rule::LevelSetIncomplete,
                        detail: format!("{have} of 4 levels present"),
                    });
                }
            }
        }
    }

    report
}

/// Re-reads every image and checks it against its recorded digest.
pub fn verify_image_digests(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    for (gi, g) in d.groups.iter().enumerate() {
        for (ii, img) in g.images.iter().enumerate() {
            let path = format!("groups[{gi}].images[{ii}]");
            match read_image_bytes(img) {
                Ok(bytes) if img.matches_bytes(&bytes) => {}
                Ok(_) => out.push(Violation {
                    path,
                    rule: Rule::Integrity,
                    detail: format!("digest mismatch for '{}'", img.image_id),
                }),
                Err(e) => out.push(Violation {
                    path,
                    rule: Rule::Integrity,
                    detail: format!("cannot read '{}': {e}", img.uri),
                }),
            }
        }
    }
    out
}

/// Lookup tables over a dataset. Borrowed, so it can be rebuilt cheaply.
pub struct DatasetIndex<'a> {
    pub dataset: &'a Dataset,
    images: HashMap<&'a str, (&'a ImageRef, &'a ImageGroup)>,
    contexts: HashMap<&'a str, &'a StoryContext>,
    queries: HashMap<(&'a str, &'a str, AbstractionLevel), &'a LeveledQuery>,
    group_contexts: HashMap<&'a str, Vec<&'a StoryContext>>,
}

impl<'a> DatasetIndex<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        let mut images = HashMap::new();
        for g in &dataset.groups {
            for img in &g.images {
                images.insert(img.image_id.as_str(), (img, g));
            }
        }
        let mut group_contexts: HashMap<&str, Vec<&StoryContext>> = HashMap::new();
        for c in &dataset.contexts {
            group_contexts.entry(&c.group_id).or_default().push(c);
        }
        Self {
            dataset,
            images,
            contexts: dataset.contexts.iter().map(|c| (c.context_id.as_str(), c)).collect(),
            queries: dataset
                .queries
                .iter()
                .map(|q| ((q.image_id.as_str(), q.context_id.as_str(), q.level), q))
                .collect(),
            group_contexts,
        }
    }

    pub fn image(&self, image_id: &str) -> Option<&'a ImageRef> {
        self.images.get(image_id).map(|(img, _)| *img)
    }

    pub fn group_of_image(&self, image_id: &str) -> Option<&'a ImageGroup> {
        self.images.get(image_id).map(|(_, g)| *g)
    }

    pub fn context(&self, context_id: &str) -> Option<&'a StoryContext> {
        self.contexts.get(context_id).copied()
    }

    pub fn contexts_of_group(&self, group_id: &str) -> &[&'a StoryContext] {
        self.group_contexts.get(group_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn query(
        &self,
        image_id: &str,
        context_id: &str,
        level: AbstractionLevel,
    ) -> Option<&'a LeveledQuery> {
        self.queries.get(&(image_id, context_id, level)).copied()
    }

    pub fn queries_at(&self, level: AbstractionLevel) -> impl Iterator<Item = &'a LeveledQuery> + 'a {
        self.dataset.queries.iter().filter(move |q| q.level == level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn sample() -> Dataset {
        fixtures::synthetic_dataset(2, 3, crate::model::ImageSource::Coco)
    }

    #[test]
    fn fixture_dataset_is_valid() {
        let d = sample();
        let report = validate_dataset(&d, ValidationOptions::default());
        assert!(report.is_valid(), "{:?}", report.violations);
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
        assert_eq!(d.queries.len(), 2 * 3 * 2 * 4);
    }

    #[test]
    fn paper_scale_dataset_has_8000_queries() {
        let d = fixtures::synthetic_dataset(100, 10, crate::model::ImageSource::Coco);
        let report = validate_dataset(
            &d,
            ValidationOptions {
                paper_faithful: true,
                strict_sentences: true,
            },
        );
        assert!(report.is_valid(), "{:?}", &report.violations[..report.violations.len().min(3)]);
        assert_eq!(d.queries.len(), 8000);
    }

    #[test]
    fn missing_scene_is_reported() {
        let mut d = sample();
        let first = d.groups[0].images[0].image_id.clone();
        d.contexts[0].scenes.remove(&first);
        let report = validate_dataset(&d, ValidationOptions::default());
        assert!(report.has(Rule::ScenesIncomplete));
        let v = report.violations.iter().find(|v| v.rule == Rule::ScenesIncomplete).unwrap();
        assert_eq!(v.path, "contexts[0].scenes");
        assert!(v.to_string().contains("scenes incomplete"));
    }

    #[test]
    fn three_levels_is_incomplete() {
        let mut d = sample();
        let victim = d.queries[5].clone();
        d.queries.retain(|q| q.query_id != victim.query_id);
        let report = validate_dataset(&d, ValidationOptions::default());
        let v = report.violations.iter().find(|v| v.rule == Rule::LevelSetIncomplete).unwrap();
        assert!(v.to_string().contains("level set incomplete"));
        assert_eq!(v.path, format!("queries({}, {})", victim.image_id, victim.context_id));
    }

    #[test]
    fn empty_dataset_is_invalid() {
        let report = validate_dataset(&Dataset::default(), ValidationOptions::default());
        assert!(report.has(Rule::NoGroups));
    }

    #[test]
    fn foreign_query_image_is_reported() {
        let mut d = sample();
        let other_group_image = d.groups[1].images[0].image_id.clone();
        let q = d.queries.iter_mut().find(|q| q.context_id.starts_with(&d.groups[0].group_id)).unwrap();
        q.image_id = other_group_image;
        let report = validate_dataset(&d, ValidationOptions::default());
        assert!(report.has(Rule::ImageOutsideGroup));
    }

    #[test]
    fn sentence_counts_are_warnings_unless_strict() {
        let mut d = sample();
        d.contexts[0].synopsis_1sent = "One. Two.".into();
        let lenient = validate_dataset(&d, ValidationOptions::default());
        assert!(lenient.is_valid());
        assert_eq!(lenient.warnings.len(), 1);
        let strict = validate_dataset(
            &d,
            ValidationOptions {
                strict_sentences: true,
                ..Default::default()
            },
        );
        assert!(strict.has(Rule::SentenceCount));
    }

    #[test]
    fn paper_faithful_rejects_odd_group_sizes() {
        let d = sample();
        let report = validate_dataset(
            &d,
            ValidationOptions {
                paper_faithful: true,
                strict_sentences: false,
            },
        );
        assert!(report.has(Rule::GroupSize));
    }

    #[test]
    fn sentence_splitter() {
        assert_eq!(count_sentences(""), 0);
        assert_eq!(count_sentences("One sentence."), 1);
        assert_eq!(count_sentences("No terminator"), 1);
        assert_eq!(count_sentences("A. B! C?"), 3);
        assert_eq!(count_sentences("Wait... what?! Yes."), 3);
        assert_eq!(count_sentences("Version 2.5 is out."), 1);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut d = sample();
        d.contexts[0].title = "Le café — \u{1F37F} «intrigue»".into();
        d.metadata.temperature = Some(0.7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn truncated_file_reports_line() {
        let d = sample();
        let mut bytes = dataset_to_jsonl(&d);
        let cut = bytes.len() - 10;
        bytes.truncate(cut);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, &bytes).unwrap();
        let lines = bytes.iter().filter(|b| **b == b'\n').count() + 1;
        match load_dataset(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, lines),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_loads_as_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, b"").unwrap();
        let d = load_dataset(&path).unwrap();
        assert_eq!(d, Dataset::default());
        assert!(!validate_dataset(&d, ValidationOptions::default()).is_valid());
    }

    #[test]
    fn unreadable_input_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/d.jsonl")).unwrap_err();
        assert!(matches!(err, DatasetError::Io { .. }));
    }

    #[test]
    fn digest_verification_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        std::fs::write(&path, b"pixels").unwrap();
        let mut d = sample();
        d.groups[0].images[0].uri = path.display().to_string();
        d.groups[0].images[0].digest = ImageRef::digest_bytes(b"pixels");
        let violations = verify_image_digests(&d);
        assert!(violations.iter().all(|v| !v.path.starts_with("groups[0].images[0]")));
        d.groups[0].images[0].digest = ImageRef::digest_bytes(b"other");
        let violations = verify_image_digests(&d);
        assert!(violations
            .iter()
            .any(|v| v.path == "groups[0].images[0]" && v.detail.contains("mismatch")));
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_text(title in "\\PC{0,40}", genre in "\\PC{1,12}", scene in "\\PC{0,60}") {
            let mut d = sample();
            d.contexts[1].title = title;
            d.contexts[1].genre = genre;
            let key = d.contexts[1].scenes.keys().next().unwrap().clone();
            d.contexts[1].scenes.insert(key, scene);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            save_dataset(&d, &path).unwrap();
            prop_assert_eq!(load_dataset(&path).unwrap(), d);
        }
    }
}
