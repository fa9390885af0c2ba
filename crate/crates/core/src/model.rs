//! Domain types shared by every stage of the benchmark: images and their
//! groups, story contexts, leveled queries and the dataset that ties them
//! together.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where an image came from. Only used for sampling rules and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImageSource {
    Lsmdc,
    Coco,
    Other,
}

impl ImageSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageSource::Lsmdc => "LSMDC",
            ImageSource::Coco => "COCO",
            ImageSource::Other => "OTHER",
        }
    }
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "LSMDC" => Ok(ImageSource::Lsmdc),
            "COCO" => Ok(ImageSource::Coco),
            "OTHER" => Ok(ImageSource::Other),
            _ => Err(format!("unknown image source '{s}'")),
        }
    }
}

/// An opaque image reference. Pixels never enter this crate; the digest is
/// what ties a reference to its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub source: ImageSource,
    pub uri: String,
    /// Lowercase hex SHA-256 of the image bytes.
    pub digest: String,
}

impl ImageRef {
    pub fn digest_bytes(bytes: &[u8]) -> String {
        hex::encode(Sha256::digest(bytes))
    }

    pub fn matches_bytes(&self, bytes: &[u8]) -> bool {
        Self::digest_bytes(bytes) == self.digest
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGroup {
    pub group_id: String,
    /// Temporal order for LSMDC groups; sampling order otherwise.
    pub images: Vec<ImageRef>,
    pub size: usize,
}

impl ImageGroup {
    pub fn new(group_id: impl Into<String>, images: Vec<ImageRef>) -> Self {
        let size = images.len();
        Self {
            group_id: group_id.into(),
            images,
            size,
        }
    }
}

/// A generated narrative that conditions how the images of one group are read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryContext {
    pub context_id: String,
    pub group_id: String,
    pub genre: String,
    pub title: String,
    pub synopsis_full: String,
    pub synopsis_3sent: String,
    pub synopsis_1sent: String,
    /// image_id -> scene description.
    pub scenes: BTreeMap<String, String>,
}

/// Semantic abstraction level of a query, from concrete (L1) to
/// maximally context-dependent (L4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbstractionLevel {
    L1,
    L2,
    L3,
    L4,
}

impl AbstractionLevel {
    pub const ALL: [AbstractionLevel; 4] = [
        AbstractionLevel::L1,
        AbstractionLevel::L2,
        AbstractionLevel::L3,
        AbstractionLevel::L4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AbstractionLevel::L1 => "L1",
            AbstractionLevel::L2 => "L2",
            AbstractionLevel::L3 => "L3",
            AbstractionLevel::L4 => "L4",
        }
    }
}

impl fmt::Display for AbstractionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AbstractionLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L1" => Ok(AbstractionLevel::L1),
            "L2" => Ok(AbstractionLevel::L2),
            "L3" => Ok(AbstractionLevel::L3),
            "L4" => Ok(AbstractionLevel::L4),
            _ => Err(format!("unknown abstraction level '{s}'")),
        }
    }
}

/// Separator placed between the two aspects of a query.
pub const ASPECT_SEPARATOR: &str = ". ";

/// Joins the two aspects of a query into its text. A trailing period on the
/// first aspect is folded into the separator.
pub fn join_aspects(aspect_a: &str, aspect_b: &str) -> String {
    let head = aspect_a.trim().trim_end_matches('.').trim_end();
    format!("{head}{ASPECT_SEPARATOR}{}", aspect_b.trim())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeveledQuery {
    pub query_id: String,
    pub image_id: String,
    pub context_id: String,
    pub level: AbstractionLevel,
    pub aspect_a: String,
    pub aspect_b: String,
    pub text: String,
}

impl LeveledQuery {
    pub fn new(
        image_id: &str,
        context_id: &str,
        level: AbstractionLevel,
        aspect_a: impl Into<String>,
        aspect_b: impl Into<String>,
    ) -> Self {
        let aspect_a = aspect_a.into();
        let aspect_b = aspect_b.into();
        Self {
            query_id: query_id(image_id, context_id, level),
            image_id: image_id.to_string(),
            context_id: context_id.to_string(),
            level,
            text: join_aspects(&aspect_a, &aspect_b),
            aspect_a,
            aspect_b,
        }
    }
}

pub fn context_id(group_id: &str, ordinal: usize) -> String {
    format!("{group_id}-c{ordinal}")
}

pub fn query_id(image_id: &str, context_id: &str, level: AbstractionLevel) -> String {
    format!("{image_id}-{context_id}-{level}")
}

/// Provenance recorded alongside a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ImageSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub genre_pool: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub metadata: DatasetMetadata,
    pub groups: Vec<ImageGroup>,
    pub contexts: Vec<StoryContext>,
    pub queries: Vec<LeveledQuery>,
}

impl Dataset {
    pub fn image_count(&self) -> usize {
        self.groups.iter().map(|g| g.images.len()).sum()
    }

    pub fn contexts_of<'a>(&'a self, group_id: &'a str) -> impl Iterator<Item = &'a StoryContext> + 'a {
        self.contexts.iter().filter(move |c| c.group_id == group_id)
    }
}
