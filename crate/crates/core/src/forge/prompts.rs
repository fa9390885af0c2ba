//! Versioned generation prompts and the parsers for their JSON answers.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use crate::dataset::count_sentences;
use crate::model::{AbstractionLevel, ImageGroup, ImageRef, LeveledQuery, StoryContext};

pub const STORY_PROMPT_VERSION: &str = "story-v1";
pub const QUERIES_PROMPT_VERSION: &str = "queries-v1";

pub fn prompt_version() -> String {
    format!("{STORY_PROMPT_VERSION}+{QUERIES_PROMPT_VERSION}")
}

pub fn story_prompt(group: &ImageGroup, genre: &str) -> String {
    let mut images = String::new();
    for (i, img) in group.images.iter().enumerate() {
        images.push_str(&format!("{}. {} (sha256 {})\n", i + 1, img.image_id, &img.digest[..img.digest.len().min(16)]));
    }
    format!(
        "You are writing a short film story that connects a sequence of images.\n\
         Genre: {genre}\n\
         Images, in order:\n{images}\
         Write one {genre} story in which every image above is a scene, in the given order.\n\
         Respond with a single JSON object and nothing else, following this schema:\n\
         {{\"title\": string, \
         \"synopsis_full\": string (a full synopsis of several sentences), \
         \"synopsis_3sent\": string (exactly 3 sentences), \
         \"synopsis_1sent\": string (exactly 1 sentence), \
         \"scenes\": {{\"<image_id>\": string (what this image shows within the story), one entry for every image id above}}}}\n"
    )
}

pub fn queries_prompt(image: &ImageRef, ctx: &StoryContext, scene: &str) -> String {
    format!(
        "Story context:\n\
         Genre: {}\n\
         Title: {}\n\
         Synopsis: {}\n\
         Scene for image {}: {scene}\n\
         Write four retrieval queries for this image, one per abstraction level. Each query has two aspects.\n\
         L1: aspect_a describes the objects, aspect_b describes the action.\n\
         L2: aspect_a names the focal element, aspect_b states its narrative relevance.\n\
         L3: aspect_a describes the situation, aspect_b states the character intent.\n\
         L4: aspect_a describes the atmosphere, aspect_b states its effect on the viewer.\n\
         Respond with a single JSON object and nothing else, following this schema:\n\
         {{\"L1\": {{\"aspect_a\": string, \"aspect_b\": string}}, \"L2\": {{...}}, \"L3\": {{...}}, \"L4\": {{...}}}}\n",
        ctx.genre, ctx.title, ctx.synopsis_full, image.image_id
    )
}

/// Follow-up prompt after an unusable answer.
pub fn repair_prompt(original: &str, error: &str, previous: &str) -> String {
    format!(
        "{original}\n\
         Your previous response could not be used: {error}\n\
         Previous response:\n{previous}\n\
         Respond again with only the corrected JSON object.\n"
    )
}

/// The outermost `{...}` span of a response, which tolerates code fences
/// and surrounding prose.
pub fn extract_json(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

#[derive(Deserialize)]
struct StoryAnswer {
    title: String,
    synopsis_full: String,
    synopsis_3sent: String,
    synopsis_1sent: String,
    scenes: BTreeMap<String, String>,
}

fn nonempty(name: &str, value: &str) -> Result<(), String> {
    if value.trim().is_empty() {
        Err(format!("field '{name}' is empty"))
    } else {
        Ok(())
    }
}

/// Parses and checks a story answer. The genre is the one that was asked for.
pub fn parse_story(text: &str, group: &ImageGroup, context_id: &str, genre: &str) -> Result<StoryContext, String> {
    let json = extract_json(text).ok_or("no JSON object found")?;
    let a: StoryAnswer = serde_json::from_str(json).map_err(|e| format!("invalid JSON: {e}"))?;
    nonempty("title", &a.title)?;
    nonempty("synopsis_full", &a.synopsis_full)?;
    for (name, value, want) in [("synopsis_3sent", &a.synopsis_3sent, 3), ("synopsis_1sent", &a.synopsis_1sent, 1)] {
        let found = count_sentences(value);
        if found != want {
            return Err(format!("'{name}' must have exactly {want} sentence(s), found {found}"));
        }
    }
    let expected: BTreeSet<&str> = group.images.iter().map(|i| i.image_id.as_str()).collect();
    let given: BTreeSet<&str> = a.scenes.keys().map(String::as_str).collect();
    let missing: Vec<&str> = expected.difference(&given).copied().collect();
    if !missing.is_empty() {
        return Err(format!("'scenes' lacks image ids: {}", missing.join(", ")));
    }
    let extra: Vec<&str> = given.difference(&expected).copied().collect();
    if !extra.is_empty() {
        return Err(format!("'scenes' has unknown image ids: {}", extra.join(", ")));
    }
    if let Some((id, _)) = a.scenes.iter().find(|(_, s)| s.trim().is_empty()) {
        return Err(format!("scene for '{id}' is empty"));
    }
    Ok(StoryContext {
        context_id: context_id.to_string(),
        group_id: group.group_id.clone(),
        genre: genre.to_string(),
        title: a.title.trim().to_string(),
        synopsis_full: a.synopsis_full.trim().to_string(),
        synopsis_3sent: a.synopsis_3sent.trim().to_string(),
        synopsis_1sent: a.synopsis_1sent.trim().to_string(),
        scenes: a.scenes.into_iter().map(|(k, v)| (k, v.trim().to_string())).collect(),
    })
}

#[derive(Deserialize)]
struct AspectPair {
    aspect_a: String,
    aspect_b: String,
}

pub fn parse_queries(text: &str, image_id: &str, context_id: &str) -> Result<Vec<LeveledQuery>, String> {
    let json = extract_json(text).ok_or("no JSON object found")?;
    let mut a: BTreeMap<String, AspectPair> = serde_json::from_str(json).map_err(|e| format!("invalid JSON: {e}"))?;
    let mut out = Vec::with_capacity(4);
    for level in AbstractionLevel::ALL {
        let pair = a
            .remove(level.as_str())
            .ok_or_else(|| format!("level {level} is missing"))?;
        nonempty(&format!("{level}.aspect_a"), &pair.aspect_a)?;
        nonempty(&format!("{level}.aspect_b"), &pair.aspect_b)?;
        out.push(LeveledQuery::new(image_id, context_id, level, pair.aspect_a.trim(), pair.aspect_b.trim()));
    }
    if let Some(k) = a.keys().next() {
        return Err(format!("unexpected key '{k}'"));
    }
    Ok(out)
}
