//! Conditioning strings for every injection strategy, granularity and
//! level-aware combination. All prompt text used anywhere in the harness is
//! produced here.
//!
//! Template grammar (fields are joined by one space; a field is omitted
//! entirely when the granularity does not include it):
//!
//! ```text
//! block       := field (" " field)*
//! field       := "Genre: " genre | "Title: " title | "Synopsis: " synopsis
//! close       := "." unless block already ends in ".", "!" or "?"
//! image (ctx) := "Based on the story context below, summarize this image in one word. "
//!                "Story Context: " block close " Summary above image in one word:"
//! image (bare):= "Summarize this image in one word:"
//! query (ctx) := "Story context: " block close " Query: " query_text
//! query (bare):= query_text
//! level-aware := focus_instruction " " prompt
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AbstractionLevel, LeveledQuery, StoryContext};

pub const IMAGE_INSTRUCTION: &str = "Based on the story context below, summarize this image in one word.";
pub const IMAGE_SUFFIX: &str = "Summary above image in one word:";
pub const BARE_IMAGE_INSTRUCTION: &str = "Summarize this image in one word:";

/// Which side(s) of the retrieval pair receive the story context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InjectionStrategy {
    NoCtx,
    CtxQ,
    CtxI,
    CtxB,
}

impl InjectionStrategy {
    pub const ALL: [InjectionStrategy; 4] = [
        InjectionStrategy::NoCtx,
        InjectionStrategy::CtxQ,
        InjectionStrategy::CtxI,
        InjectionStrategy::CtxB,
    ];

    pub fn injects_image(self) -> bool {
        matches!(self, InjectionStrategy::CtxI | InjectionStrategy::CtxB)
    }

    pub fn injects_query(self) -> bool {
        matches!(self, InjectionStrategy::CtxQ | InjectionStrategy::CtxB)
    }

    pub fn uses_context(self) -> bool {
        self != InjectionStrategy::NoCtx
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InjectionStrategy::NoCtx => "NoCtx",
            InjectionStrategy::CtxQ => "CtxQ",
            InjectionStrategy::CtxI => "CtxI",
            InjectionStrategy::CtxB => "CtxB",
        }
    }
}

impl fmt::Display for InjectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "noctx" => Ok(InjectionStrategy::NoCtx),
            "ctxq" => Ok(InjectionStrategy::CtxQ),
            "ctxi" => Ok(InjectionStrategy::CtxI),
            "ctxb" => Ok(InjectionStrategy::CtxB),
            _ => Err(format!("unknown injection strategy '{s}'")),
        }
    }
}

/// How much of the story is injected, from genre alone up to the full synopsis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "g1", alias = "G1")]
    Genre,
    #[serde(rename = "g2", alias = "G2")]
    Title,
    #[serde(rename = "g3", alias = "G3")]
    GenreTitle,
    #[serde(rename = "g4", alias = "G4")]
    PlusOneSentence,
    #[serde(rename = "g5", alias = "G5")]
    PlusThreeSentences,
    #[serde(rename = "g6", alias = "G6")]
    PlusFullSynopsis,
}

impl Granularity {
    pub const ALL: [Granularity; 6] = [
        Granularity::Genre,
        Granularity::Title,
        Granularity::GenreTitle,
        Granularity::PlusOneSentence,
        Granularity::PlusThreeSentences,
        Granularity::PlusFullSynopsis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Genre => "g1",
            Granularity::Title => "g2",
            Granularity::GenreTitle => "g3",
            Granularity::PlusOneSentence => "g4",
            Granularity::PlusThreeSentences => "g5",
            Granularity::PlusFullSynopsis => "g6",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown granularity '{s}' (expected g1..g6)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextField {
    Genre,
    Title,
    SynopsisOneSentence,
    SynopsisThreeSentences,
    SynopsisFull,
}

impl ContextField {
    pub fn label(self) -> &'static str {
        match self {
            ContextField::Genre => "Genre",
            ContextField::Title => "Title",
            _ => "Synopsis",
        }
    }

    pub fn value(self, ctx: &StoryContext) -> &str {
        match self {
            ContextField::Genre => &ctx.genre,
            ContextField::Title => &ctx.title,
            ContextField::SynopsisOneSentence => &ctx.synopsis_1sent,
            ContextField::SynopsisThreeSentences => &ctx.synopsis_3sent,
            ContextField::SynopsisFull => &ctx.synopsis_full,
        }
    }
}

/// Story fields injected at a granularity, in rendering order.
pub fn context_fields_for(g: Granularity) -> &'static [ContextField] {
    use ContextField::*;
    match g {
        Granularity::Genre => &[Genre],
        Granularity::Title => &[Title],
        Granularity::GenreTitle => &[Genre, Title],
        Granularity::PlusOneSentence => &[Genre, Title, SynopsisOneSentence],
        Granularity::PlusThreeSentences => &[Genre, Title, SynopsisThreeSentences],
        Granularity::PlusFullSynopsis => &[Genre, Title, SynopsisFull],
    }
}

pub fn level_focus_instruction(level: AbstractionLevel) -> &'static str {
    match level {
        AbstractionLevel::L1 => "Focus on objects and actions.",
        AbstractionLevel::L2 => "Focus on the focal element and its narrative relevance.",
        AbstractionLevel::L3 => "Focus on the situation and character intent.",
        AbstractionLevel::L4 => "Focus on the atmosphere and its effect on the viewer.",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Image,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub side: Side,
    pub text: String,
    pub context_id: Option<String>,
    pub granularity: Option<Granularity>,
    pub level_aware: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("granularity {0} given without a story context")]
    GranularityWithoutContext(Granularity),
    #[error("story context '{0}' given without a granularity")]
    ContextWithoutGranularity(String),
    #[error("level-aware prompt requested without a target level")]
    MissingLevel,
}

/// Renders the labeled story block, closed with a period unless the last
/// field already ends a sentence.
fn story_block(ctx: &StoryContext, g: Granularity) -> String {
    let mut block = context_fields_for(g)
        .iter()
        .map(|f| format!("{}: {}", f.label(), f.value(ctx).trim()))
        .collect::<Vec<_>>()
        .join(" ");
    if !block.ends_with(['.', '!', '?']) {
        block.push('.');
    }
    block
}

fn with_focus(level: Option<AbstractionLevel>, level_aware: bool, body: String) -> Result<String, PromptError> {
    if !level_aware {
        return Ok(body);
    }
    let level = level.ok_or(PromptError::MissingLevel)?;
    Ok(format!("{} {body}", level_focus_instruction(level)))
}

fn check_pair(ctx: Option<&StoryContext>, g: Option<Granularity>) -> Result<Option<(&StoryContext, Granularity)>, PromptError> {
    match (ctx, g) {
        (Some(c), Some(g)) => Ok(Some((c, g))),
        (None, None) => Ok(None),
        (None, Some(g)) => Err(PromptError::GranularityWithoutContext(g)),
        (Some(c), None) => Err(PromptError::ContextWithoutGranularity(c.context_id.clone())),
    }
}

pub fn render_image_prompt(
    ctx: Option<&StoryContext>,
    g: Option<Granularity>,
    level: Option<AbstractionLevel>,
    level_aware: bool,
) -> Result<RenderedPrompt, PromptError> {
    let pair = check_pair(ctx, g)?;
    let body = match pair {
        Some((c, g)) => format!(
            "{IMAGE_INSTRUCTION} Story Context: {} {IMAGE_SUFFIX}",
            story_block(c, g)
        ),
        None => BARE_IMAGE_INSTRUCTION.to_string(),
    };
    Ok(RenderedPrompt {
        side: Side::Image,
        text: with_focus(level, level_aware, body)?,
        context_id: pair.map(|(c, _)| c.context_id.clone()),
        granularity: g,
        level_aware,
    })
}

pub fn render_query_prompt(
    q: &LeveledQuery,
    ctx: Option<&StoryContext>,
    g: Option<Granularity>,
    level_aware: bool,
) -> Result<RenderedPrompt, PromptError> {
    let pair = check_pair(ctx, g)?;
    let body = match pair {
        Some((c, g)) => format!("Story context: {} Query: {}", story_block(c, g), q.text),
        None => q.text.clone(),
    };
    Ok(RenderedPrompt {
        side: Side::Query,
        text: with_focus(Some(q.level), level_aware, body)?,
        context_id: pair.map(|(c, _)| c.context_id.clone()),
        granularity: g,
        level_aware,
    })
}

/// Image-side prompt for an entry under `strategy`. The context is only
/// injected when the strategy conditions the image side.
pub fn image_prompt_for(
    strategy: InjectionStrategy,
    ctx: &StoryContext,
    g: Option<Granularity>,
    focus: Option<AbstractionLevel>,
) -> Result<RenderedPrompt, PromptError> {
    if strategy.injects_image() {
        let g = g.ok_or_else(|| PromptError::ContextWithoutGranularity(ctx.context_id.clone()))?;
        render_image_prompt(Some(ctx), Some(g), focus, focus.is_some())
    } else {
        render_image_prompt(None, None, focus, focus.is_some())
    }
}

/// Query-side prompt under `strategy`; `ctx` is the query's own story.
pub fn query_prompt_for(
    strategy: InjectionStrategy,
    q: &LeveledQuery,
    ctx: &StoryContext,
    g: Option<Granularity>,
    level_aware: bool,
) -> Result<RenderedPrompt, PromptError> {
    if strategy.injects_query() {
        let g = g.ok_or_else(|| PromptError::ContextWithoutGranularity(ctx.context_id.clone()))?;
        render_query_prompt(q, Some(ctx), Some(g), level_aware)
    } else {
        render_query_prompt(q, None, None, level_aware)
    }
}
