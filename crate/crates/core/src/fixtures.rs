//! Deterministic synthetic datasets and manifests for tests, demos and
//! smoke runs. Image URIs use the `synthetic://` scheme unless the images
//! are materialized on disk.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use crate::dataset::ManifestRecord;
use crate::embed::{Anchor, PlantedSignal};
use crate::prompt::{render_image_prompt, Granularity};
use crate::model::{context_id, AbstractionLevel, Dataset, DatasetMetadata, ImageGroup, ImageRef, ImageSource, LeveledQuery, StoryContext};

pub const GENRES: [&str; 8] = [
    "Comedy", "Thriller", "Romance", "Horror", "Science Fiction", "Western", "Mystery", "Fantasy",
];

const MOODS: [&str; 6] = ["Quiet", "Broken", "Last", "Silver", "Hidden", "Long"];
const NOUNS: [&str; 6] = ["Harbor", "Promise", "Signal", "Winter", "Garden", "Road"];

pub fn synthetic_image_id(group: usize, index: usize) -> String {
    format!("g{group:03}_i{index:02}")
}

/// Stand-in bytes for a synthetic image.
pub fn synthetic_image_bytes(image_id: &str) -> Vec<u8> {
    format!("synthetic image {image_id}").into_bytes()
}

pub fn synthetic_image(image_id: &str, source: ImageSource) -> ImageRef {
    ImageRef {
        image_id: image_id.to_string(),
        source,
        uri: format!("synthetic://{image_id}"),
        digest: ImageRef::digest_bytes(&synthetic_image_bytes(image_id)),
    }
}

/// A story whose synopses have exactly the expected sentence counts.
pub fn story(context_id: &str, group_id: &str, genre: &str, image_ids: &[&str]) -> StoryContext {
    let h = context_id.bytes().fold(0usize, |a, b| a.wrapping_mul(31).wrapping_add(b as usize));
    let title = format!("The {} {}", MOODS[h % MOODS.len()], NOUNS[(h / 7) % NOUNS.len()]);
    let one = format!("A {} tale unfolds around {}.", genre.to_lowercase(), context_id);
    let three = format!("{one} Old loyalties are tested. Nothing ends the way it began.");
    let full = format!("{three} Every image in {group_id} marks a turn in the {} plot.", genre.to_lowercase());
    let scenes = image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), format!("Scene {} of the {} story, built around {id}.", i + 1, genre.to_lowercase())))
        .collect::<BTreeMap<_, _>>();
    StoryContext {
        context_id: context_id.to_string(),
        group_id: group_id.to_string(),
        genre: genre.to_string(),
        title,
        synopsis_full: full,
        synopsis_3sent: three,
        synopsis_1sent: one,
        scenes,
    }
}

fn aspects(image_id: &str, ctx: &StoryContext, level: AbstractionLevel) -> (String, String) {
    let g = ctx.genre.to_lowercase();
    let c = &ctx.context_id;
    match level {
        AbstractionLevel::L1 => (
            format!("Objects and people visible in {image_id}"),
            format!("someone moves through the frame in {c}"),
        ),
        AbstractionLevel::L2 => (
            format!("The focal element of {image_id}"),
            format!("it carries the {g} plot of {c} forward"),
        ),
        AbstractionLevel::L3 => (
            format!("The situation captured in {image_id}"),
            format!("a character pursues a hidden aim within the {g} story {c}"),
        ),
        AbstractionLevel::L4 => (
            format!("The mood that {image_id} leaves behind"),
            format!("the viewer feels the {g} weight of {c}"),
        ),
    }
}

/// A complete, valid dataset: `groups` groups of `size` images, two stories
/// per group and one query per (image, story, level).
pub fn synthetic_dataset(groups: usize, size: usize, source: ImageSource) -> Dataset {
    let mut d = Dataset {
        metadata: DatasetMetadata {
            source: Some(source),
            group_size: Some(size),
            group_count: Some(groups),
            seed: Some(0),
            generator_model_id: Some("synthetic".into()),
            prompt_version: Some("synthetic-v1".into()),
            genre_pool: GENRES.iter().map(|g| g.to_string()).collect(),
            ..Default::default()
        },
        ..Default::default()
    };
    for gi in 0..groups {
        let group_id = format!("g{gi:03}");
        let images: Vec<ImageRef> = (0..size).map(|i| synthetic_image(&synthetic_image_id(gi, i), source)).collect();
        let ids: Vec<&str> = images.iter().map(|i| i.image_id.as_str()).collect();
        for c in 0..2 {
            let genre = GENRES[(2 * gi + c) % GENRES.len()];
            let ctx = story(&context_id(&group_id, c + 1), &group_id, genre, &ids);
            for id in &ids {
                for level in AbstractionLevel::ALL {
                    let (a, b) = aspects(id, &ctx, level);
                    d.queries.push(LeveledQuery::new(id, &ctx.context_id, level, a, b));
                }
            }
            d.contexts.push(ctx);
        }
        d.groups.push(ImageGroup::new(group_id, images));
    }
    d
}

/// A planted signal that separates the two stories of an image: every
/// context-bearing image prompt and every query text sits on an anchor named
/// after its (image, story) pair. Bare image prompts are not planted.
pub fn story_aware_signal(d: &Dataset) -> PlantedSignal {
    let mut signal = PlantedSignal::default();
    let key = |digest: &str, ctx: &str| format!("{digest}::{ctx}");
    for g in &d.groups {
        for ctx in d.contexts_of(&g.group_id) {
            for img in &g.images {
                for granularity in Granularity::ALL {
                    for focus in std::iter::once(None).chain(AbstractionLevel::ALL.map(Some)) {
                        let prompt = render_image_prompt(Some(ctx), Some(granularity), focus, focus.is_some())
                            .expect("context and granularity are both given");
                        signal.plant_image_prompt(&img.digest, &prompt.text, Anchor::new(key(&img.digest, &ctx.context_id)));
                    }
                }
            }
        }
    }
    for q in &d.queries {
        if let Some(img) = d.groups.iter().flat_map(|g| &g.images).find(|i| i.image_id == q.image_id) {
            signal.plant_text(&q.text, Anchor::new(key(&img.digest, &q.context_id)));
        }
    }
    signal
}

/// Writes every synthetic image to `dir` and points the dataset at the files.
pub fn materialize_images(d: &mut Dataset, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for g in &mut d.groups {
        for img in &mut g.images {
            let path = dir.join(format!("{}.bin", img.image_id));
            std::fs::write(&path, synthetic_image_bytes(&img.image_id))?;
            img.uri = path.display().to_string();
        }
    }
    Ok(())
}

/// A manifest of `movies * per_movie` images. LSMDC records carry a movie
/// name and clip order; other sources are a flat pool.
pub fn synthetic_manifest(movies: usize, per_movie: usize, source: ImageSource) -> Vec<ManifestRecord> {
    let mut out = Vec::new();
    for m in 0..movies {
        for i in 0..per_movie {
            let image_id = match source {
                ImageSource::Lsmdc => format!("movie{m:02}_{i:04}"),
                _ => format!("img{:06}", m * per_movie + i),
            };
            let image = synthetic_image(&image_id, source);
            out.push(match source {
                ImageSource::Lsmdc => ManifestRecord {
                    image,
                    movie: Some(format!("movie{m:02}")),
                    order: Some(i as u64),
                },
                _ => ManifestRecord::from(image),
            });
        }
    }
    out
}
