use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ForgeError;
use crate::dataset::ManifestRecord;
use crate::model::{ImageGroup, ImageRef, ImageSource};

/// Domain-separated RNG so sampling and genre choice draw independent streams.
pub(crate) fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn group_id(index: usize) -> String {
    format!("g{index:03}")
}

/// Movie of an LSMDC record: the explicit field, else the image id up to its
/// last underscore.
pub fn movie_of(r: &ManifestRecord) -> String {
    r.movie.clone().unwrap_or_else(|| match r.image.image_id.rsplit_once('_') {
        Some((movie, _)) => movie.to_string(),
        None => r.image.image_id.clone(),
    })
}

/// Draws `count` groups of `size` images.
///
/// LSMDC groups are runs of consecutive clips from a single movie, in
/// temporal order, and never overlap. Other sources are shuffled and split
/// globally without replacement.
pub fn sample_groups(
    manifest: &[ManifestRecord],
    source: ImageSource,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ImageGroup>, ForgeError> {
    if size == 0 || count == 0 {
        return Err(ForgeError::InvalidConfig("group size and count must be positive".into()));
    }
    let records: Vec<(usize, &ManifestRecord)> = manifest
        .iter()
        .enumerate()
        .filter(|(_, r)| r.image.source == source)
        .collect();
    let mut rng = rng_for(seed, "groups");
    let chosen: Vec<Vec<ImageRef>> = match source {
        ImageSource::Lsmdc => {
            let mut movies: BTreeMap<String, Vec<(u64, &ManifestRecord)>> = BTreeMap::new();
            for (line, r) in &records {
                movies
                    .entry(movie_of(r))
                    .or_default()
                    .push((r.order.unwrap_or(*line as u64), r));
            }
            let mut blocks = Vec::new();
            let mut short = Vec::new();
            for (movie, clips) in &mut movies {
                clips.sort_by_key(|(order, _)| *order);
                if clips.len() < size {
                    short.push(format!("movie '{movie}' has {} images", clips.len()));
                }
                for chunk in clips.chunks_exact(size) {
                    blocks.push(chunk.iter().map(|(_, r)| r.image.clone()).collect::<Vec<_>>());
                }
            }
            if blocks.len() < count {
                let mut msg = format!(
                    "{count} groups of {size} requested but the LSMDC manifest yields only {} single-movie runs",
                    blocks.len()
                );
                if !short.is_empty() {
                    msg.push_str(&format!(" ({})", short.join("; ")));
                }
                return Err(ForgeError::InsufficientImages(msg));
            }
            blocks.shuffle(&mut rng);
            blocks.truncate(count);
            blocks
        }
        _ => {
            if records.len() < size * count {
                return Err(ForgeError::InsufficientImages(format!(
                    "{count} groups of {size} need {} {source} images, manifest has {}",
                    size * count,
                    records.len()
                )));
            }
            let mut pool: Vec<&ManifestRecord> = records.iter().map(|(_, r)| *r).collect();
            pool.shuffle(&mut rng);
            pool.chunks_exact(size)
                .take(count)
                .map(|c| c.iter().map(|r| r.image.clone()).collect())
                .collect()
        }
    };
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(i, images)| ImageGroup::new(group_id(i), images))
        .collect())
}
