use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::dataset::DatasetIndex;
use crate::embed::EmbeddingGateway;
use crate::model::AbstractionLevel;
use crate::retrieval::dot;

/// How far apart the two queries written for one image are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSample {
    pub image_id: String,
    pub level: AbstractionLevel,
    pub divergence: f64,
}

/// 1 − cosine between the embeddings of an image's level-`level` queries
/// under its first two stories. Bare query texts are embedded, without any
/// context.
pub fn query_divergence(
    index: &DatasetIndex<'_>,
    level: AbstractionLevel,
    gateway: &EmbeddingGateway,
) -> Result<Vec<DivergenceSample>, AnalysisError> {
    let mut pairs = Vec::new();
    for g in &index.dataset.groups {
        let ctxs = index.contexts_of_group(&g.group_id);
        if ctxs.len() < 2 {
            return Err(AnalysisError::MissingPair {
                image_id: g.images.first().map(|i| i.image_id.clone()).unwrap_or_default(),
                level,
                detail: format!("group '{}' has {} stories", g.group_id, ctxs.len()),
            });
        }
        for img in &g.images {
            let lookup = |c: usize| {
                index
                    .query(&img.image_id, &ctxs[c].context_id, level)
                    .ok_or_else(|| AnalysisError::MissingPair {
                        image_id: img.image_id.clone(),
                        level,
                        detail: format!("no query under story '{}'", ctxs[c].context_id),
                    })
            };
            pairs.push((img.image_id.as_str(), lookup(0)?, lookup(1)?));
        }
    }
    gateway.install(|| {
        pairs
            .par_iter()
            .map(|(image_id, q1, q2)| {
                let v1 = gateway.embed_text(&q1.text)?;
                let v2 = gateway.embed_text(&q2.text)?;
                Ok(DivergenceSample {
                    image_id: image_id.to_string(),
                    level,
                    divergence: divergence(&v1.values, &v2.values),
                })
            })
            .collect()
    })
}

/// Cosine distance of two unit vectors, clamped to [0, 2].
pub fn divergence(a: &[f32], b: &[f32]) -> f64 {
    (1.0 - f64::from(dot(a, b))).clamp(0.0, 2.0)
}
