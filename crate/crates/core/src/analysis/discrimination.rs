//! Within-group ranking of the candidates that share a query's image group,
//! split by how each candidate relates to the ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::embed::EmbeddingVector;
use crate::retrieval::{dot, ranking_order, Pool, PoolEntry, Scored};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    /// Correct image under the query's story.
    GT,
    /// Correct image, other story.
    SameImg,
    /// Other image, same story.
    SameStory,
    /// Other image, other story.
    DiffBoth,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::GT, Category::SameImg, Category::SameStory, Category::DiffBoth];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::GT => "GT",
            Category::SameImg => "SameImg",
            Category::SameStory => "SameStory",
            Category::DiffBoth => "DiffBoth",
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies a query's ground truth within the pool.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub image_id: &'a str,
    pub context_id: &'a str,
    pub group_id: &'a str,
}

pub fn categorize(entry: &PoolEntry, target: Target<'_>) -> Result<Category, AnalysisError> {
    if entry.group_id != target.group_id {
        return Err(AnalysisError::OutsideGroup {
            entry_id: entry.entry_id.clone(),
            group_id: target.group_id.to_string(),
        });
    }
    Ok(match (entry.image_id == target.image_id, entry.context_id == target.context_id) {
        (true, true) => Category::GT,
        (true, false) => Category::SameImg,
        (false, true) => Category::SameStory,
        (false, false) => Category::DiffBoth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizedRank {
    pub entry_id: String,
    pub category: Category,
    /// 1-based rank among the group's entries only.
    pub rank: usize,
}

/// Ranks the target group's entries against `query` from scratch.
pub fn within_group_ranks(pool: &Pool, query: &EmbeddingVector, target: Target<'_>) -> Result<Vec<CategorizedRank>, AnalysisError> {
    let members = pool.group_entries(target.group_id);
    if members.is_empty() {
        return Err(AnalysisError::InvalidInput(format!("group '{}' has no pool entries", target.group_id)));
    }
    let mut scored: Vec<Scored> = members
        .iter()
        .map(|&index| {
            let e = &pool.entries()[index];
            if e.embedding.dim() != query.dim() {
                return Err(AnalysisError::InvalidInput(format!(
                    "query dim {} but entry '{}' has dim {}",
                    query.dim(),
                    e.entry_id,
                    e.embedding.dim()
                )));
            }
            Ok(Scored {
                index,
                score: dot(&query.values, &e.embedding.values),
            })
        })
        .collect::<Result<_, _>>()?;
    scored.sort_by(ranking_order(pool));
    scored
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let e = &pool.entries()[s.index];
            Ok(CategorizedRank {
                entry_id: e.entry_id.clone(),
                category: categorize(e, target)?,
                rank: i + 1,
            })
        })
        .collect()
}

/// Count and mean rank of each category for one query.
pub fn summarize(ranks: &[CategorizedRank]) -> BTreeMap<Category, (usize, Option<f64>)> {
    let mut acc: BTreeMap<Category, (usize, usize)> = Category::ALL.iter().map(|c| (*c, (0, 0))).collect();
    for r in ranks {
        let slot = acc.get_mut(&r.category).expect("all categories present");
        slot.0 += 1;
        slot.1 += r.rank;
    }
    acc.into_iter()
        .map(|(c, (n, sum))| (c, (n, (n > 0).then(|| sum as f64 / n as f64))))
        .collect()
}

/// Mean within-group rank per category, pooled over every query. Categories
/// that never occur map to `None`.
pub fn mean_rank_by_category<'a>(per_query: impl IntoIterator<Item = &'a [CategorizedRank]>) -> BTreeMap<Category, Option<f64>> {
    let mut acc: BTreeMap<Category, (usize, usize)> = Category::ALL.iter().map(|c| (*c, (0, 0))).collect();
    for ranks in per_query {
        for r in ranks {
            let slot = acc.get_mut(&r.category).expect("all categories present");
            slot.0 += 1;
            slot.1 += r.rank;
        }
    }
    acc.into_iter()
        .map(|(c, (n, sum))| (c, (n > 0).then(|| sum as f64 / n as f64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetIndex;
    use crate::embed::{EmbeddingGateway, MockProvider};
    use crate::fixtures::synthetic_dataset;
    use crate::model::ImageSource;
    use crate::prompt::InjectionStrategy;
    use crate::retrieval::{build_pool, embed_query, PoolSpec};

    fn entry(image: &str, ctx: &str, group: &str) -> PoolEntry {
        PoolEntry {
            entry_id: crate::retrieval::entry_id(image, ctx),
            image_id: image.into(),
            context_id: ctx.into(),
            group_id: group.into(),
            embedding: EmbeddingVector {
                values: vec![1.0].into(),
                model_id: "m".into(),
                input_digest: String::new(),
            },
        }
    }

    #[test]
    fn category_definitions() {
        let t = Target {
            image_id: "A",
            context_id: "S1",
            group_id: "g",
        };
        assert_eq!(categorize(&entry("A", "S1", "g"), t).unwrap(), Category::GT);
        assert_eq!(categorize(&entry("A", "S2", "g"), t).unwrap(), Category::SameImg);
        assert_eq!(categorize(&entry("B", "S1", "g"), t).unwrap(), Category::SameStory);
        assert_eq!(categorize(&entry("B", "S2", "g"), t).unwrap(), Category::DiffBoth);
        assert!(matches!(categorize(&entry("C", "S3", "h"), t), Err(AnalysisError::OutsideGroup { .. })));
    }

    fn run(planted: bool, n: usize) -> (Vec<Vec<CategorizedRank>>, usize) {
        let d = synthetic_dataset(2, n, ImageSource::Coco);
        let mut mock = MockProvider::new(17, 64);
        if planted {
            mock = mock.planted(crate::fixtures::story_aware_signal(&d));
        }
        let gw = EmbeddingGateway::with_provider(mock);
        let index = DatasetIndex::new(&d);
        let spec = PoolSpec::new(InjectionStrategy::CtxB, Some(crate::prompt::Granularity::GenreTitle), None).unwrap();
        let pool = build_pool(&index, spec, &gw).unwrap();
        let out = d
            .queries
            .iter()
            .map(|q| {
                let v = embed_query(&index, spec, q, &gw).unwrap();
                let group = index.group_of_image(&q.image_id).unwrap();
                within_group_ranks(
                    &pool,
                    &v,
                    Target {
                        image_id: &q.image_id,
                        context_id: &q.context_id,
                        group_id: &group.group_id,
                    },
                )
                .unwrap()
            })
            .collect();
        (out, n)
    }

    #[test]
    fn partition_sizes() {
        let (all, n) = run(false, 10);
        for ranks in &all {
            let s = summarize(ranks);
            assert_eq!(s[&Category::GT].0, 1);
            assert_eq!(s[&Category::SameImg].0, 1);
            assert_eq!(s[&Category::SameStory].0, n - 1);
            assert_eq!(s[&Category::DiffBoth].0, n - 1);
            let mut seen: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
            seen.sort();
            assert_eq!(seen, (1..=2 * n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn planted_gt_wins() {
        let (all, _) = run(true, 5);
        let means = mean_rank_by_category(all.iter().map(Vec::as_slice));
        assert_eq!(means[&Category::GT], Some(1.0));
    }

    #[test]
    fn single_image_groups_report_null() {
        let (all, _) = run(false, 1);
        let means = mean_rank_by_category(all.iter().map(Vec::as_slice));
        assert_eq!(means[&Category::SameStory], None);
        assert_eq!(means[&Category::DiffBoth], None);
        assert!(means[&Category::GT].is_some());
    }
}
