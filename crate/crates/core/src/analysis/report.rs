//! Metric tables and the CSV/JSON files written for each run.
//!
//! CSV output is comma separated, dot decimal, LF terminated. Floats use
//! Rust's shortest round-trip formatting so reruns are byte identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::discrimination::Category;
use super::divergence::DivergenceSample;
use super::mann_whitney::MannWhitney;
use super::AnalysisError;
use crate::model::AbstractionLevel;
use crate::prompt::{Granularity, InjectionStrategy};
use crate::retrieval::MatchMode;

pub const METRICS_CSV_HEADER: &str = "strategy,granularity,level,level_aware,match_mode,recall@1,recall@5,mrr";
pub const DIVERGENCE_CSV_HEADER: &str = "image_id,level,divergence";
pub const DISCRIMINATION_CSV_HEADER: &str = "strategy,granularity,level,level_aware,query_id,category,count,mean_rank";

/// Cutoffs stored for every cell.
pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub strategy: InjectionStrategy,
    pub granularity: Option<Granularity>,
    pub level: AbstractionLevel,
    pub level_aware: bool,
    pub match_mode: MatchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    /// k -> Recall@k.
    pub recall: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub queries: usize,
}

impl CellMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self, AnalysisError> {
        let mut recall = BTreeMap::new();
        for k in RECALL_CUTOFFS {
            recall.insert(k, super::recall_at_k(ranks, k)?);
        }
        Ok(Self {
            recall,
            mrr: super::mrr(ranks)?,
            queries: ranks.len(),
        })
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub key: CellKey,
    pub metrics: CellMetrics,
}

/// Every cell of one or more runs against a single embedding model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub model_id: String,
    pub dim: usize,
    /// Sorted by key.
    pub cells: Vec<MetricCell>,
}

impl MetricTable {
    pub fn new(model_id: impl Into<String>, dim: usize, cells: impl IntoIterator<Item = MetricCell>) -> Self {
        let mut cells: Vec<MetricCell> = cells.into_iter().collect();
        cells.sort_by(|a, b| a.key.cmp(&b.key));
        Self {
            model_id: model_id.into(),
            dim,
            cells,
        }
    }

    pub fn get(&self, key: &CellKey) -> Option<&CellMetrics> {
        self.cells
            .binary_search_by(|c| c.key.cmp(key))
            .ok()
            .map(|i| &self.cells[i].metrics)
    }
}

/// Merges the tables of several runs. All runs must share model and
/// dimension; a cell reported by two runs must carry the same numbers.
pub fn aggregate_report(runs: &[MetricTable]) -> Result<MetricTable, AnalysisError> {
    let first = runs.first().ok_or(AnalysisError::Empty("run list"))?;
    let mut cells: BTreeMap<CellKey, CellMetrics> = BTreeMap::new();
    for run in runs {
        if run.model_id != first.model_id || run.dim != first.dim {
            return Err(AnalysisError::Inconsistent(format!(
                "runs mix model '{}' (dim {}) with model '{}' (dim {})",
                first.model_id, first.dim, run.model_id, run.dim
            )));
        }
        for cell in &run.cells {
            match cells.get(&cell.key) {
                Some(existing) if *existing != cell.metrics => {
                    return Err(AnalysisError::Inconsistent(format!(
                        "cell {} reported with different values",
                        key_fields(&cell.key).join(",")
                    )))
                }
                Some(_) => {}
                None => {
                    cells.insert(cell.key, cell.metrics.clone());
                }
            }
        }
    }
    Ok(MetricTable::new(
        first.model_id.clone(),
        first.dim,
        cells.into_iter().map(|(key, metrics)| MetricCell { key, metrics }),
    ))
}

pub fn granularity_label(g: Option<Granularity>) -> &'static str {
    g.map_or("none", Granularity::as_str)
}

fn key_fields(k: &CellKey) -> [String; 5] {
    [
        k.strategy.as_str().to_string(),
        granularity_label(k.granularity).to_string(),
        k.level.as_str().to_string(),
        k.level_aware.to_string(),
        k.match_mode.as_str().to_string(),
    ]
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

pub fn metrics_csv(table: &MetricTable) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for c in &table.cells {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            key_fields(&c.key).join(","),
            opt(c.metrics.recall_at(1)),
            opt(c.metrics.recall_at(5)),
            c.metrics.mrr
        );
    }
    out
}

pub fn metrics_json(table: &MetricTable) -> String {
    let mut s = serde_json::to_string_pretty(table).expect("metric table serializes");
    s.push('\n');
    s
}

pub fn parse_metrics_json(text: &str) -> Result<MetricTable, AnalysisError> {
    serde_json::from_str(text).map_err(|e| AnalysisError::InvalidInput(format!("metrics.json: {e}")))
}

pub fn divergence_csv(samples: &[DivergenceSample]) -> String {
    let mut out = format!("{DIVERGENCE_CSV_HEADER}\n");
    for s in samples {
        let _ = writeln!(out, "{},{},{}", s.image_id, s.level, s.divergence);
    }
    out
}

/// L1 against another level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelComparison {
    pub baseline: AbstractionLevel,
    pub level: AbstractionLevel,
    pub baseline_mean: f64,
    pub level_mean: f64,
    pub two_sided: MannWhitney,
    /// Alternative: `level` diverges more than the baseline.
    pub level_greater: MannWhitney,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub model_id: String,
    pub samples: usize,
    pub mean_by_level: BTreeMap<AbstractionLevel, f64>,
    pub comparisons: Vec<LevelComparison>,
}

/// One row per (cell, query, category).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationRow {
    pub strategy: InjectionStrategy,
    pub granularity: Option<Granularity>,
    pub level: AbstractionLevel,
    pub level_aware: bool,
    pub query_id: String,
    pub category: Category,
    pub count: usize,
    pub mean_rank: Option<f64>,
}

pub fn discrimination_csv(rows: &[DiscriminationRow]) -> String {
    let mut out = format!("{DISCRIMINATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.strategy,
            granularity_label(r.granularity),
            r.level,
            r.level_aware,
            r.query_id,
            r.category,
            r.count,
            opt(r.mean_rank)
        );
    }
    out
}

/// Per-cell category means pooled over queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationSummary {
    pub strategy: InjectionStrategy,
    pub granularity: Option<Granularity>,
    pub level: AbstractionLevel,
    pub level_aware: bool,
    pub queries: usize,
    /// `None` when the category never occurs.
    pub mean_rank: BTreeMap<Category, Option<f64>>,
}

pub fn write_text(path: &Path, text: &str) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(strategy: InjectionStrategy, level: AbstractionLevel, ranks: &[usize]) -> MetricCell {
        MetricCell {
            key: CellKey {
                strategy,
                granularity: strategy.uses_context().then_some(Granularity::GenreTitle),
                level,
                level_aware: false,
                match_mode: MatchMode::ImageIdentity,
            },
            metrics: CellMetrics::from_ranks(ranks).unwrap(),
        }
    }

    #[test]
    fn single_run_csv() {
        let t = MetricTable::new(
            "m",
            4,
            [
                cell(InjectionStrategy::CtxB, AbstractionLevel::L2, &[1, 2]),
                cell(InjectionStrategy::NoCtx, AbstractionLevel::L1, &[1, 3, 1, 10]),
            ],
        );
        let csv = metrics_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines[1], "NoCtx,none,L1,false,ImageIdentity,0.5,0.75,0.6083333333333333");
        assert_eq!(lines[2], "CtxB,g3,L2,false,ImageIdentity,0.5,1,0.75");
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }

    #[test]
    fn aggregation_is_deterministic_and_checks_models() {
        let a = MetricTable::new("m", 4, [cell(InjectionStrategy::CtxI, AbstractionLevel::L1, &[1])]);
        let b = MetricTable::new("m", 4, [cell(InjectionStrategy::CtxQ, AbstractionLevel::L1, &[2])]);
        let ab = aggregate_report(&[a.clone(), b.clone()]).unwrap();
        let ba = aggregate_report(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(metrics_csv(&ab), metrics_csv(&ba));
        assert_eq!(aggregate_report(&[a.clone(), a.clone()]).unwrap(), a);
        let other = MetricTable::new("n", 4, [cell(InjectionStrategy::CtxI, AbstractionLevel::L1, &[1])]);
        assert!(matches!(aggregate_report(&[a, other]), Err(AnalysisError::Inconsistent(_))));
        assert!(aggregate_report(&[]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = MetricTable::new("m", 4, [cell(InjectionStrategy::CtxI, AbstractionLevel::L3, &[1, 4, 7])]);
        assert_eq!(parse_metrics_json(&metrics_json(&t)).unwrap(), t);
    }

    #[test]
    fn recall_is_monotone() {
        let m = CellMetrics::from_ranks(&[3, 9, 1, 12, 5]).unwrap();
        let r: Vec<f64> = RECALL_CUTOFFS.iter().map(|k| m.recall_at(*k).unwrap()).collect();
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
        assert!(m.mrr >= m.recall_at(1).unwrap() && m.mrr <= 1.0);
    }
}
