//! Retrieval metrics, query divergence, discrimination ranks and the report
//! files built from them.

pub mod discrimination;
pub mod divergence;
pub mod mann_whitney;
pub mod metrics;
pub mod report;

use thiserror::Error;

use crate::embed::EmbedError;
use crate::model::AbstractionLevel;
use crate::retrieval::RetrievalError;

pub use discrimination::{categorize, mean_rank_by_category, within_group_ranks, Category, CategorizedRank, Target};
pub use divergence::{query_divergence, DivergenceSample};
pub use mann_whitney::{mann_whitney_u, mann_whitney_with, Alternative, MannWhitney, Method};
pub use metrics::{mrr, recall_at_k};
pub use report::{aggregate_report, CellKey, CellMetrics, MetricCell, MetricTable};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{0}")]
    InvalidInput(String),
    #[error("image '{image_id}' has no paired {level} query: {detail}")]
    MissingPair {
        image_id: String,
        level: AbstractionLevel,
        detail: String,
    },
    #[error("entry '{entry_id}' is outside group '{group_id}'")]
    OutsideGroup { entry_id: String, group_id: String },
    #[error("inconsistent runs: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}
