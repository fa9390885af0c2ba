use super::AnalysisError;

/// Fraction of queries whose ground truth ranks at or above `k` (ranks are
/// 1-based).
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64, AnalysisError> {
    check(ranks)?;
    if k == 0 {
        return Err(AnalysisError::InvalidInput("k must be at least 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64, AnalysisError> {
    check(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

fn check(ranks: &[usize]) -> Result<(), AnalysisError> {
    if ranks.is_empty() {
        return Err(AnalysisError::Empty("rank list"));
    }
    if ranks.contains(&0) {
        return Err(AnalysisError::InvalidInput("ranks are 1-based".into()));
    }
    Ok(())
}
