//! Top-P compression: keep the fewest highest-scoring segments whose
//! attention, added on top of the instruction's, reaches a threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::SegmentScores;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopPConfig {
    /// Cumulative threshold, in `(0, 1]`.
    pub p: f64,
    /// Segments scoring below this stop the selection.
    pub epsilon: f64,
}

impl TopPConfig {
    pub fn new(p: f64, epsilon: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("top-p threshold {p} not in (0, 1]")));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::invalid(format!("epsilon {epsilon} must be non-negative")));
        }
        Ok(Self { p, epsilon })
    }

    /// Default for sentence granularity, where individual scores are smaller.
    pub fn sentence_default() -> Self {
        Self { p: 0.95, epsilon: 1e-3 }
    }
}

impl Default for TopPConfig {
    fn default() -> Self {
        Self { p: 0.95, epsilon: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionResult {
    /// Retained segment ids, in original prompt order.
    pub kept: Vec<String>,
    /// Instruction score plus the scores of every retained segment.
    pub cumulative_score: f64,
    /// Retained ids in the order they were selected (score descending).
    pub selection_order: Vec<String>,
}

impl CompressionResult {
    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Selects segments in descending score order, starting from the
/// instruction score. Before each addition the loop stops if the running
/// sum has reached `p` or the candidate scores below `epsilon`. Ties go to
/// the earlier segment.
pub fn compress(scores: &SegmentScores, config: &TopPConfig) -> CompressionResult {
    let segs = &scores.segments;
    let mut order: Vec<usize> = (0..segs.len()).collect();
    // stable: equal scores keep their original relative order
    order.sort_by(|&a, &b| segs[b].score.total_cmp(&segs[a].score));

    let mut sum = scores.instruction;
    let mut taken = vec![false; segs.len()];
    let mut selection_order = Vec::new();
    for idx in order {
        if sum >= config.p || segs[idx].score < config.epsilon {
            break;
        }
        sum += segs[idx].score;
        taken[idx] = true;
        selection_order.push(segs[idx].id.clone());
    }
    let kept = segs
        .iter()
        .zip(&taken)
        .filter(|(_, &t)| t)
        .map(|(s, _)| s.id.clone())
        .collect();
    CompressionResult {
        kept,
        cumulative_score: sum,
        selection_order,
    }
}
