//! Needleman-Wunsch global alignment scoring.
//!
//! The same recurrence scores operator sequences (format extraction) and
//! boundary-offset sequences (format-based clustering); only the element type
//! differs.

use alloc::vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("match score ({0}) must exceed mismatch score ({1})")]
    MatchNotAboveMismatch(i64, i64),
    #[error("gap score must be negative, got {0}")]
    NonNegativeGap(i64),
    #[error("similarity threshold must lie in [0, 1], got {0}")]
    ThresholdOutOfRange(f64),
}

/// Scoring constants and the merge threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub gap_score: i64,
    pub match_score: i64,
    pub mismatch_score: i64,
    pub similarity_threshold: f64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        Self { gap_score: -2, match_score: 1, mismatch_score: -1, similarity_threshold: 0.8 }
    }
}

impl AlignmentParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        if self.match_score <= self.mismatch_score {
            return Err(ParamsError::MatchNotAboveMismatch(self.match_score, self.mismatch_score));
        }
        if self.gap_score >= 0 {
            return Err(ParamsError::NonNegativeGap(self.gap_score));
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(ParamsError::ThresholdOutOfRange(self.similarity_threshold));
        }
        Ok(())
    }
}

/// Optimal global alignment score of `a` against `b`.
///
/// Row/column 0 hold cumulative gap penalties; cell `(i, j)` is the max of the
/// diagonal plus match/mismatch and either neighbour plus a gap. Uses two rows.
pub fn nw_align<T: PartialEq>(a: &[T], b: &[T], params: &AlignmentParams) -> i64 {
    let gap = params.gap_score;
    let mut prev: alloc::vec::Vec<i64> = (0..=b.len() as i64).map(|j| j * gap).collect();
    let mut cur = vec![0i64; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = (i as i64 + 1) * gap;
        for (j, y) in b.iter().enumerate() {
            let c = if x == y { params.match_score } else { params.mismatch_score };
            cur[j + 1] = (prev[j] + c).max(prev[j + 1] + gap).max(cur[j] + gap);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
