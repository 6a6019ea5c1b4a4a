//! Per-sample confidence scores used to route unlabeled samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{LabelSpace, PredictionMatrix};

/// Entries are clamped to this before taking logs.
pub const ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMeasure {
    /// Largest probability among the ID classes.
    #[default]
    MaxProb,
    /// Negative Shannon entropy (natural log) over all columns.
    NegEntropy,
    /// Largest minus second-largest probability over all columns.
    ScoreDiff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector {
    pub values: Vec<f64>,
    pub measure: ConfidenceMeasure,
}

impl ConfidenceVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows scoring strictly below `threshold`, ascending.
    pub fn below(&self, threshold: f64) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &c)| c < threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// ID confidence: max over the first `k_id` columns only.
pub fn id_confidence(p: &PredictionMatrix, ls: &LabelSpace) -> Result<ConfidenceVector> {
    ls.check_columns(p.cols())?;
    let values = p
        .view()
        .outer_iter()
        .map(|row| {
            row.iter()
                .take(ls.k_id())
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(ConfidenceVector {
        values,
        measure: ConfidenceMeasure::MaxProb,
    })
}

pub fn entropy_confidence(p: &PredictionMatrix) -> ConfidenceVector {
    let values = p
        .view()
        .outer_iter()
        .map(|row| {
            row.iter()
                .map(|&v| {
                    let v = v.max(ENTROPY_FLOOR);
                    v * v.ln()
                })
                .sum()
        })
        .collect();
    ConfidenceVector {
        values,
        measure: ConfidenceMeasure::NegEntropy,
    }
}

pub fn score_diff_confidence(p: &PredictionMatrix) -> Result<ConfidenceVector> {
    if p.cols() < 2 {
        return Err(Error::TooFewColumns {
            needed: 2,
            actual: p.cols(),
        });
    }
    let values = p
        .view()
        .outer_iter()
        .map(|row| {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &v in row {
                if v > first {
                    second = first;
                    first = v;
                } else if v > second {
                    second = v;
                }
            }
            first - second
        })
        .collect();
    Ok(ConfidenceVector {
        values,
        measure: ConfidenceMeasure::ScoreDiff,
    })
}

pub fn confidence(
    p: &PredictionMatrix,
    ls: &LabelSpace,
    measure: ConfidenceMeasure,
) -> Result<ConfidenceVector> {
    match measure {
        ConfidenceMeasure::MaxProb => id_confidence(p, ls),
        ConfidenceMeasure::NegEntropy => {
            ls.check_columns(p.cols())?;
            Ok(entropy_confidence(p))
        }
        ConfidenceMeasure::ScoreDiff => {
            ls.check_columns(p.cols())?;
            score_diff_confidence(p)
        }
    }
}
