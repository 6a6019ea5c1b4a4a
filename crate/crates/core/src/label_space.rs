//! Class-space, sample and prediction containers shared by every module.
//!
//! Class indices `0..k_id` are the in-distribution (ID) classes the labeled
//! set covers; `k_id..k_id + k_extra` are extra classes the model may use for
//! unlabeled data it considers out-of-distribution.

use std::collections::btree_map::{self, BTreeMap};
use std::collections::HashSet;
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Row-sum tolerance for prediction matrices.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct LabelSpace {
    k_id: usize,
    k_extra: usize,
}

impl LabelSpace {
    pub fn new(k_id: usize, k_extra: usize) -> Result<Self> {
        if k_id < 2 {
            return Err(Error::InvalidLabelSpace(format!(
                "need at least 2 ID classes, got {k_id}"
            )));
        }
        Ok(Self { k_id, k_extra })
    }

    pub fn k_id(&self) -> usize {
        self.k_id
    }

    pub fn k_extra(&self) -> usize {
        self.k_extra
    }

    pub fn total(&self) -> usize {
        self.k_id + self.k_extra
    }

    pub fn is_id(&self, class: usize) -> bool {
        class < self.k_id
    }

    pub fn extra_class(&self, i: usize) -> usize {
        debug_assert!(i < self.k_extra);
        self.k_id + i
    }

    pub(crate) fn check_columns(&self, cols: usize) -> Result<()> {
        if cols != self.total() {
            return Err(Error::DimensionMismatch {
                what: "prediction columns vs label space",
                expected: self.total(),
                actual: cols,
            });
        }
        Ok(())
    }
}

/// First problem found in a candidate prediction matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFinite { row: usize, col: usize },
    Negative { row: usize, col: usize, value: f64 },
    RowSum { row: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFinite { row, col } => write!(f, "row {row}: entry {col} is not finite"),
            Violation::Negative { row, col, value } => {
                write!(f, "row {row}: entry {col} is negative ({value})")
            }
            Violation::RowSum { row, sum } => write!(f, "row {row}: sums to {sum}, not 1"),
        }
    }
}

/// Checks row-stochasticity and nonnegativity, reporting the first violating row.
pub fn validate_prediction_matrix(probs: ArrayView2<'_, f64>) -> Result<(), Violation> {
    for (row, values) in probs.outer_iter().enumerate() {
        let mut sum = 0.0;
        for (col, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Violation::NonFinite { row, col });
            }
            if v < 0.0 {
                return Err(Violation::Negative { row, col, value: v });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Violation::RowSum { row, sum });
        }
    }
    Ok(())
}

/// Row-stochastic matrix of model posteriors, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    probs: Array2<f64>,
}

impl PredictionMatrix {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        validate_prediction_matrix(probs.view()).map_err(Error::InvalidPrediction)?;
        Ok(Self { probs })
    }

    /// Rescales every row to sum to one before validating. Rows of zeros stay invalid.
    pub fn renormalized(mut probs: Array2<f64>) -> Result<Self> {
        for mut row in probs.rows_mut() {
            let sum: f64 = row.sum();
            if sum > 0.0 && sum.is_finite() {
                row.mapv_inplace(|v| v / sum);
            }
        }
        Self::new(probs)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "row length",
                    expected: cols,
                    actual: r.len(),
                });
            }
            flat.extend_from_slice(r);
        }
        let probs = Array2::from_shape_vec((rows.len(), cols), flat)
            .expect("shape checked above");
        Self::new(probs)
    }

    pub fn rows(&self) -> usize {
        self.probs.nrows()
    }

    pub fn cols(&self) -> usize {
        self.probs.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.probs.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.probs
    }

    /// Keeps only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            probs: self.probs.select(ndarray::Axis(0), rows),
        }
    }
}

/// Index of the largest of `values`; the lowest index wins ties.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Predicted ID class per row: the argmax over the ID columns only.
pub fn predict_id_label(p: &PredictionMatrix, ls: &LabelSpace) -> Result<Vec<usize>> {
    ls.check_columns(p.cols())?;
    Ok(p
        .probs
        .outer_iter()
        .map(|row| argmax(row.iter().take(ls.k_id()).copied()))
        .collect())
}

/// Features with stable sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    features: Array2<f64>,
    ids: Vec<usize>,
}

impl SampleBatch {
    pub fn new(features: Array2<f64>, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != features.nrows() {
            return Err(Error::DimensionMismatch {
                what: "sample ids vs feature rows",
                expected: features.nrows(),
                actual: ids.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateSampleId(id));
            }
        }
        Ok(Self { features, ids })
    }

    /// Batch whose ids are the row positions.
    pub fn from_features(features: Array2<f64>) -> Self {
        let ids = (0..features.nrows()).collect();
        Self { features, ids }
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Sparse `sample -> class` pseudo-label assignment. Each sample appears at most once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PseudoLabelSet {
    total_classes: usize,
    entries: BTreeMap<usize, usize>,
}

impl PseudoLabelSet {
    pub fn new(total_classes: usize) -> Self {
        Self {
            total_classes,
            entries: BTreeMap::new(),
        }
    }

    pub fn from_pairs(
        total_classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut set = Self::new(total_classes);
        for (sample, class) in pairs {
            set.insert(sample, class)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, sample: usize, class: usize) -> Result<()> {
        if class >= self.total_classes {
            return Err(Error::ClassOutOfRange {
                class,
                total: self.total_classes,
            });
        }
        match self.entries.entry(sample) {
            btree_map::Entry::Occupied(_) => Err(Error::DuplicateSample(sample)),
            btree_map::Entry::Vacant(slot) => {
                slot.insert(class);
                Ok(())
            }
        }
    }

    /// Disjoint union; fails if a sample is labeled in both sets.
    pub fn union(mut self, other: &PseudoLabelSet) -> Result<Self> {
        self.total_classes = self.total_classes.max(other.total_classes);
        for (sample, class) in other.iter() {
            self.insert(sample, class)?;
        }
        Ok(self)
    }

    pub fn get(&self, sample: usize) -> Option<usize> {
        self.entries.get(&sample).copied()
    }

    pub fn contains(&self, sample: usize) -> bool {
        self.entries.contains_key(&sample)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    /// Pairs in ascending sample order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|(&s, &c)| (s, c))
    }

    /// Counts per class over `0..classes`; labels at or above `classes` are skipped.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &c in self.entries.values() {
            if c < classes {
                counts[c] += 1;
            }
        }
        counts
    }
}
