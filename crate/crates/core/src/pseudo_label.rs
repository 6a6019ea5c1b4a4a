//! Thresholded pseudo-labeling and its re-balanced variant.
//!
//! Re-balanced pseudo-labeling counts, for every ID class, how many unlabeled
//! samples score above `tau` in that class, takes the smallest count `N` as a
//! quota, and then keeps exactly the `N` highest-scoring samples per class.
//! Because confident OOD samples pile up in a few ID classes while ID samples
//! spread evenly, the quota is set by the classes OOD data avoids, and the
//! truncation discards most of the OOD samples.

use std::cmp::Ordering;

use crate::confidence::id_confidence;
use crate::error::{Error, Result};
use crate::label_space::{argmax, LabelSpace, PredictionMatrix, PseudoLabelSet};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidThreshold { value: tau })
    }
}

/// Labels every row whose ID confidence exceeds `tau` with its ID argmax.
pub fn vanilla_pl(p: &PredictionMatrix, ls: &LabelSpace, tau: f64) -> Result<PseudoLabelSet> {
    check_tau(tau)?;
    let conf = id_confidence(p, ls)?;
    let mut set = PseudoLabelSet::new(ls.total());
    for (i, &c) in conf.values.iter().enumerate() {
        if c > tau {
            let label = argmax(p.row(i).iter().take(ls.k_id()).copied());
            set.insert(i, label)?;
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RplThresholds {
    /// Per-class quota `N`.
    pub quota: usize,
    /// Number of rows above `tau` in each ID class, restricted to rows whose
    /// ID argmax is that class.
    pub counts: Vec<usize>,
    /// `N`-th largest value of each ID column; `None` when the quota is zero.
    pub cutoffs: Option<Vec<f64>>,
}

impl RplThresholds {
    pub fn is_defined(&self) -> bool {
        self.cutoffs.is_some()
    }
}

/// Rows grouped by their ID argmax.
fn candidates_by_class(p: &PredictionMatrix, ls: &LabelSpace) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); ls.k_id()];
    for (i, row) in p.view().outer_iter().enumerate() {
        groups[argmax(row.iter().take(ls.k_id()).copied())].push(i);
    }
    groups
}

fn descending(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Computes the quota `N` and the per-class cutoffs.
///
/// For `tau >= 0.5` a row above `tau` in class `y` necessarily has `y` as its
/// ID argmax, so the restriction to argmax rows only matters for low `tau`,
/// where it keeps the quota achievable in every class.
pub fn compute_rpl_thresholds(
    p: &PredictionMatrix,
    ls: &LabelSpace,
    tau: f64,
) -> Result<RplThresholds> {
    ls.check_columns(p.cols())?;
    let groups = candidates_by_class(p, ls);
    let counts: Vec<usize> = groups
        .iter()
        .enumerate()
        .map(|(y, rows)| rows.iter().filter(|&&i| p.row(i)[y] > tau).count())
        .collect();
    let quota = counts.iter().copied().min().unwrap_or(0);
    let cutoffs = (quota > 0).then(|| {
        (0..ls.k_id())
            .map(|y| {
                let mut column: Vec<f64> = p.view().column(y).to_vec();
                column.sort_by(|a, b| descending(*a, *b));
                column[quota - 1]
            })
            .collect()
    });
    Ok(RplThresholds {
        quota,
        counts,
        cutoffs,
    })
}

/// Keeps exactly `N` samples per ID class: the `N` largest scores among the
/// rows whose ID argmax is that class, ties broken by ascending sample index.
pub fn rebalanced_pl(p: &PredictionMatrix, ls: &LabelSpace, tau: f64) -> Result<PseudoLabelSet> {
    let thresholds = compute_rpl_thresholds(p, ls, tau)?;
    let mut set = PseudoLabelSet::new(ls.total());
    if thresholds.quota == 0 {
        return Ok(set);
    }
    for (y, mut rows) in candidates_by_class(p, ls).into_iter().enumerate() {
        rows.sort_by(|&a, &b| descending(p.row(a)[y], p.row(b)[y]).then(a.cmp(&b)));
        for &i in rows.iter().take(thresholds.quota) {
            set.insert(i, y)?;
        }
    }
    Ok(set)
}
