//! Semantic exploration clustering.
//!
//! Low-confidence samples are spread over the `K` extra classes by a balanced
//! soft assignment: the plan `Q` on the transportation polytope
//! `U(K, M) = {Q >= 0 : Q 1 = 1/K, Q^T 1 = 1/M}` minimizing `<Q, -log P>`,
//! where `P` holds each sample's posterior over the extra classes. The plan is
//! computed with entropically regularized Sinkhorn-Knopp scaling and each
//! sample then takes the extra class with the largest mass in its column.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::confidence::ConfidenceVector;
use crate::error::{Error, Result};
use crate::label_space::{argmax, LabelSpace, PredictionMatrix, PseudoLabelSet};

/// Posterior entries below this are raised to it before normalizing.
pub const PROB_FLOOR: f64 = 1e-8;
/// Tolerance for [`AssignmentMatrix`] marginals.
pub const MARGINAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Inverse entropic temperature: the kernel is `P^reg`.
    pub reg: f64,
    pub max_iters: usize,
    /// Stop once the row marginals are off by less than this (max abs).
    pub marginal_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            reg: 25.0,
            max_iters: 32,
            marginal_tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0 && self.reg.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sinkhorn reg must be positive and finite, got {}",
                self.reg
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("sinkhorn max_iters must be >= 1".into()));
        }
        if self.marginal_tol.is_nan() || self.marginal_tol <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sinkhorn marginal_tol must be positive, got {}",
                self.marginal_tol
            )));
        }
        Ok(())
    }
}

/// Nonnegative `K x M` plan whose rows sum to `1/K` and columns to `1/M`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    q: Array2<f64>,
}

impl AssignmentMatrix {
    pub fn new(q: Array2<f64>) -> Result<Self> {
        let violation = marginal_violation(q.view());
        if q.iter().any(|&v| v < 0.0 || !v.is_finite()) || violation > MARGINAL_TOL {
            return Err(Error::InfeasibleAssignment { violation });
        }
        Ok(Self { q })
    }

    pub fn k(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.q.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.q.view()
    }

    /// Transport cost `<Q, -log P>` with `P` clamped at [`PROB_FLOOR`].
    pub fn cost(&self, p: ArrayView2<'_, f64>) -> f64 {
        self.q
            .iter()
            .zip(p.iter())
            .map(|(&q, &p)| -q * p.max(PROB_FLOOR).ln())
            .sum()
    }
}

/// Largest absolute deviation of either marginal from uniform.
pub fn marginal_violation(q: ArrayView2<'_, f64>) -> f64 {
    let (k, m) = q.dim();
    if k == 0 || m == 0 {
        return 0.0;
    }
    let rows = q
        .sum_axis(Axis(1))
        .iter()
        .map(|&s| (s - 1.0 / k as f64).abs())
        .fold(0.0, f64::max);
    let cols = q
        .sum_axis(Axis(0))
        .iter()
        .map(|&s| (s - 1.0 / m as f64).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

/// Extra-class posteriors of the selected samples, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraPosterior {
    /// `K x M`; every column sums to one.
    pub matrix: Array2<f64>,
    /// Samples whose extra-class mass was exactly zero; their columns are uniform.
    pub zero_mass: Vec<usize>,
}

pub fn normalize_extra(
    p: &PredictionMatrix,
    ls: &LabelSpace,
    subset: &[usize],
) -> Result<ExtraPosterior> {
    ls.check_columns(p.cols())?;
    if ls.k_extra() == 0 {
        return Err(Error::NoExtraClasses);
    }
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let k = ls.k_extra();
    let mut matrix = Array2::zeros((k, subset.len()));
    let mut zero_mass = Vec::new();
    for (j, &sample) in subset.iter().enumerate() {
        if sample >= p.rows() {
            return Err(Error::DimensionMismatch {
                what: "subset index vs prediction rows",
                expected: p.rows(),
                actual: sample,
            });
        }
        let extra = p.row(sample).slice_move(ndarray::s![ls.k_id()..]);
        let mass: f64 = extra.sum();
        if mass <= 0.0 {
            zero_mass.push(sample);
        }
        let mut col = matrix.column_mut(j);
        for (i, &v) in extra.iter().enumerate() {
            let normalized = if mass > 0.0 { v / mass } else { 0.0 };
            col[i] = normalized.max(PROB_FLOOR);
        }
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    Ok(ExtraPosterior { matrix, zero_mass })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornReport {
    pub iterations: usize,
    pub converged: bool,
    /// Max-abs row-marginal error of the scaled kernel when iteration stopped.
    pub residual: f64,
    /// Same error in l1 norm.
    pub residual_l1: f64,
    /// l1 mass moved by the feasibility rounding.
    pub repair_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornOutcome {
    pub assignment: AssignmentMatrix,
    pub report: SinkhornReport,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn validate_posterior(p: ArrayView2<'_, f64>) -> Result<()> {
    let (k, m) = p.dim();
    if k == 0 || m == 0 {
        return Err(Error::InvalidAssignmentInput(format!("empty {k}x{m} posterior")));
    }
    for (j, col) in p.axis_iter(Axis(1)).enumerate() {
        if col.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidAssignmentInput(format!(
                "column {j} has a negative or non-finite entry"
            )));
        }
        let s = col.sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidAssignmentInput(format!(
                "column {j} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Moves the smallest amount of mass needed to land exactly on `U(K, M)`:
/// shrink rows that are too heavy, shrink columns that are too heavy, then
/// spread the remaining deficit as a rank-one correction.
fn round_to_polytope(q: &mut Array2<f64>) -> f64 {
    let (k, m) = q.dim();
    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / m as f64;
    let before = q.clone();

    for mut row in q.rows_mut() {
        let s = row.sum();
        if s > row_target {
            let scale = row_target / s;
            row.mapv_inplace(|v| v * scale);
        }
    }
    for mut col in q.columns_mut() {
        let s = col.sum();
        if s > col_target {
            let scale = col_target / s;
            col.mapv_inplace(|v| v * scale);
        }
    }
    let row_err: Array1<f64> = q.sum_axis(Axis(1)).mapv(|s| (row_target - s).max(0.0));
    let col_err: Array1<f64> = q.sum_axis(Axis(0)).mapv(|s| (col_target - s).max(0.0));
    let total = row_err.sum();
    if total > 0.0 {
        for i in 0..k {
            for j in 0..m {
                q[[i, j]] += row_err[i] * col_err[j] / total;
            }
        }
    }
    q.iter().zip(before.iter()).map(|(a, b)| (a - b).abs()).sum()
}

/// Balanced soft assignment of `M` samples (columns of `p`) onto `K` classes.
///
/// Runs log-domain Sinkhorn scaling of the kernel `P^reg`: each iteration
/// rescales rows to `1/K` and then columns to `1/M`. Iteration stops once the
/// row marginals are within `marginal_tol` or after `max_iters`. The scaled
/// plan is finally rounded onto the polytope, so the returned matrix is
/// feasible even when the iteration budget ran out first.
pub fn sinkhorn_assign(p: ArrayView2<'_, f64>, cfg: &SinkhornConfig) -> Result<SinkhornOutcome> {
    cfg.validate()?;
    validate_posterior(p)?;
    let (k, m) = p.dim();

    let mut log_kernel = Array2::zeros((k, m));
    for ((i, j), &v) in p.indexed_iter() {
        let entry = cfg.reg * v.max(PROB_FLOOR).ln();
        if !entry.is_finite() {
            return Err(Error::NonFiniteKernel { row: i, col: j });
        }
        log_kernel[[i, j]] = entry;
    }

    let log_row_target = -(k as f64).ln();
    let log_col_target = -(m as f64).ln();
    let mut f = Array1::<f64>::zeros(k);
    let mut g = Array1::<f64>::zeros(m);
    let mut residual = f64::INFINITY;
    let mut residual_l1 = f64::INFINITY;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..k {
            let row = log_kernel.row(i);
            f[i] = log_row_target - log_sum_exp(row.iter().zip(g.iter()).map(|(&l, &gj)| l + gj));
        }
        for j in 0..m {
            let col = log_kernel.column(j);
            g[j] = log_col_target - log_sum_exp(col.iter().zip(f.iter()).map(|(&l, &fi)| l + fi));
        }
        let (max_err, l1_err) = row_error(&log_kernel, &f, &g);
        residual = max_err;
        residual_l1 = l1_err;
        if residual < cfg.marginal_tol {
            break;
        }
    }

    let mut q = Array2::zeros((k, m));
    for ((i, j), &l) in log_kernel.indexed_iter() {
        q[[i, j]] = (l + f[i] + g[j]).exp();
    }
    let repair_l1 = round_to_polytope(&mut q);
    let assignment = AssignmentMatrix::new(q)?;
    Ok(SinkhornOutcome {
        assignment,
        report: SinkhornReport {
            iterations,
            converged: residual < cfg.marginal_tol,
            residual,
            residual_l1,
            repair_l1,
        },
    })
}

fn row_error(log_kernel: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>) -> (f64, f64) {
    let target = 1.0 / log_kernel.nrows() as f64;
    let mut max_err: f64 = 0.0;
    let mut l1 = 0.0;
    for (i, row) in log_kernel.outer_iter().enumerate() {
        let s: f64 = row
            .iter()
            .zip(g.iter())
            .map(|(&l, &gj)| (l + f[i] + gj).exp())
            .sum();
        let e = (s - target).abs();
        max_err = max_err.max(e);
        l1 += e;
    }
    (max_err, l1)
}

/// Sample `subset[j]` gets extra class `k_id + argmax_i Q[i][j]`; ties go to the lowest index.
pub fn harden(q: &AssignmentMatrix, ls: &LabelSpace, subset: &[usize]) -> Result<PseudoLabelSet> {
    if q.m() != subset.len() {
        return Err(Error::DimensionMismatch {
            what: "assignment columns vs subset",
            expected: subset.len(),
            actual: q.m(),
        });
    }
    if q.k() != ls.k_extra() {
        return Err(Error::DimensionMismatch {
            what: "assignment rows vs extra classes",
            expected: ls.k_extra(),
            actual: q.k(),
        });
    }
    let mut set = PseudoLabelSet::new(ls.total());
    for (j, col) in q.view().axis_iter(Axis(1)).enumerate() {
        set.insert(subset[j], ls.extra_class(argmax(col.iter().copied())))?;
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecOutcome {
    pub labels: PseudoLabelSet,
    /// `None` when no sample fell below the threshold.
    pub report: Option<SinkhornReport>,
    pub zero_mass: Vec<usize>,
}

/// Clusters every sample with confidence strictly below `gamma` onto the extra classes.
pub fn sec(
    p: &PredictionMatrix,
    ls: &LabelSpace,
    conf: &ConfidenceVector,
    gamma: f64,
    cfg: &SinkhornConfig,
) -> Result<SecOutcome> {
    if ls.k_extra() == 0 {
        return Err(Error::NoExtraClasses);
    }
    if conf.len() != p.rows() {
        return Err(Error::DimensionMismatch {
            what: "confidence entries vs prediction rows",
            expected: p.rows(),
            actual: conf.len(),
        });
    }
    sec_on_subset(p, ls, &conf.below(gamma), cfg)
}

/// Clusters the given samples onto the extra classes; an empty subset yields an empty set.
pub fn sec_on_subset(
    p: &PredictionMatrix,
    ls: &LabelSpace,
    subset: &[usize],
    cfg: &SinkhornConfig,
) -> Result<SecOutcome> {
    if ls.k_extra() == 0 {
        return Err(Error::NoExtraClasses);
    }
    if subset.is_empty() {
        return Ok(SecOutcome {
            labels: PseudoLabelSet::new(ls.total()),
            report: None,
            zero_mass: Vec::new(),
        });
    }
    let extra = normalize_extra(p, ls, subset)?;
    let outcome = sinkhorn_assign(extra.matrix.view(), cfg)?;
    let labels = harden(&outcome.assignment, ls, subset)?;
    Ok(SecOutcome {
        labels,
        report: Some(outcome.report),
        zero_mass: extra.zero_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::id_confidence;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_posterior(rng: &mut ChaCha8Rng, k: usize, m: usize) -> Array2<f64> {
        let mut p = Array2::from_shape_fn((k, m), |_| -rng.random::<f64>().ln());
        for mut col in p.columns_mut() {
            let s = col.sum();
            col.mapv_inplace(|v| v / s);
        }
        p
    }

    #[test]
    fn normalize_extra_rescales_extra_columns() {
        let ls = LabelSpace::new(2, 2).unwrap();
        let p = PredictionMatrix::from_rows(&[vec![0.4, 0.2, 0.1, 0.3], vec![0.5, 0.1, 0.2, 0.2]]).unwrap();
        let out = normalize_extra(&p, &ls, &[0, 1]).unwrap();
        assert_abs_diff_eq!(out.matrix[[0, 0]], 0.25, epsilon = 1e-7);
        assert_abs_diff_eq!(out.matrix[[1, 0]], 0.75, epsilon = 1e-7);
        assert_abs_diff_eq!(out.matrix[[0, 1]], 0.5, epsilon = 1e-12);
        assert!(out.zero_mass.is_empty());
    }

    #[test]
    fn normalize_extra_reports_zero_mass_and_errors() {
        let ls = LabelSpace::new(2, 2).unwrap();
        let p = PredictionMatrix::from_rows(&[vec![0.5, 0.5, 0.0, 0.0]]).unwrap();
        let out = normalize_extra(&p, &ls, &[0]).unwrap();
        assert_eq!(out.zero_mass, vec![0]);
        assert_abs_diff_eq!(out.matrix[[0, 0]], 0.5, epsilon = 1e-12);

        assert!(matches!(normalize_extra(&p, &ls, &[]), Err(Error::EmptySubset)));
        let no_extra = LabelSpace::new(4, 0).unwrap();
        let p4 = PredictionMatrix::from_rows(&[vec![0.25; 4]]).unwrap();
        assert!(matches!(normalize_extra(&p4, &no_extra, &[0]), Err(Error::NoExtraClasses)));
    }

    #[test]
    fn normalize_extra_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ls = LabelSpace::new(3, 4).unwrap();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let r: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let p = PredictionMatrix::from_rows(&rows).unwrap();
        let subset: Vec<usize> = (0..40).step_by(3).collect();
        let out = normalize_extra(&p, &ls, &subset).unwrap();
        for col in out.matrix.columns() {
            assert_abs_diff_eq!(col.sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_class_plan_is_uniform_row() {
        let p = Array2::ones((1, 5));
        let out = sinkhorn_assign(p.view(), &SinkhornConfig::default()).unwrap();
        for &v in out.assignment.view() {
            assert_abs_diff_eq!(v, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_posterior_gives_uniform_plan() {
        let p = Array2::from_elem((3, 4), 1.0 / 3.0);
        let out = sinkhorn_assign(p.view(), &SinkhornConfig::default()).unwrap();
        for &v in out.assignment.view() {
            assert_abs_diff_eq!(v, 1.0 / 12.0, epsilon = 1e-12);
        }
        assert!(out.report.converged);
        assert_eq!(out.report.iterations, 1);
    }

    #[test]
    fn two_by_two_recovers_diagonal_vertex() {
        let p = array![[0.9, 0.1], [0.1, 0.9]];
        let out = sinkhorn_assign(p.view(), &SinkhornConfig::default()).unwrap();
        let q = out.assignment.view();
        assert_abs_diff_eq!(q[[0, 0]], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(q[[1, 1]], 0.5, epsilon = 1e-9);
        assert!(q[[0, 1]] < 1e-9 && q[[1, 0]] < 1e-9);
        let ls = LabelSpace::new(3, 2).unwrap();
        let labels = harden(&out.assignment, &ls, &[7, 9]).unwrap();
        assert_eq!(labels.iter().collect::<Vec<_>>(), vec![(7, 3), (9, 4)]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = SinkhornConfig::default();
        assert!(sinkhorn_assign(Array2::<f64>::zeros((0, 3)).view(), &cfg).is_err());
        assert!(sinkhorn_assign(array![[0.5], [0.4]].view(), &cfg).is_err());
        let bad = SinkhornConfig { reg: 0.0, ..cfg };
        assert!(sinkhorn_assign(array![[1.0]].view(), &bad).is_err());
        let huge = SinkhornConfig { reg: 1e308, ..cfg };
        assert!(matches!(
            sinkhorn_assign(array![[1.0, 0.0], [0.0, 1.0]].view(), &huge),
            Err(Error::NonFiniteKernel { .. })
        ));
    }

    #[test]
    fn hardening_uniform_plan_picks_first_extra_class() {
        let q = AssignmentMatrix::new(Array2::from_elem((2, 3), 1.0 / 6.0)).unwrap();
        let ls = LabelSpace::new(4, 2).unwrap();
        let labels = harden(&q, &ls, &[0, 1, 2]).unwrap();
        assert!(labels.iter().all(|(_, c)| c == 4));
    }

    #[test]
    fn hardening_matches_column_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_posterior(&mut rng, 4, 30);
        let out = sinkhorn_assign(p.view(), &SinkhornConfig { reg: 3.0, ..Default::default() }).unwrap();
        let ls = LabelSpace::new(2, 4).unwrap();
        let subset: Vec<usize> = (100..130).collect();
        let labels = harden(&out.assignment, &ls, &subset).unwrap();
        let q = out.assignment.view();
        for (j, &s) in subset.iter().enumerate() {
            let mut best = 0;
            for i in 1..4 {
                if q[[i, j]] > q[[best, j]] {
                    best = i;
                }
            }
            assert_eq!(labels.get(s), Some(2 + best));
        }
    }

    #[test]
    fn sec_selects_only_low_confidence_rows() {
        let ls = LabelSpace::new(2, 2).unwrap();
        let p = PredictionMatrix::from_rows(&[
            vec![0.9, 0.05, 0.03, 0.02],
            vec![0.1, 0.1, 0.7, 0.1],
            vec![0.2, 0.15, 0.05, 0.6],
            vec![0.6, 0.3, 0.05, 0.05],
            vec![0.25, 0.3, 0.25, 0.2],
        ])
        .unwrap();
        let conf = id_confidence(&p, &ls).unwrap();
        let cfg = SinkhornConfig::default();
        let out = sec(&p, &ls, &conf, 0.3, &cfg).unwrap();
        let members: Vec<usize> = out.labels.iter().map(|(s, _)| s).collect();
        assert_eq!(members, vec![1, 2]);
        assert!(out.labels.iter().all(|(_, c)| c >= 2));

        assert!(sec(&p, &ls, &conf, 0.0, &cfg).unwrap().labels.is_empty());

        let single = LabelSpace::new(2, 1).unwrap();
        let p1 = PredictionMatrix::from_rows(&[vec![0.5, 0.4, 0.1], vec![0.1, 0.1, 0.8]]).unwrap();
        let conf1 = id_confidence(&p1, &single).unwrap();
        let all = sec(&p1, &single, &conf1, 1.0 + 1e-9, &cfg).unwrap();
        assert_eq!(all.labels.iter().collect::<Vec<_>>(), vec![(0, 2), (1, 2)]);
    }

    proptest! {
        #[test]
        fn plans_are_feasible(seed in 0u64..1000, k in 1usize..6, extra in 0usize..40, reg in 0.5f64..40.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = k + extra;
            let p = random_posterior(&mut rng, k, m);
            let cfg = SinkhornConfig { reg, ..Default::default() };
            let out = sinkhorn_assign(p.view(), &cfg).unwrap();
            prop_assert!(marginal_violation(out.assignment.view()) < 1e-9);
            prop_assert!(out.assignment.view().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn permuting_samples_permutes_columns(seed in 0u64..1000, k in 1usize..5, m in 5usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_posterior(&mut rng, k, m);
            let mut order: Vec<usize> = (0..m).collect();
            order.rotate_left(seed as usize % m);
            order.swap(0, m - 1);
            let permuted = p.select(Axis(1), &order);
            let cfg = SinkhornConfig { reg: 5.0, ..Default::default() };
            let a = sinkhorn_assign(p.view(), &cfg).unwrap();
            let b = sinkhorn_assign(permuted.view(), &cfg).unwrap();
            let expected = a.assignment.view().select(Axis(1), &order);
            for (x, y) in expected.iter().zip(b.assignment.view().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
