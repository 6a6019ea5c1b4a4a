//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use upsilon::experiment::ExperimentConfig;
use upsilon::trainer::{loss_and_grad, ClassifierParams};

/// `K x M` matrix whose columns are Dirichlet(alpha) draws.
pub fn random_posterior(rng: &mut impl Rng, k: usize, m: usize, alpha: f64) -> Array2<f64> {
    let g = Gamma::new(alpha, 1.0).unwrap();
    let mut p = Array2::from_shape_fn((k, m), |_| g.sample(rng).max(1e-300));
    for mut col in p.columns_mut() {
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    p
}

/// `n x k` row-stochastic matrix with Dirichlet(alpha) rows.
pub fn random_rows(rng: &mut impl Rng, n: usize, k: usize, alpha: f64) -> Vec<Vec<f64>> {
    let p = random_posterior(rng, k, n, alpha);
    p.columns().into_iter().map(|c| c.to_vec()).collect()
}

/// Solves `a x = b` by Gauss-Jordan elimination. Returns `None` unless the
/// columns of `a` are independent and the system is consistent.
fn solve_full_column_rank(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut pivot_row = 0;
    let mut pivots = Vec::new();
    for c in 0..cols {
        let best = (pivot_row..rows).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[best][c].abs() < 1e-12 {
            return None;
        }
        a.swap(pivot_row, best);
        b.swap(pivot_row, best);
        let div = a[pivot_row][c];
        for v in a[pivot_row].iter_mut() {
            *v /= div;
        }
        b[pivot_row] /= div;
        for i in 0..rows {
            if i != pivot_row && a[i][c] != 0.0 {
                let f = a[i][c];
                let pivot = a[pivot_row].clone();
                for (v, p) in a[i].iter_mut().zip(&pivot) {
                    *v -= f * p;
                }
                b[i] -= f * b[pivot_row];
            }
        }
        pivots.push(pivot_row);
        pivot_row += 1;
    }
    if b[pivot_row..].iter().any(|v| v.abs() > 1e-9) {
        return None;
    }
    Some(pivots.iter().map(|&r| b[r]).collect())
}

fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, r, &mut Vec::new(), &mut out);
    out
}

/// Exact minimum of `sum -q ln p` over plans with row sums `1/K` and column
/// sums `1/M`, by enumerating the basic feasible solutions of the polytope.
/// Meant for `K * M <= 12` or so.
pub fn lp_optimum(p: ArrayView2<'_, f64>) -> f64 {
    let (k, m) = p.dim();
    let n = k * m;
    let rank = k + m - 1;
    let mut best = f64::INFINITY;
    for support in combinations(n, rank) {
        // Drop the last column-sum equation: it is implied by the others.
        let mut a = vec![vec![0.0; rank]; rank];
        let mut b = vec![0.0; rank];
        for (c, &cell) in support.iter().enumerate() {
            let (i, j) = (cell / m, cell % m);
            a[i][c] = 1.0;
            if j + 1 < m {
                a[k + j][c] = 1.0;
            }
        }
        for (i, v) in b.iter_mut().enumerate() {
            *v = if i < k { 1.0 / k as f64 } else { 1.0 / m as f64 };
        }
        let Some(x) = solve_full_column_rank(a, b) else { continue };
        if x.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let cost: f64 = support
            .iter()
            .zip(&x)
            .map(|(&cell, &q)| q.max(0.0) * -p[[cell / m, cell % m]].ln())
            .sum();
        best = best.min(cost);
    }
    best
}

/// Central finite-difference gradient of the mean cross-entropy.
pub fn numeric_gradient(params: &ClassifierParams, x: ArrayView2<'_, f64>, labels: &[usize], h: f64) -> Vec<Vec<f64>> {
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let loss = |p: &ClassifierParams| loss_and_grad(p, x, labels, 1.0).unwrap().0;
    let mut out = Vec::new();
    for (t, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t][i] -= h;
            *gi = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[&[f64]], numeric: &[Vec<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.iter().zip(n))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Per-class quota as the smallest number of rows scoring above `tau` in each ID class.
pub fn quota_oracle(rows: &[Vec<f64>], k_id: usize, tau: f64) -> usize {
    (0..k_id)
        .map(|y| rows.iter().filter(|r| r[y] > tau).count())
        .min()
        .unwrap_or(0)
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn load_config(name: &str) -> ExperimentConfig {
    let path = repo_root().join("configs").join(format!("{name}.toml"));
    ExperimentConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// A tiny, fast experiment config of the given kind.
pub fn tiny_config(kind: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
[experiment]
kind = "{kind}"
n_seeds = 2
{extra}

[benchmark]
k_id = 3
k_ood = 2
d = 6
latent_dim = 3
n_labeled_per_class = 3
m_unlabeled = 60
n_test_per_class = 10
mismatch_ratio = 0.5

[train]
epochs = 6
pretrain_epochs = 2
batch_size = 16
hidden = 4
ema_decay = 0.5
tau = 0.6
gamma = 0.5
k_extra = 2
"#
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}
