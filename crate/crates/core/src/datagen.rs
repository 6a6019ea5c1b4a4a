//! Synthetic class-mismatched benchmarks and CSV ingestion.
//!
//! Every class, ID or OOD, is an isotropic Gaussian blob. Class means are
//! random unit directions inside a shared random `latent_dim`-dimensional
//! subspace, scaled by `class_separation`. ID and OOD means are drawn the
//! same way; a nonzero `ood_shift` then moves every OOD mean along one shared
//! latent direction.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub k_id: usize,
    pub k_ood: usize,
    /// Ambient feature dimension.
    pub d: usize,
    /// Dimension of the subspace holding the class means; `None` uses `d`.
    pub latent_dim: Option<usize>,
    pub n_labeled_per_class: usize,
    pub m_unlabeled: usize,
    pub n_test_per_class: usize,
    pub mismatch_ratio: f64,
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Largest over smallest OOD class size in the unlabeled pool.
    pub ood_imbalance_ratio: f64,
    /// Offset shared by all OOD means along one random latent direction, so
    /// OOD classes form a superclass apart from the ID classes. 0 keeps ID and
    /// OOD classes exchangeable.
    pub ood_shift: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            k_id: 6,
            k_ood: 4,
            d: 32,
            latent_dim: Some(8),
            n_labeled_per_class: 10,
            m_unlabeled: 2000,
            n_test_per_class: 200,
            mismatch_ratio: 1.0,
            class_separation: 3.0,
            noise_sigma: 1.0,
            ood_imbalance_ratio: 1.0,
            ood_shift: 0.0,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.k_id < 2 {
            return fail(format!("benchmark k_id must be >= 2, got {}", self.k_id));
        }
        if self.d == 0 {
            return fail("benchmark d must be >= 1".into());
        }
        if let Some(l) = self.latent_dim {
            if l == 0 || l > self.d {
                return fail(format!("benchmark latent_dim must lie in 1..={}, got {l}", self.d));
            }
        }
        if self.n_labeled_per_class == 0 {
            return fail("benchmark n_labeled_per_class must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mismatch_ratio) {
            return fail(format!("benchmark mismatch_ratio must lie in [0, 1], got {}", self.mismatch_ratio));
        }
        if self.mismatch_ratio > 0.0 && self.k_ood == 0 && self.ood_count() > 0 {
            return fail("benchmark mismatch_ratio > 0 needs k_ood >= 1".into());
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return fail(format!("benchmark class_separation must be finite and >= 0, got {}", self.class_separation));
        }
        if !self.ood_shift.is_finite() {
            return fail(format!("benchmark ood_shift must be finite, got {}", self.ood_shift));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("benchmark noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if !(self.ood_imbalance_ratio >= 1.0 && self.ood_imbalance_ratio.is_finite()) {
            return fail(format!(
                "benchmark ood_imbalance_ratio must be >= 1, got {}",
                self.ood_imbalance_ratio
            ));
        }
        Ok(())
    }

    /// OOD samples in the unlabeled pool.
    pub fn ood_count(&self) -> usize {
        (self.mismatch_ratio * self.m_unlabeled as f64).round() as usize
    }
}

/// A labeled ID set, an unlabeled pool with hidden truth, and two test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchedDataset {
    pub k_id: usize,
    pub k_ood: usize,
    pub labeled: Array2<f64>,
    pub labeled_labels: Vec<usize>,
    pub unlabeled: Array2<f64>,
    /// True class of each unlabeled sample; OOD classes are numbered from `k_id`.
    pub unlabeled_truth: Vec<Option<usize>>,
    pub ood_mask: Vec<bool>,
    pub test_id: Array2<f64>,
    pub test_id_labels: Vec<usize>,
    /// ID and OOD test samples together.
    pub test_full: Array2<f64>,
    pub test_full_labels: Vec<usize>,
}

impl MismatchedDataset {
    pub fn dim(&self) -> usize {
        self.labeled.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let check = |what: &'static str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { what, expected, actual })
            }
        };
        check("labeled labels", self.labeled.nrows(), self.labeled_labels.len())?;
        check("unlabeled truth", self.unlabeled.nrows(), self.unlabeled_truth.len())?;
        check("OOD mask", self.unlabeled.nrows(), self.ood_mask.len())?;
        check("ID test labels", self.test_id.nrows(), self.test_id_labels.len())?;
        check("full test labels", self.test_full.nrows(), self.test_full_labels.len())?;
        for (what, m) in [
            ("unlabeled feature dim", &self.unlabeled),
            ("ID test feature dim", &self.test_id),
            ("full test feature dim", &self.test_full),
        ] {
            if m.nrows() > 0 {
                check(what, d, m.ncols())?;
            }
        }
        if self.labeled.nrows() == 0 {
            return Err(Error::EmptyLabeledBatch);
        }
        let total = self.k_id + self.k_ood;
        for &y in self.labeled_labels.iter().chain(&self.test_id_labels) {
            if y >= self.k_id {
                return Err(Error::ClassOutOfRange { class: y, total: self.k_id });
            }
        }
        for &y in self.test_full_labels.iter().chain(self.unlabeled_truth.iter().flatten()) {
            if y >= total {
                return Err(Error::ClassOutOfRange { class: y, total });
            }
        }
        Ok(())
    }

    /// Fraction of the unlabeled pool flagged OOD.
    pub fn mismatch_ratio(&self) -> f64 {
        if self.ood_mask.is_empty() {
            return 0.0;
        }
        self.ood_mask.iter().filter(|&&o| o).count() as f64 / self.ood_mask.len() as f64
    }
}

/// Splits `total` into parts proportional to `weights` with largest-remainder rounding.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - parts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

/// Per-class unlabeled pool sizes: ID classes balanced, OOD classes decaying geometrically.
pub fn pool_sizes(spec: &BenchmarkSpec) -> (Vec<usize>, Vec<usize>) {
    let n_ood = spec.ood_count();
    let n_id = spec.m_unlabeled - n_ood;
    let id = apportion(n_id, &vec![1.0; spec.k_id]);
    let ood_weights: Vec<f64> = (0..spec.k_ood)
        .map(|i| {
            if spec.k_ood == 1 {
                1.0
            } else {
                spec.ood_imbalance_ratio.powf(-(i as f64) / (spec.k_ood - 1) as f64)
            }
        })
        .collect();
    (id, apportion(n_ood, &ood_weights))
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED2D)
}

/// Orthonormal basis of a random `l`-dimensional subspace of R^d, as rows.
fn random_subspace(rng: &mut ChaCha8Rng, d: usize, l: usize) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((l, d));
    let mut row = 0;
    while row < l {
        let mut v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for prev in basis.rows().into_iter().take(row) {
            let proj = v.dot(&prev);
            v.scaled_add(-proj, &prev);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.row_mut(row).assign(&(v / norm));
            row += 1;
        }
    }
    basis
}

/// Class means, one row per class (ID first, then OOD).
pub fn class_means(spec: &BenchmarkSpec) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u64::MAX));
    let l = spec.latent_dim.unwrap_or(spec.d);
    let basis = random_subspace(&mut rng, spec.d, l);
    let classes = spec.k_id + spec.k_ood;
    let mut unit = || {
        let z: Array1<f64> = (0..l).map(|_| StandardNormal.sample(&mut rng)).collect();
        &z / z.dot(&z).sqrt()
    };
    let mut means = Array2::zeros((classes, spec.d));
    for c in 0..classes {
        means.row_mut(c).assign(&(unit().dot(&basis) * spec.class_separation));
    }
    let shift = unit().dot(&basis) * spec.ood_shift;
    for mut row in means.rows_mut().into_iter().skip(spec.k_id) {
        row += &shift;
    }
    means
}

fn draw(rng: &mut ChaCha8Rng, mean: &Array1<f64>, sigma: f64, n: usize) -> Array2<f64> {
    let d = mean.len();
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        for (x, &m) in row.iter_mut().zip(mean) {
            let z: f64 = StandardNormal.sample(rng);
            *x = m + sigma * z;
        }
    }
    out
}

struct ClassDraw {
    labeled: Array2<f64>,
    unlabeled: Array2<f64>,
    test: Array2<f64>,
}

fn stack(blocks: &[&Array2<f64>], d: usize) -> Array2<f64> {
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    if views.is_empty() {
        return Array2::zeros((0, d));
    }
    ndarray::concatenate(Axis(0), &views).expect("blocks share a width")
}

/// Generates the benchmark; a pure function of `spec`.
pub fn generate(spec: &BenchmarkSpec) -> Result<MismatchedDataset> {
    spec.validate()?;
    let means = class_means(spec);
    let (id_sizes, ood_sizes) = pool_sizes(spec);
    let classes = spec.k_id + spec.k_ood;

    let draws: Vec<ClassDraw> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, c as u64));
            let mean = means.row(c).to_owned();
            let is_id = c < spec.k_id;
            let n_lab = if is_id { spec.n_labeled_per_class } else { 0 };
            let n_unl = if is_id { id_sizes[c] } else { ood_sizes[c - spec.k_id] };
            ClassDraw {
                labeled: draw(&mut rng, &mean, spec.noise_sigma, n_lab),
                unlabeled: draw(&mut rng, &mean, spec.noise_sigma, n_unl),
                test: draw(&mut rng, &mean, spec.noise_sigma, spec.n_test_per_class),
            }
        })
        .collect();

    let d = spec.d;
    let labeled = stack(&draws[..spec.k_id].iter().map(|c| &c.labeled).collect::<Vec<_>>(), d);
    let labeled_labels = (0..spec.k_id)
        .flat_map(|c| std::iter::repeat_n(c, spec.n_labeled_per_class))
        .collect();

    let pool = stack(&draws.iter().map(|c| &c.unlabeled).collect::<Vec<_>>(), d);
    let pool_truth: Vec<usize> = draws
        .iter()
        .enumerate()
        .flat_map(|(c, cd)| std::iter::repeat_n(c, cd.unlabeled.nrows()))
        .collect();
    let mut order: Vec<usize> = (0..pool.nrows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u64::MAX - 1)));
    let unlabeled = pool.select(Axis(0), &order);
    let unlabeled_truth: Vec<Option<usize>> = order.iter().map(|&i| Some(pool_truth[i])).collect();
    let ood_mask = unlabeled_truth.iter().map(|t| t.unwrap() >= spec.k_id).collect();

    let test_id = stack(&draws[..spec.k_id].iter().map(|c| &c.test).collect::<Vec<_>>(), d);
    let test_id_labels: Vec<usize> = (0..spec.k_id)
        .flat_map(|c| std::iter::repeat_n(c, spec.n_test_per_class))
        .collect();
    let test_full = stack(&draws.iter().map(|c| &c.test).collect::<Vec<_>>(), d);
    let test_full_labels = (0..classes)
        .flat_map(|c| std::iter::repeat_n(c, spec.n_test_per_class))
        .collect();

    Ok(MismatchedDataset {
        k_id: spec.k_id,
        k_ood: spec.k_ood,
        labeled,
        labeled_labels,
        unlabeled,
        unlabeled_truth,
        ood_mask,
        test_id,
        test_id_labels,
        test_full,
        test_full_labels,
    })
}

/// Column names for [`ingest_csv`]; every other column is a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub label_column: String,
    pub split_column: String,
    /// Optional 0/1 (or true/false) column flagging OOD rows.
    pub ood_column: Option<String>,
    /// ID class count; inferred from the labeled rows when absent.
    pub k_id: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            split_column: "split".into(),
            ood_column: Some("ood".into()),
            k_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Labeled,
    Unlabeled,
    Test,
}

struct Row {
    split: Split,
    label: Option<usize>,
    ood: Option<bool>,
    features: Vec<f64>,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

/// Reads a dataset from CSV. `split` is one of `labeled`, `unlabeled`, `test`;
/// `label` may be empty on unlabeled rows; the OOD column is optional and
/// defaults to `label >= k_id`.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<MismatchedDataset> {
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_idx = find(&schema.label_column).ok_or_else(|| Error::MissingColumn(schema.label_column.clone()))?;
    let split_idx = find(&schema.split_column).ok_or_else(|| Error::MissingColumn(schema.split_column.clone()))?;
    let ood_idx = schema.ood_column.as_deref().and_then(find);
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_idx && i != split_idx && Some(i) != ood_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::MissingColumn("<feature>".into()));
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let split = match record[split_idx].to_ascii_lowercase().as_str() {
            "labeled" => Split::Labeled,
            "unlabeled" => Split::Unlabeled,
            "test" => Split::Test,
            other => return Err(csv_err(line, format!("unknown split `{other}`"))),
        };
        let label = match &record[label_idx] {
            "" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|_| csv_err(line, format!("label `{s}` is not a class index")))?,
            ),
        };
        if label.is_none() && split != Split::Unlabeled {
            return Err(csv_err(line, "labeled and test rows need a label".into()));
        }
        let ood = match ood_idx.map(|i| &record[i]) {
            None | Some("") => None,
            Some(s) => Some(parse_bool(s).ok_or_else(|| csv_err(line, format!("OOD flag `{s}` is not boolean")))?),
        };
        let features = feature_idx
            .iter()
            .map(|&i| {
                let s = &record[i];
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| csv_err(line, format!("feature `{}` has non-numeric value `{s}`", &headers[i])))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((line, Row { split, label, ood, features }));
    }

    let k_id = match schema.k_id {
        Some(k) => k,
        None => rows
            .iter()
            .filter(|(_, r)| r.split == Split::Labeled)
            .filter_map(|(_, r)| r.label)
            .max()
            .map_or(0, |m| m + 1),
    };
    if k_id < 2 {
        return Err(Error::InvalidLabelSpace(format!("need at least 2 ID classes, found {k_id}")));
    }

    let d = feature_idx.len();
    let mut labeled = Vec::new();
    let mut labeled_labels = Vec::new();
    let mut unlabeled = Vec::new();
    let mut unlabeled_truth = Vec::new();
    let mut ood_mask = Vec::new();
    let mut test_id = Vec::new();
    let mut test_id_labels = Vec::new();
    let mut test_full = Vec::new();
    let mut test_full_labels = Vec::new();
    let mut max_class = k_id - 1;

    for (line, row) in rows {
        let is_ood = row.ood.unwrap_or_else(|| row.label.is_some_and(|y| y >= k_id));
        if let Some(y) = row.label {
            max_class = max_class.max(y);
            if !is_ood && y >= k_id {
                return Err(csv_err(line, format!("ID row has label {y} >= k_id {k_id}")));
            }
            if is_ood && y < k_id {
                return Err(csv_err(line, format!("OOD row has ID label {y}")));
            }
        }
        match row.split {
            Split::Labeled => {
                if is_ood {
                    return Err(csv_err(line, "labeled rows must be ID".into()));
                }
                labeled.extend(row.features);
                labeled_labels.push(row.label.expect("checked above"));
            }
            Split::Unlabeled => {
                unlabeled.extend(row.features);
                unlabeled_truth.push(row.label);
                ood_mask.push(is_ood);
            }
            Split::Test => {
                let y = row.label.expect("checked above");
                if !is_ood {
                    test_id.extend(row.features.iter().copied());
                    test_id_labels.push(y);
                }
                test_full.extend(row.features);
                test_full_labels.push(y);
            }
        }
    }

    let to_matrix = |flat: Vec<f64>| {
        let n = flat.len() / d;
        Array2::from_shape_vec((n, d), flat).expect("row-major features")
    };
    let k_ood = max_class + 1 - k_id;
    let ds = MismatchedDataset {
        k_id,
        k_ood,
        labeled: to_matrix(labeled),
        labeled_labels,
        unlabeled: to_matrix(unlabeled),
        unlabeled_truth,
        ood_mask,
        test_id: to_matrix(test_id),
        test_id_labels,
        test_full: to_matrix(test_full),
        test_full_labels,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset in the format read by [`ingest_csv`] with the default schema.
pub fn write_csv(ds: &MismatchedDataset, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let d = ds.dim();
    let mut header = vec!["label".to_string(), "split".into(), "ood".into()];
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(io)?;
    let mut emit = |label: Option<usize>, split: &str, ood: bool, x: ndarray::ArrayView1<f64>| {
        let mut rec = vec![
            label.map(|y| y.to_string()).unwrap_or_default(),
            split.to_string(),
            u8::from(ood).to_string(),
        ];
        rec.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&rec)
    };
    for (x, &y) in ds.labeled.rows().into_iter().zip(&ds.labeled_labels) {
        emit(Some(y), "labeled", false, x).map_err(io)?;
    }
    for ((x, &y), &o) in ds.unlabeled.rows().into_iter().zip(&ds.unlabeled_truth).zip(&ds.ood_mask) {
        emit(y, "unlabeled", o, x).map_err(io)?;
    }
    for (x, &y) in ds.test_full.rows().into_iter().zip(&ds.test_full_labels) {
        emit(Some(y), "test", y >= ds.k_id, x).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Counts of each value, used by tests and summaries.
pub fn tally(labels: impl IntoIterator<Item = usize>) -> HashMap<usize, usize> {
    let mut out = HashMap::new();
    for y in labels {
        *out.entry(y).or_insert(0) += 1;
    }
    out
}
