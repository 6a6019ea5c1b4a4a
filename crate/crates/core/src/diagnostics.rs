//! Imbalance and contamination metrics for pseudo-label sets.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, BenchmarkSpec};
use crate::error::{Error, Result};
use crate::label_space::{LabelSpace, PseudoLabelSet};
use crate::pseudo_label::vanilla_pl;
use crate::trainer::{forward, train_baseline, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    counts: Vec<usize>,
}

impl LabelHistogram {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    /// Histogram of the ID-class labels in `set`; extra-class labels are ignored.
    pub fn from_labels(set: &PseudoLabelSet, ls: &LabelSpace) -> Self {
        Self::new(set.class_counts(ls.k_id()))
    }

    /// Histogram of ID-class labels carried by the samples selected by `filter`.
    pub fn from_labels_where(set: &PseudoLabelSet, ls: &LabelSpace, filter: impl Fn(usize) -> bool) -> Self {
        let mut counts = vec![0; ls.k_id()];
        for (sample, class) in set.iter() {
            if class < ls.k_id() && filter(sample) {
                counts[class] += 1;
            }
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// KL divergence of the normalized histogram from uniform, in nats.
pub fn kl_to_uniform(h: &LabelHistogram) -> Result<f64> {
    let total = h.total();
    if total == 0 || h.counts.is_empty() {
        return Err(Error::EmptyHistogram);
    }
    let k = h.counts.len() as f64;
    Ok(h
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            q * (q * k).ln()
        })
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ratio {
    Finite(f64),
    /// Some class received no labels.
    Infinite,
}

impl Ratio {
    pub fn as_f64(self) -> f64 {
        match self {
            Self::Finite(v) => v,
            Self::Infinite => f64::INFINITY,
        }
    }
}

pub fn majority_minority_ratio(h: &LabelHistogram) -> Result<Ratio> {
    if h.total() == 0 {
        return Err(Error::EmptyHistogram);
    }
    let max = *h.counts.iter().max().expect("nonempty");
    let min = *h.counts.iter().min().expect("nonempty");
    Ok(if min == 0 {
        Ratio::Infinite
    } else {
        Ratio::Finite(max as f64 / min as f64)
    })
}

/// Rows are true classes (ID then OOD), columns are predicted ID classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    rows: usize,
    cols: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth * self.cols + predicted]
    }

    pub fn row(&self, truth: usize) -> &[usize] {
        &self.counts[truth * self.cols..(truth + 1) * self.cols]
    }

    pub fn row_totals(&self) -> Vec<usize> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }
}

/// Tallies (true class, predicted ID class) pairs; `true_classes` counts ID and OOD classes.
pub fn confusion(
    true_labels: &[usize],
    predicted: &[usize],
    ls: &LabelSpace,
    true_classes: usize,
) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            what: "true vs predicted labels",
            expected: true_labels.len(),
            actual: predicted.len(),
        });
    }
    let rows = true_classes.max(ls.k_id());
    let cols = ls.k_id();
    let mut counts = vec![0; rows * cols];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= rows {
            return Err(Error::ClassOutOfRange { class: t, total: rows });
        }
        if p >= cols {
            return Err(Error::ClassOutOfRange { class: p, total: cols });
        }
        counts[t * cols + p] += 1;
    }
    Ok(ConfusionMatrix { rows, cols, counts })
}

/// Share of OOD samples that carry an ID-class pseudo-label; 0 for a pool without OOD samples.
pub fn ood_as_id_proportion(set: &PseudoLabelSet, ood_mask: &[bool], ls: &LabelSpace) -> f64 {
    let n_ood = ood_mask.iter().filter(|&&o| o).count();
    if n_ood == 0 {
        return 0.0;
    }
    let hits = set
        .iter()
        .filter(|&(s, c)| ood_mask.get(s).copied().unwrap_or(false) && ls.is_id(c))
        .count();
    hits as f64 / n_ood as f64
}

/// Pseudo-label imbalance of one labeled-only model on the ID and OOD parts of its pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceTrial {
    pub trial: usize,
    /// `None` when that part of the pool received no pseudo-labels.
    pub kl_id: Option<f64>,
    pub kl_ood: Option<f64>,
    pub r_id: Option<Ratio>,
    pub r_ood: Option<Ratio>,
}

/// Trains a labeled-only model on a fresh benchmark drawn with `seed`,
/// pseudo-labels its unlabeled pool with thresholded labels at `cfg.tau`, and
/// measures the imbalance of the labels on ID and OOD samples separately.
pub fn imbalance_trial(spec: &BenchmarkSpec, cfg: &TrainConfig, trial: usize, seed: u64) -> Result<ImbalanceTrial> {
    let ds = generate(&BenchmarkSpec { seed, ..spec.clone() })?;
    let cfg = TrainConfig { seed, k_extra: 0, ..cfg.clone() };
    let ls = LabelSpace::new(ds.k_id, 0)?;
    let model = train_baseline(&ds, &cfg)?;
    let p = forward(&model.params, ds.unlabeled.view())?;
    let labels = vanilla_pl(&p, &ls, cfg.tau)?;
    let id = LabelHistogram::from_labels_where(&labels, &ls, |i| !ds.ood_mask[i]);
    let ood = LabelHistogram::from_labels_where(&labels, &ls, |i| ds.ood_mask[i]);
    Ok(ImbalanceTrial {
        trial,
        kl_id: kl_to_uniform(&id).ok(),
        kl_ood: kl_to_uniform(&ood).ok(),
        r_id: majority_minority_ratio(&id).ok(),
        r_ood: majority_minority_ratio(&ood).ok(),
    })
}

/// Runs [`imbalance_trial`] for trials `0..trials` with seeds `seed + trial`.
pub fn imbalance_study(
    spec: &BenchmarkSpec,
    cfg: &TrainConfig,
    trials: usize,
    seed: u64,
) -> Result<Vec<ImbalanceTrial>> {
    if trials == 0 {
        return Err(Error::InvalidConfig("imbalance study needs at least one trial".into()));
    }
    (0..trials)
        .into_par_iter()
        .map(|trial| imbalance_trial(spec, cfg, trial, seed + trial as u64))
        .collect()
}

/// Writes `trial,kl_id,kl_ood,r_id,r_ood`; absent values are left empty.
pub fn write_imbalance_csv(trials: &[ImbalanceTrial], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    writeln!(out, "trial,kl_id,kl_ood,r_id,r_ood")?;
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{}",
            t.trial,
            opt(t.kl_id),
            opt(t.kl_ood),
            opt(t.r_id.map(Ratio::as_f64)),
            opt(t.r_ood.map(Ratio::as_f64))
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Median of the present values; `None` when all are absent.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
