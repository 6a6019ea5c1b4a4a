//! Seeded experiment grids over the synthetic benchmark.
//!
//! A run expands an [`ExperimentConfig`] into independent jobs (one per seed
//! and setting), executes them on a worker pool, and writes `results.csv`,
//! `plots/*.svg` and `manifest.json` into the output directory.

pub mod plot;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::confidence::ConfidenceMeasure;
use crate::datagen::{generate, BenchmarkSpec, MismatchedDataset};
use crate::diagnostics::{imbalance_trial, write_imbalance_csv, ImbalanceTrial, Ratio};
use crate::error::{Error, Result};
use crate::label_space::LabelSpace;
use crate::sec::SinkhornConfig;
use crate::strategies::{sample_reassignments, StrategyKind};
use crate::trainer::{build_pseudo_labels, forward, train_variant, TrainConfig, TrainLog, Variant};

/// Seeds of one experiment are `base_seed * SEED_STRIDE + seed_index`.
pub const SEED_STRIDE: u64 = 1000;

pub fn cell_seed(base_seed: u64, seed_index: usize) -> u64 {
    base_seed * SEED_STRIDE + seed_index as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Fixed OOD labeling strategies at one mismatch ratio.
    Strategies,
    /// Pseudo-label imbalance of a labeled-only model, ID vs OOD samples.
    Imbalance,
    /// Variants across mismatch ratios.
    Sweep,
    /// Variants at one mismatch ratio.
    Ablation,
    /// The full method across numbers of extra classes.
    Ksweep,
    /// Round cost and marginal error across Sinkhorn iteration counts.
    SinkhornBench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Baseline,
    ReAssigned,
    OpenSet,
    Oracle,
    VanillaPl,
    RplOnly,
    SecOnly,
    OpenSetK1,
    Upsilon,
}

impl VariantName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::ReAssigned => "re_assigned",
            Self::OpenSet => "open_set",
            Self::Oracle => "oracle",
            Self::VanillaPl => "vanilla_pl",
            Self::RplOnly => "rpl_only",
            Self::SecOnly => "sec_only",
            Self::OpenSetK1 => "open_set_k1",
            Self::Upsilon => "upsilon",
        }
    }

    /// Extra classes used unless overridden: none for the labelers that only
    /// use ID classes, one for the unified-class labelers, `k_ood` for oracle
    /// labels and the configured width otherwise.
    fn default_k_extra(self, k_ood: usize, configured: usize) -> usize {
        match self {
            Self::Baseline | Self::ReAssigned | Self::VanillaPl | Self::RplOnly => 0,
            Self::OpenSet | Self::OpenSetK1 => 1,
            Self::Oracle => k_ood,
            Self::Upsilon | Self::SecOnly => configured,
        }
    }
}

/// A variant with per-variant overrides of the training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomVariant {
    /// Setting name in the results.
    pub name: String,
    pub variant: VariantName,
    #[serde(default)]
    pub k_extra: Option<usize>,
    #[serde(default)]
    pub confidence: Option<ConfidenceMeasure>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantEntry {
    Named(VariantName),
    Custom(CustomVariant),
}

impl VariantEntry {
    fn resolve(&self, spec: &BenchmarkSpec, train: &TrainConfig) -> Setting {
        match self {
            Self::Named(v) => Setting {
                name: v.as_str().to_string(),
                variant: *v,
                train: TrainConfig {
                    k_extra: v.default_k_extra(spec.k_ood, train.k_extra),
                    ..train.clone()
                },
            },
            Self::Custom(c) => {
                let mut t = train.clone();
                t.k_extra = c.k_extra.unwrap_or_else(|| c.variant.default_k_extra(spec.k_ood, train.k_extra));
                if let Some(m) = c.confidence {
                    t.confidence = m;
                }
                if let Some(g) = c.gamma {
                    t.gamma = g;
                }
                if let Some(tau) = c.tau {
                    t.tau = tau;
                }
                Setting {
                    name: c.name.clone(),
                    variant: c.variant,
                    train: t,
                }
            }
        }
    }
}

/// A resolved variant: its name, labeler and full training config.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub name: String,
    pub variant: VariantName,
    pub train: TrainConfig,
}

fn default_n_seeds() -> usize {
    5
}

fn default_ratios() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_sinkhorn_iters() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32]
}

fn default_reassign_maps() -> usize {
    3
}

fn default_repetitions() -> usize {
    5
}

fn default_final_fraction() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Empty selects the defaults of the kind.
    #[serde(default)]
    pub variants: Vec<VariantEntry>,
    /// Mismatch ratios of a sweep.
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// Extra-class counts of a K sweep; empty selects `0, 1, k_ood, 2 k_ood`.
    #[serde(default)]
    pub k_values: Vec<usize>,
    #[serde(default = "default_sinkhorn_iters")]
    pub sinkhorn_iters: Vec<usize>,
    /// Random re-assignment maps tried per seed; the best one is reported.
    #[serde(default = "default_reassign_maps")]
    pub reassign_maps: usize,
    /// Timing repetitions per Sinkhorn bench cell; the minimum is reported.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Reported accuracy is the mean over this trailing fraction of epochs.
    #[serde(default = "default_final_fraction")]
    pub final_fraction: f64,
    /// Output directory; the command line flag takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Also write each training run's per-epoch metrics under `logs/`.
    #[serde(default)]
    pub write_logs: bool,
}

/// Everything a run needs. `benchmark.seed` and `train.seed` are replaced per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Parses and validates a TOML config.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Checks the config, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        let e = &self.experiment;
        if e.n_seeds == 0 {
            return fail("experiment.n_seeds must be >= 1".into());
        }
        if !(e.final_fraction > 0.0 && e.final_fraction <= 1.0) {
            return fail(format!("experiment.final_fraction must lie in (0, 1], got {}", e.final_fraction));
        }
        if let Some(r) = e.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return fail(format!("experiment.ratios entries must lie in [0, 1], got {r}"));
        }
        if e.kind == ExperimentKind::Sweep && e.ratios.is_empty() {
            return fail("experiment.ratios must not be empty for a sweep".into());
        }
        if e.kind == ExperimentKind::SinkhornBench {
            if e.sinkhorn_iters.is_empty() || e.sinkhorn_iters.contains(&0) {
                return fail("experiment.sinkhorn_iters must be a non-empty list of positive counts".into());
            }
            if e.repetitions == 0 {
                return fail("experiment.repetitions must be >= 1".into());
            }
        }
        if e.kind == ExperimentKind::Strategies && e.reassign_maps == 0 {
            return fail("experiment.reassign_maps must be >= 1".into());
        }
        self.benchmark
            .validate()
            .map_err(|err| Error::InvalidConfig(format!("benchmark: {}", strip_prefix(&err))))?;
        for &r in &self.ratios() {
            BenchmarkSpec { mismatch_ratio: r, ..self.benchmark.clone() }
                .validate()
                .map_err(|err| Error::InvalidConfig(format!("benchmark at ratio {r}: {}", strip_prefix(&err))))?;
        }
        self.train
            .validate()
            .map_err(|err| Error::InvalidConfig(format!("train: {}", strip_prefix(&err))))?;

        let mut names = HashSet::new();
        for s in self.settings() {
            if !names.insert(s.name.clone()) {
                return fail(format!("experiment.variants: setting `{}` appears twice", s.name));
            }
            if let Err(err) = s.train.validate() {
                return fail(format!("variant `{}`: {}", s.name, strip_prefix(&err)));
            }
            match s.variant {
                VariantName::OpenSetK1 if s.train.k_extra != 1 => {
                    return fail(format!("variant `{}`: open_set_k1 needs k_extra = 1", s.name));
                }
                VariantName::SecOnly if s.train.k_extra == 0 => {
                    return fail(format!("variant `{}`: sec_only needs k_extra >= 1", s.name));
                }
                VariantName::ReAssigned if self.benchmark.k_ood > self.benchmark.k_id => {
                    return fail(format!(
                        "variant `{}`: {} OOD classes cannot be re-assigned injectively to {} ID classes",
                        s.name, self.benchmark.k_ood, self.benchmark.k_id
                    ));
                }
                VariantName::Oracle if s.train.k_extra < self.benchmark.k_ood => {
                    return fail(format!("variant `{}`: oracle labels need k_extra >= k_ood", s.name));
                }
                VariantName::OpenSet if s.train.k_extra == 0 => {
                    return fail(format!("variant `{}`: open_set needs k_extra >= 1", s.name));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Mismatch ratios this run visits.
    pub fn ratios(&self) -> Vec<f64> {
        match self.experiment.kind {
            ExperimentKind::Sweep => self.experiment.ratios.clone(),
            _ => vec![self.benchmark.mismatch_ratio],
        }
    }

    pub fn k_values(&self) -> Vec<usize> {
        if self.experiment.k_values.is_empty() {
            let k = self.benchmark.k_ood;
            vec![0, 1, k, 2 * k]
        } else {
            self.experiment.k_values.clone()
        }
    }

    /// Resolved settings, with the labeled-only baseline first where the kind compares against it.
    pub fn settings(&self) -> Vec<Setting> {
        use VariantName as V;
        let e = &self.experiment;
        let defaults: Vec<VariantName> = match e.kind {
            ExperimentKind::Strategies => vec![V::Baseline, V::ReAssigned, V::OpenSet, V::Oracle],
            ExperimentKind::Sweep => vec![V::VanillaPl, V::Upsilon],
            ExperimentKind::Ablation => vec![V::VanillaPl, V::RplOnly, V::SecOnly, V::OpenSetK1, V::Upsilon],
            ExperimentKind::Ksweep | ExperimentKind::Imbalance | ExperimentKind::SinkhornBench => Vec::new(),
        };
        let mut entries: Vec<VariantEntry> = if e.variants.is_empty() {
            defaults.into_iter().map(VariantEntry::Named).collect()
        } else {
            e.variants.clone()
        };
        let needs_baseline = matches!(e.kind, ExperimentKind::Sweep | ExperimentKind::Ablation);
        let has_baseline = entries.iter().any(|v| matches!(v, VariantEntry::Named(V::Baseline)));
        if needs_baseline && !has_baseline {
            entries.insert(0, VariantEntry::Named(V::Baseline));
        }
        entries.iter().map(|v| v.resolve(&self.benchmark, &self.train)).collect()
    }

    /// Metric columns of `results.csv` after `setting,x,seed,stat`.
    pub fn metric_columns(&self) -> &'static [&'static str] {
        match self.experiment.kind {
            ExperimentKind::Imbalance => &["kl", "ratio"],
            ExperimentKind::SinkhornBench => &["runtime_ms", "marginal_violation", "repair_l1"],
            _ => &["accuracy", "ood_as_id_prop", "n_pseudo", "kl_imbalance"],
        }
    }

    /// Expands the config into independent jobs, in output order.
    pub fn jobs(&self) -> Vec<Job> {
        let n = self.experiment.n_seeds;
        let mut jobs = Vec::new();
        match self.experiment.kind {
            ExperimentKind::Strategies | ExperimentKind::Ablation | ExperimentKind::Sweep => {
                for ratio in self.ratios() {
                    for setting in self.settings() {
                        for seed_index in 0..n {
                            jobs.push(Job::Train {
                                setting: setting.clone(),
                                ratio,
                                xs: vec![ratio],
                                seed_index,
                            });
                        }
                    }
                }
            }
            ExperimentKind::Ksweep => {
                let ks = self.k_values();
                let xs: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
                let ratio = self.benchmark.mismatch_ratio;
                let base = VariantEntry::Named(VariantName::Baseline).resolve(&self.benchmark, &self.train);
                for seed_index in 0..n {
                    jobs.push(Job::Train {
                        setting: base.clone(),
                        ratio,
                        xs: xs.clone(),
                        seed_index,
                    });
                }
                for &k in &ks {
                    let setting = Setting {
                        name: VariantName::Upsilon.as_str().into(),
                        variant: VariantName::Upsilon,
                        train: TrainConfig { k_extra: k, ..self.train.clone() },
                    };
                    for seed_index in 0..n {
                        jobs.push(Job::Train {
                            setting: setting.clone(),
                            ratio,
                            xs: vec![k as f64],
                            seed_index,
                        });
                    }
                }
            }
            ExperimentKind::Imbalance => jobs.extend((0..n).map(|seed_index| Job::Imbalance { seed_index })),
            ExperimentKind::SinkhornBench => jobs.extend((0..n).map(|seed_index| Job::SinkhornBench { seed_index })),
        }
        jobs
    }
}

fn strip_prefix(err: &Error) -> String {
    match err {
        Error::InvalidConfig(m) => m.clone(),
        other => other.to_string(),
    }
}

/// One independently runnable unit of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum Job {
    /// Trains `setting` on the benchmark at `ratio` and reports one row per entry of `xs`.
    Train {
        setting: Setting,
        ratio: f64,
        xs: Vec<f64>,
        seed_index: usize,
    },
    Imbalance {
        seed_index: usize,
    },
    SinkhornBench {
        seed_index: usize,
    },
}

impl Job {
    pub fn label(&self) -> String {
        match self {
            Self::Train {
                setting,
                ratio,
                seed_index,
                ..
            } => format!("{} ratio={ratio} k_extra={} seed_index={seed_index}", setting.name, setting.train.k_extra),
            Self::Imbalance { seed_index } => format!("imbalance seed_index={seed_index}"),
            Self::SinkhornBench { seed_index } => format!("sinkhorn_bench seed_index={seed_index}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    Seed,
    Mean,
    Std,
}

impl Stat {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Seed => "seed",
            Self::Mean => "mean",
            Self::Std => "std",
        }
    }
}

/// One line of `results.csv`. Absent values are written as empty fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub setting: String,
    pub x: f64,
    /// Cell seed for per-seed rows, `None` for summaries.
    pub seed: Option<u64>,
    pub stat: Stat,
    pub values: Vec<Option<f64>>,
}

impl ResultRow {
    pub fn record(&self) -> Vec<String> {
        let mut out = vec![
            self.setting.clone(),
            self.x.to_string(),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            self.stat.as_str().to_string(),
        ];
        out.extend(self.values.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
        out
    }
}

/// Metrics of one finished training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub ood_as_id_prop: Option<f64>,
    pub n_pseudo: Option<f64>,
    pub kl_imbalance: Option<f64>,
}

impl RunMetrics {
    pub fn from_log(log: &TrainLog, final_fraction: f64) -> Self {
        let last_round = log.rounds.last();
        Self {
            accuracy: log.final_accuracy(final_fraction),
            ood_as_id_prop: last_round.map(|r| r.ood_as_id_prop),
            n_pseudo: last_round.map(|r| (r.n_primary + r.n_sec) as f64),
            kl_imbalance: log.epochs.last().and_then(|e| e.kl_imbalance),
        }
    }

    fn values(&self) -> Vec<Option<f64>> {
        vec![Some(self.accuracy), self.ood_as_id_prop, self.n_pseudo, self.kl_imbalance]
    }
}

/// Trains one setting on one dataset. Re-assignment runs try several random
/// maps drawn from `seed` and keep the one with the best final accuracy.
pub fn train_setting(
    ds: &MismatchedDataset,
    setting: &Setting,
    seed: u64,
    reassign_maps: usize,
    final_fraction: f64,
) -> Result<(RunMetrics, TrainLog)> {
    let cfg = TrainConfig { seed, ..setting.train.clone() };
    let run = |variant: Variant| -> Result<(RunMetrics, TrainLog)> {
        let out = train_variant(ds, &cfg, &variant)?;
        Ok((RunMetrics::from_log(&out.log, final_fraction), out.log))
    };
    let strategy = |k| Variant::Strategy(k);
    match setting.variant {
        VariantName::Baseline => run(strategy(StrategyKind::Baseline)),
        VariantName::OpenSet => run(strategy(StrategyKind::OpenSet)),
        VariantName::Oracle => run(strategy(StrategyKind::Oracle)),
        VariantName::VanillaPl => run(Variant::VanillaPl),
        VariantName::RplOnly => run(Variant::RplOnly),
        VariantName::SecOnly => run(Variant::SecOnly),
        VariantName::OpenSetK1 => run(Variant::OpenSetK1),
        VariantName::Upsilon => run(Variant::Upsilon),
        VariantName::ReAssigned => {
            let mut best: Option<(RunMetrics, TrainLog)> = None;
            for map in sample_reassignments(ds.k_id, ds.k_ood, reassign_maps, seed)? {
                let candidate = run(strategy(StrategyKind::ReAssigned(map)))?;
                if best.as_ref().is_none_or(|b| candidate.0.accuracy > b.0.accuracy) {
                    best = Some(candidate);
                }
            }
            best.ok_or_else(|| Error::InvalidConfig("no re-assignment map to try".into()))
        }
    }
}

/// Cost and quality of one pseudo-labeling round at a given Sinkhorn iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundProfile {
    pub iterations: usize,
    /// Fastest of the repetitions, in milliseconds.
    pub runtime_ms: f64,
    /// l1 row-marginal error of the scaled kernel before the feasibility rounding.
    pub marginal_violation: Option<f64>,
    pub repair_l1: Option<f64>,
}

/// Times full rounds of the method (forward pass on the unlabeled pool plus
/// pseudo-labeling) for each iteration count. Early stopping is disabled so
/// every round runs exactly the requested number of iterations.
pub fn profile_rounds(
    ds: &MismatchedDataset,
    cfg: &TrainConfig,
    iteration_counts: &[usize],
    repetitions: usize,
) -> Result<Vec<RoundProfile>> {
    if cfg.k_extra == 0 {
        return Err(Error::NoExtraClasses);
    }
    let warm = TrainConfig {
        epochs: cfg.pretrain_epochs.max(1),
        pretrain_epochs: 0,
        ..cfg.clone()
    };
    let params = train_variant(ds, &warm, &Variant::baseline())?.params;
    let ls = LabelSpace::new(ds.k_id, cfg.k_extra)?;
    let mut out = Vec::with_capacity(iteration_counts.len());
    for &iterations in iteration_counts {
        let round_cfg = TrainConfig {
            sinkhorn: SinkhornConfig {
                max_iters: iterations,
                marginal_tol: f64::MIN_POSITIVE,
                ..cfg.sinkhorn
            },
            ..cfg.clone()
        };
        let mut best = f64::INFINITY;
        let mut report = None;
        for _ in 0..repetitions.max(1) {
            let start = Instant::now();
            let p = forward(&params, ds.unlabeled.view())?;
            let labels = build_pseudo_labels(&Variant::Upsilon, &p, &ls, &round_cfg, None)?;
            best = best.min(start.elapsed().as_secs_f64() * 1e3);
            report = labels.sinkhorn;
        }
        out.push(RoundProfile {
            iterations,
            runtime_ms: best,
            marginal_violation: report.map(|r| r.residual_l1),
            repair_l1: report.map(|r| r.repair_l1),
        });
    }
    Ok(out)
}

/// What a job produced: result rows, plus per-trial records for imbalance jobs.
#[derive(Debug, Clone, PartialEq)]
pub struct JobOutput {
    pub rows: Vec<ResultRow>,
    pub imbalance: Option<ImbalanceTrial>,
}

/// Runs one job. Training jobs also write their epoch log into `logs_dir` when given.
pub fn run_job(cfg: &ExperimentConfig, job: &Job, logs_dir: Option<&Path>) -> Result<JobOutput> {
    let e = &cfg.experiment;
    match job {
        Job::Train {
            setting,
            ratio,
            xs,
            seed_index,
        } => {
            let seed = cell_seed(e.base_seed, *seed_index);
            let ds = generate(&BenchmarkSpec {
                seed,
                mismatch_ratio: *ratio,
                ..cfg.benchmark.clone()
            })?;
            let (metrics, log) = train_setting(&ds, setting, seed, e.reassign_maps, e.final_fraction)?;
            if let Some(dir) = logs_dir {
                log.write_csv(&dir.join(format!(
                    "{}_r{ratio}_k{}_s{seed_index}.csv",
                    setting.name, setting.train.k_extra
                )))?;
            }
            let rows = xs
                .iter()
                .map(|&x| ResultRow {
                    setting: setting.name.clone(),
                    x,
                    seed: Some(seed),
                    stat: Stat::Seed,
                    values: metrics.values(),
                })
                .collect();
            Ok(JobOutput { rows, imbalance: None })
        }
        Job::Imbalance { seed_index } => {
            let seed = cell_seed(e.base_seed, *seed_index);
            let trial = imbalance_trial(&cfg.benchmark, &cfg.train, *seed_index, seed)?;
            let row = |setting: &str, kl: Option<f64>, r: Option<Ratio>| ResultRow {
                setting: setting.into(),
                x: cfg.benchmark.mismatch_ratio,
                seed: Some(seed),
                stat: Stat::Seed,
                values: vec![kl, r.map(Ratio::as_f64)],
            };
            Ok(JobOutput {
                rows: vec![row("id", trial.kl_id, trial.r_id), row("ood", trial.kl_ood, trial.r_ood)],
                imbalance: Some(trial),
            })
        }
        Job::SinkhornBench { seed_index } => {
            let seed = cell_seed(e.base_seed, *seed_index);
            let ds = generate(&BenchmarkSpec { seed, ..cfg.benchmark.clone() })?;
            let train = TrainConfig { seed, ..cfg.train.clone() };
            let profiles = profile_rounds(&ds, &train, &e.sinkhorn_iters, e.repetitions)?;
            let rows = profiles
                .into_iter()
                .map(|p| ResultRow {
                    setting: "upsilon_round".into(),
                    x: p.iterations as f64,
                    seed: Some(seed),
                    stat: Stat::Seed,
                    values: vec![Some(p.runtime_ms), p.marginal_violation, p.repair_l1],
                })
                .collect();
            Ok(JobOutput { rows, imbalance: None })
        }
    }
}

/// Mean and sample standard deviation of the present values; std is 0 for a
/// single value and infinite when some value is.
pub fn mean_std(values: impl IntoIterator<Item = Option<f64>>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if !mean.is_finite() {
        f64::INFINITY
    } else if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

/// Groups per-seed rows by `(setting, x)` in order of first appearance and
/// follows each group with its mean and std rows.
pub fn with_summaries(rows: Vec<ResultRow>) -> Vec<ResultRow> {
    let mut groups: Vec<((String, u64), Vec<ResultRow>)> = Vec::new();
    for row in rows {
        let key = (row.setting.clone(), row.x.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    let mut out = Vec::new();
    for (_, group) in groups {
        let width = group[0].values.len();
        let stats: Vec<Option<(f64, f64)>> = (0..width).map(|c| mean_std(group.iter().map(|r| r.values[c]))).collect();
        let summary = |stat: Stat, pick: fn((f64, f64)) -> f64| ResultRow {
            setting: group[0].setting.clone(),
            x: group[0].x,
            seed: None,
            stat,
            values: stats.iter().map(|s| s.map(pick)).collect(),
        };
        let mean = summary(Stat::Mean, |s| s.0);
        let std = summary(Stat::Std, |s| s.1);
        out.extend(group);
        out.push(mean);
        out.push(std);
    }
    out
}

pub fn write_results(path: &Path, columns: &[&str], rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["setting", "x", "seed", "stat"];
    header.extend_from_slice(columns);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row.record()).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

/// Hex SHA-256 of `blob <len>\0<bytes>`, the content hash git uses for blobs.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    /// Content hash of the config file as given, when it came from a file.
    pub config_hash: Option<String>,
    pub results_hash: String,
    pub final_fraction: f64,
    pub seed_rule: String,
    pub workers: usize,
    pub jobs: usize,
    pub created_unix: u64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<ResultRow>,
    pub results: PathBuf,
    pub manifest: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Runs every job of `cfg` on `workers` threads (all available when `None`)
/// and writes the artifacts into `out`. Failures name the failing job.
pub fn run(cfg: &ExperimentConfig, config_bytes: Option<&[u8]>, out: &Path, workers: Option<usize>) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(out.join("plots"))?;
    let logs_dir = cfg.experiment.write_logs.then(|| out.join("logs"));
    if let Some(dir) = &logs_dir {
        std::fs::create_dir_all(dir)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let jobs = cfg.jobs();
    let outputs: Vec<JobOutput> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                run_job(cfg, job, logs_dir.as_deref()).map_err(|e| Error::Cell {
                    cell: job.label(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()
    })?;

    let trials: Vec<ImbalanceTrial> = outputs.iter().filter_map(|o| o.imbalance).collect();
    if !trials.is_empty() {
        write_imbalance_csv(&trials, &out.join("imbalance.csv"))?;
    }
    let rows = with_summaries(outputs.into_iter().flat_map(|o| o.rows).collect());
    let columns = cfg.metric_columns();
    let results = out.join("results.csv");
    write_results(&results, columns, &rows)?;

    let mut plots = Vec::new();
    for &metric in columns {
        let spec = plot::PlotSpec {
            x: "x".into(),
            y: metric.into(),
            series: Some("setting".into()),
            title: Some(format!("{} vs {}", metric, x_label(cfg.experiment.kind))),
            x_label: Some(x_label(cfg.experiment.kind).into()),
            y_label: Some(metric.into()),
        };
        let path = out.join("plots").join(format!("{metric}.svg"));
        plot::plot_file(&results, &spec, &path)?;
        plots.push(path);
    }

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        kind: cfg.experiment.kind,
        config: cfg.clone(),
        config_hash: config_bytes.map(git_blob_hash),
        results_hash: git_blob_hash(&std::fs::read(&results)?),
        final_fraction: cfg.experiment.final_fraction,
        seed_rule: format!("base_seed * {SEED_STRIDE} + seed_index"),
        workers: pool.current_num_threads(),
        jobs: jobs.len(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        elapsed_s: start.elapsed().as_secs_f64(),
    };
    let manifest_path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    std::fs::write(&manifest_path, json + "\n")?;
    Ok(RunSummary {
        rows,
        results,
        manifest: manifest_path,
        plots,
    })
}

fn x_label(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Ksweep => "extra classes",
        ExperimentKind::SinkhornBench => "sinkhorn iterations",
        _ => "mismatch ratio",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[experiment]
kind = "ablation"
n_seeds = 2

[benchmark]
k_id = 3
k_ood = 2
d = 6
latent_dim = 3
n_labeled_per_class = 3
m_unlabeled = 60
n_test_per_class = 10

[train]
epochs = 4
pretrain_epochs = 1
batch_size = 16
hidden = 0
ema_decay = 0.5
tau = 0.6
gamma = 0.5
"#;

    #[test]
    fn parses_and_resolves_defaults() {
        let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
        let names: Vec<String> = cfg.settings().into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["baseline", "vanilla_pl", "rpl_only", "sec_only", "open_set_k1", "upsilon"]);
        let k: Vec<usize> = cfg.settings().iter().map(|s| s.train.k_extra).collect();
        assert_eq!(k, [0, 0, 0, 4, 1, 4]);
        assert_eq!(cfg.jobs().len(), 12);
    }

    #[test]
    fn custom_variants_override_the_train_config() {
        let text = SMALL.replace(
            "n_seeds = 2",
            "n_seeds = 1\nvariants = [\"upsilon\", { name = \"ups_ent\", variant = \"upsilon\", confidence = \"neg_entropy\", gamma = -0.9, k_extra = 2 }]",
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let s = cfg.settings();
        assert_eq!(s.len(), 3);
        assert_eq!(s[2].name, "ups_ent");
        assert_eq!(s[2].train.confidence, ConfidenceMeasure::NegEntropy);
        assert_eq!(s[2].train.k_extra, 2);
        assert_eq!(s[2].train.gamma, -0.9);
    }

    #[test]
    fn config_errors_name_the_violation() {
        let cases = [
            (SMALL.replace("n_seeds = 2", "n_seeds = 0"), "n_seeds"),
            (SMALL.replace("kind = \"ablation\"", "kind = \"nope\""), "unknown variant"),
            (SMALL.replace("hidden = 0", "hidden = 0\nbogus = 1"), "bogus"),
            (SMALL.replace("tau = 0.6", "tau = 1.5"), "train: tau"),
            (SMALL.replace("k_ood = 2", "k_ood = 2\nmismatch_ratio = 2.0"), "benchmark"),
            (
                SMALL.replace("n_seeds = 2", "n_seeds = 1\nvariants = [\"upsilon\", \"upsilon\"]"),
                "appears twice",
            ),
            (
                SMALL.replace("kind = \"ablation\"", "kind = \"sweep\"\nratios = [0.5, 1.2]"),
                "ratios",
            ),
        ];
        for (text, needle) in cases {
            let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
            assert!(err.contains(needle), "`{err}` lacks `{needle}`");
        }
    }

    #[test]
    fn reassignment_needs_enough_id_classes() {
        let text = SMALL
            .replace("kind = \"ablation\"", "kind = \"strategies\"")
            .replace("k_ood = 2", "k_ood = 4");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("re_assigned"), "{err}");
    }

    #[test]
    fn ksweep_reports_the_baseline_at_every_k() {
        let text = SMALL.replace("kind = \"ablation\"", "kind = \"ksweep\"\nk_values = [0, 2]");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let jobs = cfg.jobs();
        assert_eq!(jobs.len(), 6);
        let out = run_job(&cfg, &jobs[0], None).unwrap();
        assert_eq!(out.rows.iter().map(|r| r.x).collect::<Vec<_>>(), [0.0, 2.0]);
    }

    #[test]
    fn summaries_follow_their_group() {
        let row = |s: &str, x: f64, v: f64| ResultRow {
            setting: s.into(),
            x,
            seed: Some(1),
            stat: Stat::Seed,
            values: vec![Some(v), None],
        };
        let out = with_summaries(vec![row("a", 0.0, 1.0), row("b", 0.0, 5.0), row("a", 0.0, 3.0)]);
        let stats: Vec<(&str, Stat)> = out.iter().map(|r| (r.setting.as_str(), r.stat)).collect();
        assert_eq!(
            stats,
            [
                ("a", Stat::Seed),
                ("a", Stat::Seed),
                ("a", Stat::Mean),
                ("a", Stat::Std),
                ("b", Stat::Seed),
                ("b", Stat::Mean),
                ("b", Stat::Std)
            ]
        );
        assert_eq!(out[2].values, vec![Some(2.0), None]);
        assert!((out[3].values[0].unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(out[6].values[0], Some(0.0));
    }

    #[test]
    fn blob_hash_matches_git_format() {
        // sha256 of "blob 0\0"
        assert_eq!(
            git_blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn cell_seeds_follow_the_stride() {
        assert_eq!(cell_seed(0, 3), 3);
        assert_eq!(cell_seed(7, 12), 7012);
    }

    #[test]
    fn rows_render_absent_values_as_empty_fields() {
        let r = ResultRow {
            setting: "s".into(),
            x: 0.25,
            seed: None,
            stat: Stat::Mean,
            values: vec![Some(0.5), None],
        };
        assert_eq!(r.record(), ["s", "0.25", "", "mean", "0.5", ""]);
    }
}
