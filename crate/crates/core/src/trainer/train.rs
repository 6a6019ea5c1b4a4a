use std::io::Write;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{accuracy, forward, ClassifierParams};
use super::optim::{Adam, EmaModel};
use super::{lambda_ramp, supervised_step, Batch, TrainConfig, Variant};
use crate::confidence::confidence;
use crate::datagen::MismatchedDataset;
use crate::diagnostics::{kl_to_uniform, ood_as_id_proportion, LabelHistogram};
use crate::error::{Error, Result};
use crate::label_space::{LabelSpace, PredictionMatrix, PseudoLabelSet};
use crate::pseudo_label::{compute_rpl_thresholds, rebalanced_pl, vanilla_pl};
use crate::sec::{sec_on_subset, SinkhornReport};
use crate::strategies::label_ood;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// ID test accuracy of the averaged model.
    pub accuracy: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Size of the thresholded or re-balanced part of the active pseudo-label set.
    pub n_pseudo_rpl: usize,
    /// Size of the extra-class part of the active pseudo-label set.
    pub n_pseudo_sec: usize,
    pub ood_as_id_prop: f64,
    /// KL from uniform of the ID-class pseudo-label histogram; `None` without ID labels.
    pub kl_imbalance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub epoch: usize,
    pub n_primary: usize,
    pub n_sec: usize,
    /// Per-class quota of the re-balanced labeler, when it ran.
    pub quota: Option<usize>,
    /// Labels per class over the whole label space.
    pub histogram: Vec<usize>,
    pub ood_as_id_prop: f64,
    pub sinkhorn: Option<SinkhornReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    pub rounds: Vec<RoundRecord>,
}

impl TrainLog {
    /// Mean accuracy over the last `fraction` of epochs (at least one epoch).
    pub fn final_accuracy(&self, fraction: f64) -> f64 {
        let n = ((self.epochs.len() as f64 * fraction).round() as usize).clamp(1, self.epochs.len().max(1));
        let tail = &self.epochs[self.epochs.len().saturating_sub(n)..];
        tail.iter().map(|e| e.accuracy).sum::<f64>() / tail.len() as f64
    }

    /// Writes `epoch,split,accuracy,loss,n_pseudo_rpl,n_pseudo_sec,ood_as_id_prop,kl_imbalance`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch,split,accuracy,loss,n_pseudo_rpl,n_pseudo_sec,ood_as_id_prop,kl_imbalance")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},test_id,{},{},{},{},{},{}",
                e.epoch,
                e.accuracy,
                e.loss,
                e.n_pseudo_rpl,
                e.n_pseudo_sec,
                e.ood_as_id_prop,
                e.kl_imbalance.map(|v| v.to_string()).unwrap_or_default()
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub ema: EmaModel,
    pub log: TrainLog,
}

/// One pseudo-labeling round's output.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub set: PseudoLabelSet,
    pub n_primary: usize,
    pub n_sec: usize,
    pub quota: Option<usize>,
    pub sinkhorn: Option<SinkhornReport>,
}

/// Builds a pseudo-label set from predictions on the unlabeled pool.
///
/// `fixed` holds the labels of a [`Variant::Strategy`] run and is required for it.
pub fn build_pseudo_labels(
    variant: &Variant,
    p: &PredictionMatrix,
    ls: &LabelSpace,
    cfg: &TrainConfig,
    fixed: Option<&PseudoLabelSet>,
) -> Result<PseudoLabels> {
    let (primary, quota) = match variant {
        Variant::Strategy(_) => {
            let set = fixed
                .cloned()
                .ok_or_else(|| Error::InvalidConfig("strategy run needs its fixed labels".into()))?;
            let n = set.len();
            return Ok(PseudoLabels {
                set,
                n_primary: n,
                n_sec: 0,
                quota: None,
                sinkhorn: None,
            });
        }
        Variant::Upsilon | Variant::RplOnly | Variant::OpenSetK1 => {
            let quota = compute_rpl_thresholds(p, ls, cfg.tau)?.quota;
            (rebalanced_pl(p, ls, cfg.tau)?, Some(quota))
        }
        Variant::VanillaPl | Variant::SecOnly => (vanilla_pl(p, ls, cfg.tau)?, None),
    };
    let wants_sec = matches!(variant, Variant::SecOnly | Variant::OpenSetK1)
        || (matches!(variant, Variant::Upsilon) && ls.k_extra() > 0);
    let n_primary = primary.len();
    if !wants_sec {
        return Ok(PseudoLabels {
            set: primary,
            n_primary,
            n_sec: 0,
            quota,
            sinkhorn: None,
        });
    }
    let conf = confidence(p, ls, cfg.confidence)?;
    let subset: Vec<usize> = conf
        .below(cfg.gamma)
        .into_iter()
        .filter(|&s| !primary.contains(s))
        .collect();
    let sec = sec_on_subset(p, ls, &subset, &cfg.sinkhorn)?;
    let n_sec = sec.labels.len();
    Ok(PseudoLabels {
        set: primary.union(&sec.labels)?,
        n_primary,
        n_sec,
        quota,
        sinkhorn: sec.report,
    })
}

fn check_variant(variant: &Variant, cfg: &TrainConfig) -> Result<()> {
    match variant {
        Variant::OpenSetK1 if cfg.k_extra != 1 => Err(Error::InvalidConfig(format!(
            "open_set_k1 needs k_extra = 1, got {}",
            cfg.k_extra
        ))),
        Variant::SecOnly if cfg.k_extra == 0 => Err(Error::InvalidConfig("sec_only needs k_extra >= 1".into())),
        _ => Ok(()),
    }
}

/// Trains with the pseudo-labeler named by `variant`.
///
/// Epochs are numbered from 1. Epochs up to `pretrain_epochs` use labeled data
/// only. After every epoch `e >= pretrain_epochs` with `e % pl_interval == 0`,
/// the pseudo-label set is rebuilt from the current (non-averaged) model and
/// used from the next epoch on. Each epoch walks the shuffled unlabeled pool in
/// chunks of `batch_size`; every step pairs a chunk with a labeled batch drawn
/// with replacement and trains on the chunk members that carry a pseudo-label.
/// The batch stream depends on neither the pseudo-labels nor the number of
/// extra classes, so a run whose pseudo-label sets stay empty matches a
/// labeled-only run of the same width exactly, and runs of different widths
/// see the same batches.
pub fn train_variant(ds: &MismatchedDataset, cfg: &TrainConfig, variant: &Variant) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    check_variant(variant, cfg)?;
    let ls = LabelSpace::new(ds.k_id, cfg.k_extra)?;
    let fixed = match variant {
        Variant::Strategy(kind) => Some(label_ood(&ds.unlabeled_truth, &ds.ood_mask, kind, &ls)?),
        _ => None,
    };

    // Separate streams: the batch sequence does not depend on the model width.
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut params = ClassifierParams::init(ds.dim(), cfg.hidden, ls.total(), &mut init_rng);
    let mut adam = Adam::new(cfg.adam(), &params);
    let mut ema = EmaModel::new(&params, cfg.ema_decay);

    let m = ds.unlabeled.nrows();
    let n_labeled = ds.labeled.nrows();
    let steps_per_epoch = if m > 0 { m } else { n_labeled }.div_ceil(cfg.batch_size);
    let mut active: Option<PseudoLabels> = None;
    let mut steps_after_pretrain = 0u64;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..m).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for step in 0..steps_per_epoch {
            let lab_idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n_labeled)).collect();
            let xl = ds.labeled.select(Axis(0), &lab_idx);
            let yl: Vec<usize> = lab_idx.iter().map(|&i| ds.labeled_labels[i]).collect();

            let chunk = if m > 0 {
                &order[(step * cfg.batch_size).min(m)..((step + 1) * cfg.batch_size).min(m)]
            } else {
                &[][..]
            };
            let (p_idx, p_lab): (Vec<usize>, Vec<usize>) = match &active {
                Some(labels) => chunk
                    .iter()
                    .filter_map(|&i| labels.set.get(i).map(|c| (i, c)))
                    .unzip(),
                None => (Vec::new(), Vec::new()),
            };
            let xp = ds.unlabeled.select(Axis(0), &p_idx);
            let past_pretrain = epoch > cfg.pretrain_epochs;
            let lambda = if past_pretrain && cfg.lambda_ramp_enabled {
                lambda_ramp(steps_after_pretrain, cfg.ramp_horizon)
            } else {
                1.0
            };
            let pseudo = (!p_lab.is_empty()).then(|| Batch { x: xp.view(), y: &p_lab });
            let loss = supervised_step(&mut params, &mut adam, Batch { x: xl.view(), y: &yl }, pseudo, lambda)?;
            loss_sum += loss.total;
            if past_pretrain {
                steps_after_pretrain += 1;
            }
            ema.update(&params);
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch });
        }

        if epoch >= cfg.pretrain_epochs && epoch % cfg.pl_interval == 0 {
            let labels = if m > 0 {
                let p = forward(&params, ds.unlabeled.view())?;
                build_pseudo_labels(variant, &p, &ls, cfg, fixed.as_ref())?
            } else {
                PseudoLabels {
                    set: PseudoLabelSet::new(ls.total()),
                    n_primary: 0,
                    n_sec: 0,
                    quota: None,
                    sinkhorn: None,
                }
            };
            log.rounds.push(RoundRecord {
                epoch,
                n_primary: labels.n_primary,
                n_sec: labels.n_sec,
                quota: labels.quota,
                histogram: labels.set.class_counts(ls.total()),
                ood_as_id_prop: ood_as_id_proportion(&labels.set, &ds.ood_mask, &ls),
                sinkhorn: labels.sinkhorn,
            });
            active = Some(labels);
        }

        let (n_rpl, n_sec, ood_prop, kl) = match &active {
            Some(l) => (
                l.n_primary,
                l.n_sec,
                ood_as_id_proportion(&l.set, &ds.ood_mask, &ls),
                kl_to_uniform(&LabelHistogram::from_labels(&l.set, &ls)).ok(),
            ),
            None => (0, 0, 0.0, None),
        };
        log.epochs.push(EpochMetrics {
            epoch,
            accuracy: accuracy(&ema.shadow, ds.test_id.view(), &ds.test_id_labels, ds.k_id)?,
            loss: loss_sum / steps_per_epoch as f64,
            n_pseudo_rpl: n_rpl,
            n_pseudo_sec: n_sec,
            ood_as_id_prop: ood_prop,
            kl_imbalance: kl,
        });
    }
    Ok(TrainOutcome { params, ema, log })
}

pub fn train_upsilon(ds: &MismatchedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_variant(ds, cfg, &Variant::Upsilon)
}

/// Labeled-only training under the same schedule and random stream.
pub fn train_baseline(ds: &MismatchedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_variant(ds, cfg, &Variant::baseline())
}
