//! Desk-scale classifier and the pseudo-labeling training loop.

pub mod model;
pub mod optim;
mod train;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::confidence::ConfidenceMeasure;
use crate::error::{Error, Result};
use crate::sec::SinkhornConfig;
use crate::strategies::StrategyKind;

pub use model::{accuracy, forward, loss_and_grad, ClassifierParams};
pub use optim::{Adam, AdamConfig, EmaModel};
pub use train::{
    build_pseudo_labels, train_baseline, train_upsilon, train_variant, EpochMetrics, RoundRecord, TrainLog,
    TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Pseudo-label threshold for high-confidence samples.
    pub tau: f64,
    /// Samples with confidence below this go to the extra classes.
    pub gamma: f64,
    /// Measure `gamma` is compared against.
    pub confidence: ConfidenceMeasure,
    pub k_extra: usize,
    pub epochs: usize,
    /// Labeled-only epochs before the first pseudo-labeling round.
    pub pretrain_epochs: usize,
    /// Epochs between pseudo-labeling rounds.
    pub pl_interval: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub lambda_ramp_enabled: bool,
    /// Steps after pretraining until the pseudo-label weight reaches 1.
    pub ramp_horizon: u64,
    /// Hidden units; 0 trains a linear softmax model.
    pub hidden: usize,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            gamma: 0.3,
            confidence: ConfidenceMeasure::MaxProb,
            k_extra: 4,
            epochs: 400,
            pretrain_epochs: 50,
            pl_interval: 2,
            learning_rate: 3e-3,
            batch_size: 128,
            ema_decay: 0.999,
            lambda_ramp_enabled: false,
            ramp_horizon: 40_000,
            hidden: 32,
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !self.gamma.is_finite() {
            return fail(format!("gamma must be finite, got {}", self.gamma));
        }
        if self.confidence == ConfidenceMeasure::MaxProb && !(self.gamma > 0.0 && self.gamma <= self.tau) {
            return fail(format!("gamma must lie in (0, tau], got {}", self.gamma));
        }
        if self.epochs == 0 || self.pretrain_epochs >= self.epochs {
            return fail(format!(
                "pretrain_epochs ({}) must be below epochs ({})",
                self.pretrain_epochs, self.epochs
            ));
        }
        if self.pl_interval == 0 {
            return fail("pl_interval must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if self.lambda_ramp_enabled && self.ramp_horizon == 0 {
            return fail("ramp_horizon must be >= 1 when the ramp is enabled".into());
        }
        self.sinkhorn.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Which pseudo-labeler a training run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Variant {
    /// Re-balanced pseudo-labels plus extra-class clustering; clustering is skipped when `k_extra = 0`.
    Upsilon,
    /// Thresholded pseudo-labels on ID confidence.
    VanillaPl,
    RplOnly,
    /// Thresholded pseudo-labels plus extra-class clustering.
    SecOnly,
    /// The full method with a single extra class.
    OpenSetK1,
    /// Fixed labels from a ground-truth strategy.
    Strategy(StrategyKind),
}

impl Variant {
    pub fn baseline() -> Self {
        Self::Strategy(StrategyKind::Baseline)
    }
}

/// Pseudo-label weight `exp(-5 (1 - min(iter / horizon, 1))^2)`.
pub fn lambda_ramp(iter: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return 1.0;
    }
    let t = (iter as f64 / horizon as f64).min(1.0);
    (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// A batch of feature rows with their targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub labeled: f64,
    pub pseudo: f64,
    pub total: f64,
}

/// The gradient of `CE(labeled) + lambda * CE(pseudo)`, both averaged over their batch.
pub fn supervised_gradient(
    params: &ClassifierParams,
    labeled: Batch<'_>,
    pseudo: Option<Batch<'_>>,
    lambda: f64,
) -> Result<(StepLoss, ClassifierParams)> {
    if labeled.y.is_empty() {
        return Err(Error::EmptyLabeledBatch);
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("pseudo-label weight must lie in [0, 1], got {lambda}")));
    }
    let (l_loss, mut grad) = loss_and_grad(params, labeled.x, labeled.y, 1.0)?;
    let mut p_loss = 0.0;
    if let Some(pb) = pseudo.filter(|b| !b.y.is_empty() && lambda > 0.0) {
        let (loss, g) = loss_and_grad(params, pb.x, pb.y, lambda)?;
        p_loss = loss / lambda;
        for (a, b) in grad.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &b) in a.iter_mut().zip(b) {
                *a += b;
            }
        }
    }
    Ok((
        StepLoss {
            labeled: l_loss,
            pseudo: p_loss,
            total: l_loss + lambda * p_loss,
        },
        grad,
    ))
}

/// One Adam update on the combined loss; returns the loss before the update.
pub fn supervised_step(
    params: &mut ClassifierParams,
    adam: &mut Adam,
    labeled: Batch<'_>,
    pseudo: Option<Batch<'_>>,
    lambda: f64,
) -> Result<StepLoss> {
    let (loss, grad) = supervised_gradient(params, labeled, pseudo, lambda)?;
    adam.step(params, &grad);
    Ok(loss)
}
