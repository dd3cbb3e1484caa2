//! Training procedures: standard, adversarial (fixed budget), adaptive,
//! curriculum, and the generative (APE-GAN) family.

mod adaptive;
mod curriculum;
mod gan;
mod trainer;

pub use adaptive::{
    adaptive_at, adaptive_attack_type_at, sample_budget, update_budget_distribution,
    BudgetDistribution,
};
pub use curriculum::{curriculum_at, CurriculumDirection, CurriculumSchedule};
pub use gan::{
    at_frozen_generator, generative_at_end_to_end, pgd_attacker, train_ape_gan, ApeGanOutcome,
    BatchAttacker, GanConfig, GanEpochLog, GatOutcome,
};
pub use trainer::{
    adversarial_train, train_benign, train_classifier, AttackProvider, FixedAttack, NoAttack,
};

use crate::data::AugmentConfig;
use crate::error::{CoreError, Result};
use crate::nn::OptimKind;
use crate::tensor::Tensor;

/// Optimizer settings carried by a training configuration.
#[derive(Debug, Clone)]
pub struct OptimSettings {
    pub kind: OptimKind,
    pub lr: f32,
    pub weight_decay: f32,
}

impl OptimSettings {
    /// SGD with momentum 0.9; the standard-training default.
    pub fn sgd(lr: f32, weight_decay: f32) -> OptimSettings {
        OptimSettings {
            kind: OptimKind::SgdMomentum { momentum: 0.9 },
            lr,
            weight_decay,
        }
    }

    /// Adam with decay rates (0.5, 0.999); the GAN default.
    pub fn adam(lr: f32) -> OptimSettings {
        OptimSettings {
            kind: OptimKind::Adam {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleMode {
    Constant,
    /// Decay the learning rate by `factor` when the validation loss has not
    /// improved for `patience` consecutive epochs.
    Plateau { patience: usize, factor: f32 },
}

/// Step-size rule alpha = A(eps) used when the budget varies during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaRule {
    /// alpha = eps (the strongest-defense row of the fixed-budget study).
    EqualsEps,
    /// alpha = slope * (eps + shift); the tuned-attack linear relation.
    Linear { slope: f32, shift: f32 },
}

impl AlphaRule {
    pub fn alpha(&self, eps: f32) -> f32 {
        match self {
            AlphaRule::EqualsEps => eps,
            AlphaRule::Linear { slope, shift } => slope * (eps + shift),
        }
    }

    /// The tuned-attack relation alpha = 0.2 (eps + 1).
    pub fn tuned() -> AlphaRule {
        AlphaRule::Linear {
            slope: 0.2,
            shift: 1.0,
        }
    }
}

/// Training configuration shared by every trainer.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Cap on batches per epoch; `None` sweeps the full training split.
    pub batches_per_epoch: Option<usize>,
    pub optim: OptimSettings,
    pub seed: u64,
    pub schedule: ScheduleMode,
    pub augment: Option<AugmentConfig>,
    /// Warm-start classifier parameters (e.g. a benign checkpoint before
    /// adversarial fine-tuning); `None` initializes from the seed.
    pub init: Option<Vec<Tensor>>,
}

impl TrainConfig {
    /// Standard-training defaults: SGD(0.05), momentum 0.9, weight decay 1e-3.
    pub fn standard(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            batches_per_epoch: None,
            optim: OptimSettings::sgd(0.05, 1e-3),
            seed,
            schedule: ScheduleMode::Plateau {
                patience: 10,
                factor: 0.1,
            },
            augment: None,
            init: None,
        }
    }

    /// Adversarial-training defaults: weight decay drops to 1e-5 and the
    /// learning rate to 0.02 (adversarial runs fine-tune a benign model).
    pub fn adversarial(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            optim: OptimSettings::sgd(0.02, 1e-5),
            ..TrainConfig::standard(epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::invalid("train_config", "batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    /// Accuracy on the examples actually used for updates (adversarial ones
    /// during AT), so train - val tracks the robust generalization gap.
    pub train_acc: f64,
    /// Clean validation accuracy.
    pub val_acc: f64,
    pub mean_loss: f64,
    pub val_loss: f64,
    pub lr: f32,
    /// Histogram of sampled budgets or attack types, label -> count.
    pub sampled: Vec<(String, usize)>,
}

impl EpochLog {
    pub fn gap(&self) -> f64 {
        self.train_acc - self.val_acc
    }
}

/// Trained classifier plus its per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: crate::nn::ClassifierF,
    pub log: Vec<EpochLog>,
}

/// Ball and range feasibility enforcement applied to every adversarial batch
/// before it reaches a gradient step.
pub(crate) fn verify_feasible(x: &Tensor, delta: &Tensor, eps: f32) -> Result<()> {
    let bound = eps / 255.0;
    for (i, (&d, &xv)) in delta.data().iter().zip(x.data()).enumerate() {
        if !d.is_finite() {
            return Err(CoreError::NumericFailure {
                op: "adversarial batch delta".to_string(),
            });
        }
        if d.abs() > bound {
            return Err(CoreError::invalid(
                "verify_feasible",
                format!("|delta[{i}]| = {} exceeds eps/255 = {bound}", d.abs()),
            ));
        }
        let s = xv + d;
        if !(0.0..=1.0).contains(&s) {
            return Err(CoreError::invalid(
                "verify_feasible",
                format!("x + delta = {s} at {i} leaves [0, 1]"),
            ));
        }
    }
    Ok(())
}

/// Write per-epoch logs as tab-separated text.
pub fn write_epoch_log(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch\ttrain_acc\tval_acc\tgap\tmean_loss\tval_loss\tlr\tsampled\n");
    for e in log {
        let sampled = e
            .sampled
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.epoch,
            crate::eval::fmt_sig(e.train_acc, 6),
            crate::eval::fmt_sig(e.val_acc, 6),
            crate::eval::fmt_sig(e.gap(), 6),
            crate::eval::fmt_sig(e.mean_loss, 6),
            crate::eval::fmt_sig(e.val_loss, 6),
            crate::eval::fmt_sig(e.lr as f64, 6),
            if sampled.is_empty() { "-" } else { &sampled }
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
