//! Curriculum adversarial training: the attack budget ramps across epochs.

use super::trainer::{train_classifier, AttackProvider};
use super::{AlphaRule, TrainConfig, TrainOutcome};
use crate::attacks::{attack_batch_delta, AttackSpec};
use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::nn::{ClassifierF, GenThenClassify, GeneratorG};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurriculumDirection {
    Up,
    Down,
}

/// Budget levels spread over contiguous epoch blocks, as evenly as possible;
/// the down direction replays the up sequence in exact reverse.
#[derive(Debug, Clone)]
pub struct CurriculumSchedule {
    pub levels: Vec<f32>,
    pub direction: CurriculumDirection,
    pub epochs: usize,
}

impl CurriculumSchedule {
    pub fn new(
        levels: Vec<f32>,
        direction: CurriculumDirection,
        epochs: usize,
    ) -> Result<CurriculumSchedule> {
        if levels.is_empty() {
            return Err(CoreError::invalid("curriculum_schedule", "no budget levels"));
        }
        if levels.len() > epochs {
            return Err(CoreError::invalid(
                "curriculum_schedule",
                format!("{} levels for only {epochs} epochs", levels.len()),
            ));
        }
        let mut sorted = levels.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        if sorted != levels {
            return Err(CoreError::invalid(
                "curriculum_schedule",
                "levels must be sorted ascending",
            ));
        }
        Ok(CurriculumSchedule {
            levels,
            direction,
            epochs,
        })
    }

    /// Budget per epoch over the whole run.
    pub fn epoch_budgets(&self) -> Vec<f32> {
        let l = self.levels.len();
        let base = self.epochs / l;
        let rem = self.epochs % l;
        let mut up = Vec::with_capacity(self.epochs);
        for (i, &level) in self.levels.iter().enumerate() {
            let block = base + usize::from(i < rem);
            up.extend(std::iter::repeat(level).take(block));
        }
        match self.direction {
            CurriculumDirection::Up => up,
            CurriculumDirection::Down => up.into_iter().rev().collect(),
        }
    }

    pub fn budget_for_epoch(&self, epoch: usize) -> f32 {
        self.epoch_budgets()[epoch.min(self.epochs - 1)]
    }
}

struct CurriculumProvider {
    budgets: Vec<f32>,
    alpha: AlphaRule,
    steps: usize,
}

impl AttackProvider for CurriculumProvider {
    fn batch_delta(
        &mut self,
        epoch: usize,
        _batch_idx: usize,
        model: &ClassifierF,
        pre: Option<&GeneratorG>,
        x: &Tensor,
        labels: &[usize],
        rng: &mut StreamRng,
    ) -> Result<Option<(Tensor, f32, String)>> {
        let eps = self.budgets[epoch.min(self.budgets.len() - 1)];
        if eps == 0.0 {
            return Ok(None);
        }
        let spec = AttackSpec::pgd(eps, self.alpha.alpha(eps), self.steps);
        let delta = match pre {
            None => attack_batch_delta(model, x, labels, &spec, rng)?,
            Some(g) => {
                let composed = GenThenClassify {
                    generator: g,
                    classifier: model,
                };
                attack_batch_delta(&composed, x, labels, &spec, rng)?
            }
        };
        Ok(Some((delta, eps, format!("{eps}"))))
    }
}

/// Adversarial training whose budget follows the schedule's epoch blocks.
pub fn curriculum_at(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    schedule: &CurriculumSchedule,
    alpha: AlphaRule,
    steps: usize,
) -> Result<TrainOutcome> {
    if schedule.epochs != cfg.epochs {
        return Err(CoreError::invalid(
            "curriculum_at",
            format!(
                "schedule covers {} epochs but config trains {}",
                schedule.epochs, cfg.epochs
            ),
        ));
    }
    let mut provider = CurriculumProvider {
        budgets: schedule.epoch_budgets(),
        alpha,
        steps,
    };
    train_classifier(cfg, train, val, None, &mut provider)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventy_epochs_seven_levels_gives_ten_each() {
        let levels = vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
        let s = CurriculumSchedule::new(levels.clone(), CurriculumDirection::Up, 70).unwrap();
        let budgets = s.epoch_budgets();
        assert_eq!(budgets.len(), 70);
        for (i, &level) in levels.iter().enumerate() {
            for e in 0..10 {
                assert_eq!(budgets[i * 10 + e], level);
            }
        }
    }

    #[test]
    fn down_is_the_exact_reversal_of_up() {
        let levels = vec![0.0, 3.0, 6.0, 9.0, 12.0];
        let up = CurriculumSchedule::new(levels.clone(), CurriculumDirection::Up, 13).unwrap();
        let down = CurriculumSchedule::new(levels, CurriculumDirection::Down, 13).unwrap();
        let mut rev = up.epoch_budgets();
        rev.reverse();
        assert_eq!(down.epoch_budgets(), rev);
    }

    #[test]
    fn up_budgets_are_non_decreasing_and_cover_all_levels() {
        let levels = vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
        let s = CurriculumSchedule::new(levels.clone(), CurriculumDirection::Up, 10).unwrap();
        let budgets = s.epoch_budgets();
        assert_eq!(budgets.len(), 10);
        for w in budgets.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert_eq!(budgets[0], 0.0);
        assert_eq!(*budgets.last().unwrap(), 12.0);
        for level in levels {
            assert!(budgets.contains(&level));
        }
    }

    #[test]
    fn more_levels_than_epochs_is_rejected() {
        let err = CurriculumSchedule::new(vec![0.0, 1.0, 2.0], CurriculumDirection::Up, 2);
        assert!(err.is_err());
    }
}
