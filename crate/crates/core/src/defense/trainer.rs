//! The shared classifier training loop and its standard / adversarial
//! instantiations.
//!
//! Determinism contract: every random decision draws from a stream labeled by
//! (seed, purpose, epoch, batch), and all reductions are ordered, so a config
//! trains to bit-identical parameters regardless of thread count. With
//! eps = 0 or M = 0 the perturbation is exactly zero and the trajectory
//! matches standard training bit for bit.

use super::{verify_feasible, EpochLog, ScheduleMode, TrainConfig, TrainOutcome};
use crate::attacks::{attack_batch_delta, AttackSpec};
use crate::data::{augment, make_batch, Dataset};
use crate::error::{CoreError, Result};
use crate::nn::{
    per_clip_cross_entropy, ClassifierF, GenThenClassify, GeneratorG, OptimKind,
    Optimizer, PlateauScheduler,
};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor};

/// Supplies the per-batch perturbation. Implementations may keep state
/// (adaptive distributions) and refresh it from the epoch-end hook.
pub trait AttackProvider {
    /// Perturbation for this batch, its budget (for feasibility enforcement),
    /// and a histogram label for the log. `None` means a clean batch.
    fn batch_delta(
        &mut self,
        epoch: usize,
        batch_idx: usize,
        model: &ClassifierF,
        pre: Option<&GeneratorG>,
        x: &Tensor,
        labels: &[usize],
        rng: &mut StreamRng,
    ) -> Result<Option<(Tensor, f32, String)>>;

    fn epoch_end(
        &mut self,
        _epoch: usize,
        _model: &ClassifierF,
        _pre: Option<&GeneratorG>,
    ) -> Result<()> {
        Ok(())
    }
}

/// Standard training: every batch is clean.
pub struct NoAttack;

impl AttackProvider for NoAttack {
    fn batch_delta(
        &mut self,
        _epoch: usize,
        _batch_idx: usize,
        _model: &ClassifierF,
        _pre: Option<&GeneratorG>,
        _x: &Tensor,
        _labels: &[usize],
        _rng: &mut StreamRng,
    ) -> Result<Option<(Tensor, f32, String)>> {
        Ok(None)
    }
}

/// Fixed attack spec applied to every batch (Eq.-style robust training).
pub struct FixedAttack {
    pub spec: AttackSpec,
}

impl AttackProvider for FixedAttack {
    fn batch_delta(
        &mut self,
        _epoch: usize,
        _batch_idx: usize,
        model: &ClassifierF,
        pre: Option<&GeneratorG>,
        x: &Tensor,
        labels: &[usize],
        rng: &mut StreamRng,
    ) -> Result<Option<(Tensor, f32, String)>> {
        if self.spec.eps == 0.0 || self.spec.steps == 0 {
            return Ok(None);
        }
        let delta = match pre {
            None => attack_batch_delta(model, x, labels, &self.spec, rng)?,
            Some(g) => {
                let composed = GenThenClassify {
                    generator: g,
                    classifier: model,
                };
                attack_batch_delta(&composed, x, labels, &self.spec, rng)?
            }
        };
        Ok(Some((delta, self.spec.eps, self.spec.label())))
    }
}

/// Clean accuracy and mean loss over a dataset, batched.
pub(crate) fn evaluate_clean(
    model: &ClassifierF,
    pre: Option<&GeneratorG>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let idxs: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for chunk in idxs.chunks(batch_size) {
        let (x, labels) = make_batch(&data.clips, chunk)?;
        let mut tape = Tape::new();
        let mut h = tape.constant(x);
        if let Some(g) = pre {
            h = g.forward(&mut tape, h, false)?.0;
        }
        let (z, _) = model.forward(&mut tape, h, false)?;
        let logits = tape.value(z).clone();
        let losses = per_clip_cross_entropy(&logits, &labels)?;
        loss_sum += losses.iter().sum::<f64>();
        let k = model.num_classes;
        for (row, &y) in logits.data().chunks_exact(k).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred == y {
                correct += 1;
            }
        }
    }
    Ok((
        correct as f64 / data.len() as f64,
        loss_sum / data.len() as f64,
    ))
}

/// The shared loop: shuffle, (augment), attack, verify feasibility, update.
pub fn train_classifier(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    pre: Option<&GeneratorG>,
    provider: &mut dyn AttackProvider,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init_rng = StreamRng::labeled(cfg.seed, "model/init");
    let mut model = ClassifierF::new(train.num_classes, clip_channels(train)?, &mut init_rng);
    if let Some(params) = &cfg.init {
        model.set_params(params.clone())?;
    }
    let shapes = model.param_shapes();
    let mut opt = match cfg.optim.kind {
        OptimKind::SgdMomentum { momentum } => Optimizer::sgd(
            cfg.optim.lr,
            momentum,
            cfg.optim.weight_decay,
            &shapes,
        ),
        OptimKind::Adam { beta1, beta2, .. } => Optimizer::adam(
            cfg.optim.lr,
            beta1,
            beta2,
            cfg.optim.weight_decay,
            &shapes,
        ),
    };
    let mut plateau = match cfg.schedule {
        ScheduleMode::Plateau { patience, factor } => Some(PlateauScheduler::new(patience, factor)),
        ScheduleMode::Constant => None,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut order_rng = StreamRng::labeled(cfg.seed, &format!("train/order/{epoch}"));
        order_rng.shuffle(&mut order);
        let n_batches = cfg
            .batches_per_epoch
            .unwrap_or(usize::MAX)
            .min(order.len().div_ceil(cfg.batch_size));

        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut loss_sum = 0.0f64;
        let mut sampled: Vec<(String, usize)> = Vec::new();

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).take(n_batches).enumerate() {
            let (x, labels) = batch_with_augment(cfg, train, chunk, epoch)?;
            let mut attack_rng =
                StreamRng::labeled(cfg.seed, &format!("train/attack/{epoch}/{batch_idx}"));
            let perturbed =
                provider.batch_delta(epoch, batch_idx, &model, pre, &x, &labels, &mut attack_rng)?;
            let (x_used, label_hist) = match perturbed {
                None => (x, None),
                Some((delta, eps, hist)) => {
                    verify_feasible(&x, &delta, eps)?;
                    (x.add(&delta)?, Some(hist))
                }
            };
            if let Some(h) = label_hist {
                match sampled.iter_mut().find(|(k, _)| *k == h) {
                    Some((_, c)) => *c += 1,
                    None => sampled.push((h, 1)),
                }
            }

            let mut tape = Tape::new();
            let mut h = tape.constant(x_used);
            if let Some(g) = pre {
                h = g.forward(&mut tape, h, false)?.0;
            }
            let (z, bind) = model.forward(&mut tape, h, true)?;
            let logits = tape.value(z).clone();
            let ce = tape.cross_entropy(z, &labels)?;
            let loss = tape.item_f64(ce);
            if !loss.is_finite() {
                return Err(CoreError::NumericFailure {
                    op: format!("cross_entropy (epoch {epoch}, batch {batch_idx})"),
                });
            }
            loss_sum += loss * labels.len() as f64;
            let k = model.num_classes;
            for (row, &y) in logits.data().chunks_exact(k).zip(&labels) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if pred == y {
                    correct += 1;
                }
            }
            seen += labels.len();

            tape.backward(ce)?;
            let grads = bind.grads(&tape, &shapes);
            opt.step(&mut model.params_mut(), &grads)?;
        }

        let (val_acc, val_loss) = evaluate_clean(&model, pre, val, cfg.batch_size)?;
        if let Some(p) = plateau.as_mut() {
            if let Some(factor) = p.observe(val_loss) {
                opt.lr *= factor;
            }
        }
        sampled.sort();
        log.push(EpochLog {
            epoch,
            train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
            val_acc,
            mean_loss: if seen == 0 { 0.0 } else { loss_sum / seen as f64 },
            val_loss,
            lr: opt.lr,
            sampled,
        });
        provider.epoch_end(epoch, &model, pre)?;
    }
    Ok(TrainOutcome { model, log })
}

pub(crate) fn clip_channels(data: &Dataset) -> Result<usize> {
    data.clips
        .first()
        .map(|c| c.frames.shape()[3])
        .ok_or_else(|| CoreError::Data("empty dataset".to_string()))
}

fn batch_with_augment(
    cfg: &TrainConfig,
    train: &Dataset,
    chunk: &[usize],
    epoch: usize,
) -> Result<(Tensor, Vec<usize>)> {
    match &cfg.augment {
        None => make_batch(&train.clips, chunk),
        Some(aug) => {
            let mut clips = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let clip = &train.clips[i];
                let mut rng =
                    StreamRng::labeled(cfg.seed, &format!("augment/{epoch}/{}", clip.id));
                clips.push(augment(clip, aug, &mut rng)?);
            }
            let idxs: Vec<usize> = (0..clips.len()).collect();
            make_batch(&clips, &idxs)
        }
    }
}

/// Standard training on clean data.
pub fn train_benign(cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    train_classifier(cfg, train, val, None, &mut NoAttack)
}

/// Robust training: every batch is replaced by x + delta with the inner
/// maximization solved by the PGD family.
pub fn adversarial_train(
    cfg: &TrainConfig,
    spec: &AttackSpec,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    spec.validate()?;
    train_classifier(cfg, train, val, None, &mut FixedAttack { spec: spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_moving_shapes, Split};

    fn tiny_data() -> (Dataset, Dataset) {
        let train = generate_moving_shapes(11, Split::Train, 4, 3, 8, 16, 16).unwrap();
        let val = generate_moving_shapes(11, Split::Val, 2, 3, 8, 16, 16).unwrap();
        (train, val)
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 6,
            batches_per_epoch: None,
            optim: super::super::OptimSettings::sgd(0.05, 1e-4),
            seed: 7,
            schedule: ScheduleMode::Constant,
            augment: None,
            init: None,
        }
    }

    fn params_bytes(m: &ClassifierF) -> Vec<u8> {
        let mut out = Vec::new();
        for p in m.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let (train, val) = tiny_data();
        let out = train_benign(&tiny_cfg(0), &train, &val).unwrap();
        assert!(out.log.is_empty());
        let mut rng = StreamRng::labeled(7, "model/init");
        let fresh = ClassifierF::new(3, 3, &mut rng);
        assert_eq!(params_bytes(&out.model), params_bytes(&fresh));
    }

    #[test]
    fn same_seed_trains_bit_identically() {
        let (train, val) = tiny_data();
        let a = train_benign(&tiny_cfg(1), &train, &val).unwrap();
        let b = train_benign(&tiny_cfg(1), &train, &val).unwrap();
        assert_eq!(params_bytes(&a.model), params_bytes(&b.model));
    }

    #[test]
    fn zero_budget_matches_benign_trajectory_bitwise() {
        let (train, val) = tiny_data();
        let benign = train_benign(&tiny_cfg(2), &train, &val).unwrap();
        let spec = AttackSpec::pgd(0.0, 2.0, 3);
        let at = adversarial_train(&tiny_cfg(2), &spec, &train, &val).unwrap();
        assert_eq!(params_bytes(&benign.model), params_bytes(&at.model));
        // zero steps likewise
        let spec = AttackSpec::pgd(8.0, 2.0, 0);
        let at = adversarial_train(&tiny_cfg(2), &spec, &train, &val).unwrap();
        assert_eq!(params_bytes(&benign.model), params_bytes(&at.model));
    }

    #[test]
    fn log_length_equals_completed_epochs() {
        let (train, val) = tiny_data();
        let out = train_benign(&tiny_cfg(3), &train, &val).unwrap();
        assert_eq!(out.log.len(), 3);
        for (i, e) in out.log.iter().enumerate() {
            assert_eq!(e.epoch, i);
            assert!((e.gap() - (e.train_acc - e.val_acc)).abs() < 1e-12);
        }
    }

    #[test]
    fn adversarial_batches_are_verified_feasible() {
        let (train, val) = tiny_data();
        let spec = AttackSpec::pgd(8.0, 4.0, 2);
        // would error inside if any delta left the ball or range
        adversarial_train(&tiny_cfg(1), &spec, &train, &val).unwrap();
    }
}
