//! The generative defenses: 3D perturbation-elimination GAN training,
//! adversarial training behind a frozen generator, and the end-to-end
//! generative adversarial training of all three networks.

use super::trainer::{clip_channels, train_classifier, FixedAttack};
use super::{verify_feasible, EpochLog, ScheduleMode, TrainConfig, TrainOutcome};
use crate::attacks::{attack_batch_delta, AttackSpec};
use crate::data::{make_batch, Dataset};
use crate::error::{CoreError, Result};
use crate::nn::{
    bce_fake, bce_real, mse_loss, ClassifierF, DiscriminatorD, GenThenClassify, GeneratorG,
    OptimKind, Optimizer, PlateauScheduler,
};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor};

/// Weights and step ratio of the GAN objective.
#[derive(Debug, Clone)]
pub struct GanConfig {
    /// MSE weight gamma_1.
    pub gamma1: f32,
    /// GAN-term weight gamma_2.
    pub gamma2: f32,
    pub d_steps: usize,
    pub g_steps: usize,
    /// Adam learning rate for G and D.
    pub lr: f32,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            gamma1: 0.7,
            gamma2: 0.3,
            d_steps: 1,
            g_steps: 1,
            lr: 2e-4,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(CoreError::invalid("gan_config", "gamma weights must be >= 0"));
        }
        if self.d_steps == 0 || self.g_steps == 0 {
            return Err(CoreError::invalid("gan_config", "step ratio must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GanEpochLog {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct ApeGanOutcome {
    pub generator: GeneratorG,
    pub discriminator: DiscriminatorD,
    pub log: Vec<GanEpochLog>,
}

/// A source of adversarial batches for GAN training: returns (delta, eps).
pub type BatchAttacker<'a> =
    dyn FnMut(usize, usize, &Tensor, &[usize], &mut StreamRng) -> Result<(Tensor, f32)> + 'a;

/// Fixed-spec PGD against a frozen victim classifier; the usual attacker for
/// perturbation-elimination pretraining.
pub fn pgd_attacker<'a>(victim: &'a ClassifierF, spec: AttackSpec) -> Box<BatchAttacker<'a>> {
    Box::new(move |_epoch, _batch, x, labels, rng| {
        let delta = attack_batch_delta(victim, x, labels, &spec, rng)?;
        Ok((delta, spec.eps))
    })
}

/// Alternating min-max training of (G, D): the discriminator separates
/// original clips from reconstructions, the generator minimizes
/// gamma1 * MSE(G(x+delta), x) - gamma2 * log D(G(x+delta)).
pub fn train_ape_gan(
    cfg: &TrainConfig,
    gan: &GanConfig,
    train: &Dataset,
    attacker: &mut BatchAttacker<'_>,
) -> Result<ApeGanOutcome> {
    cfg.validate()?;
    gan.validate()?;
    let channels = clip_channels(train)?;
    let mut init_rng = StreamRng::labeled(cfg.seed, "ape/init/generator");
    let mut generator = GeneratorG::new(channels, &mut init_rng);
    let mut init_rng = StreamRng::labeled(cfg.seed, "ape/init/discriminator");
    let mut discriminator = DiscriminatorD::new(channels, &mut init_rng);
    let g_shapes = generator.param_shapes();
    let d_shapes = discriminator.param_shapes();
    let mut opt_g = Optimizer::adam(gan.lr, 0.5, 0.999, 0.0, &g_shapes);
    let mut opt_d = Optimizer::adam(gan.lr, 0.5, 0.999, 0.0, &d_shapes);

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut order_rng = StreamRng::labeled(cfg.seed, &format!("ape/order/{epoch}"));
        order_rng.shuffle(&mut order);
        let n_batches = cfg
            .batches_per_epoch
            .unwrap_or(usize::MAX)
            .min(order.len().div_ceil(cfg.batch_size));

        let mut d_loss_sum = 0.0f64;
        let mut g_loss_sum = 0.0f64;
        let mut mse_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).take(n_batches).enumerate() {
            let (x, labels) = make_batch(&train.clips, chunk)?;
            let mut attack_rng =
                StreamRng::labeled(cfg.seed, &format!("ape/attack/{epoch}/{batch_idx}"));
            let (delta, eps) = attacker(epoch, batch_idx, &x, &labels, &mut attack_rng)?;
            verify_feasible(&x, &delta, eps)?;
            let x_adv = x.add(&delta)?;

            // D step: max log D(x) + log(1 - D(G(x_adv))), G frozen
            for _ in 0..gan.d_steps {
                let mut tape = Tape::new();
                let xc = tape.constant(x.clone());
                let xa = tape.constant(x_adv.clone());
                let d_bind = discriminator.bind(&mut tape, true);
                let g_bind = generator.bind(&mut tape, false);
                let ghat = generator.forward_bound(&mut tape, xa, &g_bind)?;
                let z_real = discriminator.forward_logits_bound(&mut tape, xc, &d_bind)?;
                let z_fake = discriminator.forward_logits_bound(&mut tape, ghat, &d_bind)?;
                let l_real = bce_real(&mut tape, z_real);
                let l_fake = bce_fake(&mut tape, z_fake);
                let loss = tape.add(l_real, l_fake)?;
                let v = tape.item_f64(loss);
                if !v.is_finite() {
                    return Err(CoreError::NumericFailure {
                        op: format!("discriminator loss (epoch {epoch}, batch {batch_idx})"),
                    });
                }
                d_loss_sum += v;
                tape.backward(loss)?;
                let grads = d_bind.grads(&tape, &d_shapes);
                opt_d.step(&mut discriminator.params_mut(), &grads)?;
            }

            // G step: min gamma1 * MSE + gamma2 * (-log D(G(x_adv))), D frozen
            for _ in 0..gan.g_steps {
                let mut tape = Tape::new();
                let xc = tape.constant(x.clone());
                let xa = tape.constant(x_adv.clone());
                let g_bind = generator.bind(&mut tape, true);
                let d_bind = discriminator.bind(&mut tape, false);
                let ghat = generator.forward_bound(&mut tape, xa, &g_bind)?;
                let l_mse = mse_loss(&mut tape, ghat, xc)?;
                let z_fake = discriminator.forward_logits_bound(&mut tape, ghat, &d_bind)?;
                let l_gan = bce_real(&mut tape, z_fake);
                let mse_w = tape.mul_scalar(l_mse, gan.gamma1);
                let gan_w = tape.mul_scalar(l_gan, gan.gamma2);
                let loss = tape.add(mse_w, gan_w)?;
                let v = tape.item_f64(loss);
                if !v.is_finite() {
                    return Err(CoreError::NumericFailure {
                        op: format!("generator loss (epoch {epoch}, batch {batch_idx})"),
                    });
                }
                g_loss_sum += v;
                mse_sum += tape.item_f64(l_mse);
                tape.backward(loss)?;
                let grads = g_bind.grads(&tape, &g_shapes);
                opt_g.step(&mut generator.params_mut(), &grads)?;
            }
            batches += 1;
        }
        let denom = (batches.max(1)) as f64;
        log.push(GanEpochLog {
            epoch,
            d_loss: d_loss_sum / (denom * gan.d_steps as f64),
            g_loss: g_loss_sum / (denom * gan.g_steps as f64),
            mse: mse_sum / (denom * gan.g_steps as f64),
        });
    }
    Ok(ApeGanOutcome {
        generator,
        discriminator,
        log,
    })
}

/// Adversarial training of the classifier behind a frozen generator: the
/// inner maximization differentiates through F(G(x + delta)) while only
/// theta_F is updated. `None` for the generator is the identity preprocessor
/// and reduces exactly to plain adversarial training.
pub fn at_frozen_generator(
    cfg: &TrainConfig,
    generator: Option<&GeneratorG>,
    spec: &AttackSpec,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    spec.validate()?;
    train_classifier(
        cfg,
        train,
        val,
        generator,
        &mut FixedAttack { spec: spec.clone() },
    )
}

#[derive(Debug, Clone)]
pub struct GatOutcome {
    pub classifier: ClassifierF,
    pub generator: GeneratorG,
    pub discriminator: DiscriminatorD,
    pub log: Vec<EpochLog>,
}

/// End-to-end generative adversarial training: per batch, the attack is
/// computed through F(G(.)), the discriminator takes its max step, then G and
/// F jointly minimize gamma1 * MSE + gamma2 * (-log D(G(x+delta))) + CE.
pub fn generative_at_end_to_end(
    cfg: &TrainConfig,
    gan: &GanConfig,
    spec: &AttackSpec,
    train: &Dataset,
    val: &Dataset,
) -> Result<GatOutcome> {
    cfg.validate()?;
    gan.validate()?;
    spec.validate()?;
    let channels = clip_channels(train)?;
    let mut rng = StreamRng::labeled(cfg.seed, "model/init");
    let mut classifier = ClassifierF::new(train.num_classes, channels, &mut rng);
    if let Some(params) = &cfg.init {
        classifier.set_params(params.clone())?;
    }
    let mut rng = StreamRng::labeled(cfg.seed, "gat/init/generator");
    let mut generator = GeneratorG::new(channels, &mut rng);
    let mut rng = StreamRng::labeled(cfg.seed, "gat/init/discriminator");
    let mut discriminator = DiscriminatorD::new(channels, &mut rng);

    let f_shapes = classifier.param_shapes();
    let g_shapes = generator.param_shapes();
    let d_shapes = discriminator.param_shapes();
    let mut opt_f = match cfg.optim.kind {
        OptimKind::SgdMomentum { momentum } => {
            Optimizer::sgd(cfg.optim.lr, momentum, cfg.optim.weight_decay, &f_shapes)
        }
        OptimKind::Adam { beta1, beta2, .. } => {
            Optimizer::adam(cfg.optim.lr, beta1, beta2, cfg.optim.weight_decay, &f_shapes)
        }
    };
    let mut opt_g = Optimizer::adam(gan.lr, 0.5, 0.999, 0.0, &g_shapes);
    let mut opt_d = Optimizer::adam(gan.lr, 0.5, 0.999, 0.0, &d_shapes);
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
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).take(n_batches).enumerate() {
            let (x, labels) = make_batch(&train.clips, chunk)?;
            // inner maximization through the composition
            let mut attack_rng =
                StreamRng::labeled(cfg.seed, &format!("train/attack/{epoch}/{batch_idx}"));
            let delta = {
                let composed = GenThenClassify {
                    generator: &generator,
                    classifier: &classifier,
                };
                attack_batch_delta(&composed, &x, &labels, spec, &mut attack_rng)?
            };
            verify_feasible(&x, &delta, spec.eps)?;
            let x_adv = x.add(&delta)?;

            // discriminator max step
            for _ in 0..gan.d_steps {
                let mut tape = Tape::new();
                let xc = tape.constant(x.clone());
                let xa = tape.constant(x_adv.clone());
                let d_bind = discriminator.bind(&mut tape, true);
                let g_bind = generator.bind(&mut tape, false);
                let ghat = generator.forward_bound(&mut tape, xa, &g_bind)?;
                let z_real = discriminator.forward_logits_bound(&mut tape, xc, &d_bind)?;
                let z_fake = discriminator.forward_logits_bound(&mut tape, ghat, &d_bind)?;
                let l_real = bce_real(&mut tape, z_real);
                let l_fake = bce_fake(&mut tape, z_fake);
                let loss = tape.add(l_real, l_fake)?;
                tape.backward(loss)?;
                let grads = d_bind.grads(&tape, &d_shapes);
                opt_d.step(&mut discriminator.params_mut(), &grads)?;
            }

            // joint G, F min step
            let mut tape = Tape::new();
            let xc = tape.constant(x.clone());
            let xa = tape.constant(x_adv.clone());
            let g_bind = generator.bind(&mut tape, true);
            let d_bind = discriminator.bind(&mut tape, false);
            let f_bind = classifier.bind(&mut tape, true);
            let ghat = generator.forward_bound(&mut tape, xa, &g_bind)?;
            let l_mse = mse_loss(&mut tape, ghat, xc)?;
            let z_fake = discriminator.forward_logits_bound(&mut tape, ghat, &d_bind)?;
            let l_gan = bce_real(&mut tape, z_fake);
            let logits = classifier.forward_bound(&mut tape, ghat, &f_bind)?;
            let logits_val = tape.value(logits).clone();
            let l_ce = tape.cross_entropy(logits, &labels)?;
            let mse_w = tape.mul_scalar(l_mse, gan.gamma1);
            let gan_w = tape.mul_scalar(l_gan, gan.gamma2);
            let reg = tape.add(mse_w, gan_w)?;
            let loss = tape.add(reg, l_ce)?;
            let v = tape.item_f64(loss);
            if !v.is_finite() {
                return Err(CoreError::NumericFailure {
                    op: format!("joint objective (epoch {epoch}, batch {batch_idx})"),
                });
            }
            loss_sum += tape.item_f64(l_ce) * labels.len() as f64;
            tape.backward(loss)?;
            let g_grads = g_bind.grads(&tape, &g_shapes);
            let f_grads = f_bind.grads(&tape, &f_shapes);
            opt_g.step(&mut generator.params_mut(), &g_grads)?;
            opt_f.step(&mut classifier.params_mut(), &f_grads)?;

            let k = classifier.num_classes;
            for (row, &y) in logits_val.data().chunks_exact(k).zip(&labels) {
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
        }

        let (val_acc, val_loss) =
            super::trainer::evaluate_clean(&classifier, Some(&generator), val, cfg.batch_size)?;
        if let Some(p) = plateau.as_mut() {
            if let Some(factor) = p.observe(val_loss) {
                opt_f.lr *= factor;
            }
        }
        log.push(EpochLog {
            epoch,
            train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
            val_acc,
            mean_loss: if seen == 0 { 0.0 } else { loss_sum / seen as f64 },
            val_loss,
            lr: opt_f.lr,
            sampled: Vec::new(),
        });
    }
    Ok(GatOutcome {
        classifier,
        generator,
        discriminator,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_moving_shapes, Split};

    fn tiny() -> (Dataset, Dataset, TrainConfig) {
        let train = generate_moving_shapes(21, Split::Train, 4, 3, 8, 16, 16).unwrap();
        let val = generate_moving_shapes(21, Split::Val, 2, 3, 8, 16, 16).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 6,
            batches_per_epoch: Some(2),
            optim: super::super::OptimSettings::sgd(0.05, 0.0),
            seed: 5,
            schedule: ScheduleMode::Constant,
            augment: None,
            init: None,
        };
        (train, val, cfg)
    }

    #[test]
    fn pure_denoising_mse_decreases_over_first_steps() {
        // gamma2 = 0: plain regression; MSE on a probe batch strictly drops
        let (train, _val, cfg) = tiny();
        let mut rng = StreamRng::new(1, 0);
        let victim = ClassifierF::new(3, 3, &mut rng);
        let spec = AttackSpec::pgd(8.0, 4.0, 2);
        let gan = GanConfig {
            gamma2: 0.0,
            lr: 1e-3,
            ..GanConfig::default()
        };
        let mut seeds_ok = 0;
        for seed in 0..3 {
            let cfg = TrainConfig {
                seed,
                epochs: 2,
                batches_per_epoch: Some(6),
                ..cfg.clone()
            };
            let mut attacker = pgd_attacker(&victim, spec.clone());
            let out = train_ape_gan(&cfg, &gan, &train, &mut attacker).unwrap();
            let first = out.log.first().unwrap().mse;
            let last = out.log.last().unwrap().mse;
            if last < first {
                seeds_ok += 1;
            }
        }
        assert!(seeds_ok >= 2, "MSE decreased in only {seeds_ok}/3 seeds");
    }

    #[test]
    fn generator_output_shape_matches_input() {
        let (train, _val, cfg) = tiny();
        let mut rng = StreamRng::new(2, 0);
        let victim = ClassifierF::new(3, 3, &mut rng);
        let mut attacker = pgd_attacker(&victim, AttackSpec::pgd(4.0, 4.0, 1));
        let out = train_ape_gan(&cfg, &GanConfig::default(), &train, &mut attacker).unwrap();
        let (x, _) = make_batch(&train.clips, &[0, 1]).unwrap();
        let y = out.generator.apply(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn identity_generator_reduces_to_plain_adversarial_training() {
        let (train, val, cfg) = tiny();
        let spec = AttackSpec::pgd(6.0, 3.0, 2);
        let plain = super::super::adversarial_train(&cfg, &spec, &train, &val).unwrap();
        let frozen = at_frozen_generator(&cfg, None, &spec, &train, &val).unwrap();
        for (a, b) in plain.model.params().iter().zip(frozen.model.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn frozen_generator_parameters_do_not_move() {
        let (train, val, cfg) = tiny();
        let mut rng = StreamRng::new(3, 0);
        let g = GeneratorG::new(3, &mut rng);
        let before: Vec<Vec<f32>> = g.params().iter().map(|p| p.data().to_vec()).collect();
        let spec = AttackSpec::pgd(6.0, 3.0, 1);
        at_frozen_generator(&cfg, Some(&g), &spec, &train, &val).unwrap();
        for (p, b) in g.params().iter().zip(&before) {
            assert_eq!(p.data(), b.as_slice());
        }
    }

    #[test]
    fn attack_through_generator_differs_from_attacking_classifier_alone() {
        // gradient flows through G: deltas (and losses) must differ on a
        // nontrivial generator
        let (train, _val, _cfg) = tiny();
        let mut rng = StreamRng::new(4, 0);
        let f = ClassifierF::new(3, 3, &mut rng);
        let mut grng = StreamRng::new(5, 0);
        let mut g = GeneratorG::new(3, &mut grng);
        // make G visibly non-identity
        for p in g.params_mut() {
            *p = p.map(|v| v * 3.0 + 0.01);
        }
        let (x, labels) = make_batch(&train.clips, &[0, 1, 2]).unwrap();
        let spec = AttackSpec::pgd(8.0, 4.0, 2);
        let mut r1 = StreamRng::new(6, 0);
        let direct = attack_batch_delta(&f, &x, &labels, &spec, &mut r1).unwrap();
        let mut r2 = StreamRng::new(6, 0);
        let composed = GenThenClassify {
            generator: &g,
            classifier: &f,
        };
        let through_g = attack_batch_delta(&composed, &x, &labels, &spec, &mut r2).unwrap();
        assert_ne!(direct.data(), through_g.data());
    }

    #[test]
    fn gat_with_zero_gammas_matches_ce_only_updates() {
        // gamma1 = gamma2 = 0 collapses the joint objective to CE through
        // F(G(x+delta)); all three parameter sets still advance
        let (train, val, cfg) = tiny();
        let gan = GanConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            ..GanConfig::default()
        };
        let spec = AttackSpec::pgd(6.0, 3.0, 1);
        let out = generative_at_end_to_end(&cfg, &gan, &spec, &train, &val).unwrap();
        let mut rng = StreamRng::labeled(cfg.seed, "gat/init/generator");
        let g0 = GeneratorG::new(3, &mut rng);
        let moved = out
            .generator
            .params()
            .iter()
            .zip(g0.params())
            .any(|(a, b)| a.data() != b.data());
        assert!(moved, "generator params did not move");
    }

    #[test]
    fn gat_one_step_changes_all_three_parameter_sets() {
        let (train, val, cfg) = tiny();
        let cfg = TrainConfig {
            batches_per_epoch: Some(1),
            ..cfg
        };
        let spec = AttackSpec::pgd(6.0, 3.0, 1);
        let out = generative_at_end_to_end(&cfg, &GanConfig::default(), &spec, &train, &val).unwrap();
        let mut rng = StreamRng::labeled(cfg.seed, "model/init");
        let f0 = ClassifierF::new(3, 3, &mut rng);
        let mut rng = StreamRng::labeled(cfg.seed, "gat/init/generator");
        let g0 = GeneratorG::new(3, &mut rng);
        let mut rng = StreamRng::labeled(cfg.seed, "gat/init/discriminator");
        let d0 = DiscriminatorD::new(3, &mut rng);
        assert!(out.classifier.params().iter().zip(f0.params()).any(|(a, b)| a.data() != b.data()));
        assert!(out.generator.params().iter().zip(g0.params()).any(|(a, b)| a.data() != b.data()));
        assert!(out
            .discriminator
            .params()
            .iter()
            .zip(d0.params())
            .any(|(a, b)| a.data() != b.data()));
    }
}
