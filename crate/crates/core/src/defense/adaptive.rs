//! Adaptive adversarial training: the attack budget (or attack type) is
//! sampled from a loss-proportional distribution that is refreshed every few
//! epochs from a probe pass.

use super::trainer::{train_classifier, AttackProvider};
use super::{AlphaRule, TrainConfig, TrainOutcome};
use crate::attacks::{attack_batch_delta, AttackSpec};
use crate::data::{make_batch, Dataset};
use crate::error::{CoreError, Result};
use crate::nn::{per_clip_cross_entropy, ClassifierF, GenThenClassify, GeneratorG};
use crate::rng::StreamRng;
use crate::tensor::Tape;

/// Floor applied after normalization so no arm starves permanently.
const PROB_FLOOR_SCALE: f64 = 0.01;

/// Normalize accumulated per-arm losses into sampling probabilities:
/// P(i) = loss_i / sum_j loss_j, with a uniform fallback when every
/// accumulated loss is zero.
pub fn update_budget_distribution(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(CoreError::invalid("update_budget_distribution", "empty loss vector"));
    }
    if losses.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(CoreError::invalid(
            "update_budget_distribution",
            "losses must be finite and nonnegative",
        ));
    }
    let total: f64 = losses.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / losses.len() as f64; losses.len()]);
    }
    Ok(losses.iter().map(|&l| l / total).collect())
}

/// Inverse-CDF sample from a probability vector.
pub fn sample_budget(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u = rng.uniform01() as f64;
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// A discrete distribution over attack budgets (or attack types) together
/// with its update period.
#[derive(Debug, Clone)]
pub struct BudgetDistribution {
    /// Arm labels: budget values for AAT, variant names for the type variant.
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
    /// Update period xi in epochs.
    pub update_period: usize,
}

impl BudgetDistribution {
    pub fn uniform(labels: Vec<String>, update_period: usize) -> BudgetDistribution {
        let n = labels.len().max(1);
        BudgetDistribution {
            labels,
            probs: vec![1.0 / n as f64; n],
            update_period,
        }
    }

    /// Random initialization (normalized positive draws).
    pub fn random_init(
        labels: Vec<String>,
        update_period: usize,
        rng: &mut StreamRng,
    ) -> BudgetDistribution {
        let n = labels.len().max(1);
        let draws: Vec<f64> = (0..n).map(|_| rng.uniform(0.05, 1.0) as f64).collect();
        let total: f64 = draws.iter().sum();
        BudgetDistribution {
            labels,
            probs: draws.into_iter().map(|d| d / total).collect(),
            update_period,
        }
    }

    /// Refresh from accumulated losses, then apply the starvation floor
    /// 0.01/|E| and renormalize.
    pub fn update_from_losses(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.probs.len() {
            return Err(CoreError::invalid(
                "update_from_losses",
                format!("{} losses for {} arms", losses.len(), self.probs.len()),
            ));
        }
        let mut p = update_budget_distribution(losses)?;
        let floor = PROB_FLOOR_SCALE / p.len() as f64;
        for v in &mut p {
            *v = v.max(floor);
        }
        let total: f64 = p.iter().sum();
        for v in &mut p {
            *v /= total;
        }
        self.probs = p;
        Ok(())
    }

    pub fn sample(&self, rng: &mut StreamRng) -> usize {
        sample_budget(&self.probs, rng)
    }
}

/// The arms the adaptive sampler chooses from.
enum Arms {
    Budgets { eps_set: Vec<f32>, alpha: AlphaRule, steps: usize },
    Types(Vec<AttackSpec>),
}

impl Arms {
    fn len(&self) -> usize {
        match self {
            Arms::Budgets { eps_set, .. } => eps_set.len(),
            Arms::Types(specs) => specs.len(),
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            Arms::Budgets { eps_set, .. } => eps_set.iter().map(|e| format!("{e}")).collect(),
            Arms::Types(specs) => specs.iter().map(|s| s.variant.name().to_string()).collect(),
        }
    }

    fn spec(&self, idx: usize) -> AttackSpec {
        match self {
            Arms::Budgets {
                eps_set,
                alpha,
                steps,
            } => AttackSpec::pgd(eps_set[idx], alpha.alpha(eps_set[idx]), *steps),
            Arms::Types(specs) => specs[idx].clone(),
        }
    }
}

struct AdaptiveProvider<'a> {
    arms: Arms,
    dist: BudgetDistribution,
    period: usize,
    probe: &'a Dataset,
    probe_size: usize,
    batch_size: usize,
    seed: u64,
    /// (epoch, probabilities) snapshots after each refresh.
    history: Vec<(usize, Vec<f64>)>,
}

impl AdaptiveProvider<'_> {
    /// Accumulated adversarial loss per arm over the fixed probe subset.
    fn probe_losses(
        &self,
        epoch: usize,
        model: &ClassifierF,
        pre: Option<&GeneratorG>,
    ) -> Result<Vec<f64>> {
        let n = self.probe.len().min(self.probe_size);
        let idxs: Vec<usize> = (0..n).collect();
        let mut losses = vec![0.0f64; self.arms.len()];
        for (ai, loss_acc) in losses.iter_mut().enumerate() {
            let spec = self.arms.spec(ai);
            for (ci, chunk) in idxs.chunks(self.batch_size).enumerate() {
                let (x, labels) = make_batch(&self.probe.clips, chunk)?;
                let mut rng = StreamRng::labeled(
                    self.seed,
                    &format!("aat/probe/{epoch}/{ai}/{ci}"),
                );
                let delta = match pre {
                    None => attack_batch_delta(model, &x, &labels, &spec, &mut rng)?,
                    Some(g) => {
                        let composed = GenThenClassify {
                            generator: g,
                            classifier: model,
                        };
                        attack_batch_delta(&composed, &x, &labels, &spec, &mut rng)?
                    }
                };
                let x_adv = x.add(&delta)?;
                let mut tape = Tape::new();
                let mut h = tape.constant(x_adv);
                if let Some(g) = pre {
                    h = g.forward(&mut tape, h, false)?.0;
                }
                let (z, _) = model.forward(&mut tape, h, false)?;
                let per_clip = per_clip_cross_entropy(tape.value(z), &labels)?;
                *loss_acc += per_clip.iter().sum::<f64>();
            }
        }
        Ok(losses)
    }
}

impl AttackProvider for AdaptiveProvider<'_> {
    fn batch_delta(
        &mut self,
        _epoch: usize,
        _batch_idx: usize,
        model: &ClassifierF,
        pre: Option<&GeneratorG>,
        x: &crate::tensor::Tensor,
        labels: &[usize],
        rng: &mut StreamRng,
    ) -> Result<Option<(crate::tensor::Tensor, f32, String)>> {
        let mut sample_rng = rng.fork("sample");
        let idx = self.dist.sample(&mut sample_rng);
        let spec = self.arms.spec(idx);
        if spec.eps == 0.0 || spec.steps == 0 {
            return Ok(Some((
                crate::tensor::Tensor::zeros(x.shape()),
                0.0,
                self.dist.labels[idx].clone(),
            )));
        }
        let mut attack_rng = rng.fork("attack");
        let delta = match pre {
            None => attack_batch_delta(model, x, labels, &spec, &mut attack_rng)?,
            Some(g) => {
                let composed = GenThenClassify {
                    generator: g,
                    classifier: model,
                };
                attack_batch_delta(&composed, x, labels, &spec, &mut attack_rng)?
            }
        };
        Ok(Some((delta, spec.eps, self.dist.labels[idx].clone())))
    }

    fn epoch_end(
        &mut self,
        epoch: usize,
        model: &ClassifierF,
        pre: Option<&GeneratorG>,
    ) -> Result<()> {
        // Algorithm schedule: refresh when k mod min(xi, K/|E|) == 0, k = 1-based
        if (epoch + 1) % self.period != 0 {
            return Ok(());
        }
        let losses = self.probe_losses(epoch, model, pre)?;
        self.dist.update_from_losses(&losses)?;
        self.history.push((epoch, self.dist.probs.clone()));
        Ok(())
    }
}

fn run_adaptive(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    arms: Arms,
    xi: usize,
    probe_size: usize,
) -> Result<TrainOutcome> {
    if arms.len() == 0 {
        return Err(CoreError::invalid("adaptive_at", "empty budget/type set"));
    }
    let period = xi
        .min((cfg.epochs / arms.len()).max(1))
        .max(1);
    let mut init_rng = StreamRng::labeled(cfg.seed, "aat/init");
    let dist = BudgetDistribution::random_init(arms.labels(), period, &mut init_rng);
    let mut provider = AdaptiveProvider {
        arms,
        dist,
        period,
        probe: val,
        probe_size,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        history: Vec::new(),
    };
    train_classifier(cfg, train, val, None, &mut provider)
}

/// Adaptive AT over a set of attack budgets with step-size map A(eps).
/// The distribution refreshes every min(xi, K/|E|) epochs from a probe pass
/// over the first `probe_size` validation clips.
pub fn adaptive_at(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    eps_set: &[f32],
    alpha: AlphaRule,
    steps: usize,
    xi: usize,
    probe_size: usize,
) -> Result<TrainOutcome> {
    run_adaptive(
        cfg,
        train,
        val,
        Arms::Budgets {
            eps_set: eps_set.to_vec(),
            alpha,
            steps,
        },
        xi,
        probe_size,
    )
}

/// Adaptive AT over a set of attack types (masked PGD, frame border,
/// saliency variants, ...), same schedule as the budget form.
pub fn adaptive_attack_type_at(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    type_set: &[AttackSpec],
    xi: usize,
    probe_size: usize,
) -> Result<TrainOutcome> {
    for s in type_set {
        s.validate()?;
    }
    run_adaptive(cfg, train, val, Arms::Types(type_set.to_vec()), xi, probe_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_example() {
        let p = update_budget_distribution(&[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(p, vec![0.25, 0.25, 0.5]);
    }

    #[test]
    fn equal_losses_give_uniform() {
        let p = update_budget_distribution(&[3.0, 3.0, 3.0, 3.0]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn all_zero_losses_fall_back_to_uniform() {
        let p = update_budget_distribution(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn normalization_matches_oracle_to_1e12() {
        let mut rng = StreamRng::new(71, 0);
        let losses: Vec<f64> = (0..7).map(|_| rng.uniform(0.0, 10.0) as f64).collect();
        let p = update_budget_distribution(&losses).unwrap();
        let total: f64 = losses.iter().sum();
        for (pi, li) in p.iter().zip(&losses) {
            assert!((pi - li / total).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn largest_loss_gets_largest_probability() {
        let mut d = BudgetDistribution::uniform(vec!["a".into(), "b".into(), "c".into()], 10);
        d.update_from_losses(&[0.5, 3.0, 1.0]).unwrap();
        assert!(d.probs[1] > d.probs[2] && d.probs[2] > d.probs[0]);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn floor_keeps_every_arm_alive() {
        let mut d = BudgetDistribution::uniform(vec!["a".into(), "b".into()], 10);
        d.update_from_losses(&[1e9, 1e-12]).unwrap();
        assert!(d.probs[1] >= 0.01 / 2.0 * 0.99);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_distribution_always_samples_first() {
        let mut rng = StreamRng::new(72, 0);
        let p = [1.0, 0.0, 0.0];
        for _ in 0..100 {
            assert_eq!(sample_budget(&p, &mut rng), 0);
        }
    }

    #[test]
    fn uniform_sampling_frequencies_within_three_sigma() {
        let mut rng = StreamRng::new(73, 0);
        let n_arms = 5;
        let p = vec![1.0 / n_arms as f64; n_arms];
        let draws = 100_000usize;
        let mut counts = vec![0usize; n_arms];
        for _ in 0..draws {
            counts[sample_budget(&p, &mut rng)] += 1;
        }
        // binomial bound: 3 sigma around draws/n_arms
        let mean = draws as f64 / n_arms as f64;
        let sigma = (draws as f64 * (1.0 / n_arms as f64) * (1.0 - 1.0 / n_arms as f64)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() < 3.0 * sigma,
                "arm {i}: {c} vs {mean} +/- {sigma}"
            );
        }
    }

    #[test]
    fn fixed_rng_reproduces_the_sample_sequence() {
        let p = [0.2, 0.3, 0.5];
        let seq = |seed| {
            let mut rng = StreamRng::new(seed, 4);
            (0..32).map(|_| sample_budget(&p, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
        assert_ne!(seq(9), seq(10));
    }
}
