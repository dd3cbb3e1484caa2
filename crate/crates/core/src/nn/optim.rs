//! SGD-with-momentum and Adam, plus the plateau learning-rate schedule.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    SgdMomentum { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

/// Optimizer state: per-parameter moment buffers advance with each step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f32,
    pub weight_decay: f32,
    pub step_count: u64,
    pub m1: Vec<Tensor>,
    pub m2: Vec<Tensor>,
}

impl Optimizer {
    pub fn sgd(lr: f32, momentum: f32, weight_decay: f32, shapes: &[Vec<usize>]) -> Optimizer {
        Optimizer {
            kind: OptimKind::SgdMomentum { momentum },
            lr,
            weight_decay,
            step_count: 0,
            m1: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            m2: Vec::new(),
        }
    }

    /// Adam with the usual eps = 1e-8.
    pub fn adam(
        lr: f32,
        beta1: f32,
        beta2: f32,
        weight_decay: f32,
        shapes: &[Vec<usize>],
    ) -> Optimizer {
        Optimizer {
            kind: OptimKind::Adam {
                beta1,
                beta2,
                eps: 1e-8,
            },
            lr,
            weight_decay,
            step_count: 0,
            m1: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            m2: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over all parameters. Gradients are paired positionally.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m1.len() {
            return Err(CoreError::invalid(
                "optimizer_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m1.len()
                ),
            ));
        }
        self.step_count += 1;
        match self.kind {
            OptimKind::SgdMomentum { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.m1) {
                    if p.shape() != g.shape() {
                        return Err(CoreError::shape(
                            "optimizer_step",
                            format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                        ));
                    }
                    for ((pv, &gv), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut())
                    {
                        let g_eff = gv + self.weight_decay * *pv;
                        *vv = momentum * *vv + g_eff;
                        *pv -= self.lr * *vv;
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as f64;
                let c1 = 1.0 / (1.0 - (beta1 as f64).powf(t)) as f32;
                let c2 = 1.0 / (1.0 - (beta2 as f64).powf(t)) as f32;
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m1)
                    .zip(&mut self.m2)
                {
                    if p.shape() != g.shape() {
                        return Err(CoreError::shape(
                            "optimizer_step",
                            format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                        ));
                    }
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let g_eff = gv + self.weight_decay * *pv;
                        *mv = beta1 * *mv + (1.0 - beta1) * g_eff;
                        *vv = beta2 * *vv + (1.0 - beta2) * g_eff * g_eff;
                        let mhat = *mv * c1;
                        let vhat = *vv * c2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Multiply the learning rate by `factor` when the validation loss has not
/// improved for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f32,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f32) -> PlateauScheduler {
        PlateauScheduler {
            patience,
            factor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feed one epoch's validation loss; returns the decay factor to apply
    /// when the plateau criterion fires.
    pub fn observe(&mut self, val_loss: f64) -> Option<f32> {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return None;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            Some(self.factor)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step_decreases_param_by_lr() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.0, &[vec![1]]);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_without_weight_decay_is_a_noop() {
        let mut p = Tensor::from_vec(&[2], vec![0.3, -0.4]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut opt = Optimizer::sgd(0.5, 0.9, 0.0, &[vec![2]]);
        opt.step(&mut [&mut p], &[g.clone()]).unwrap();
        assert_eq!(p.data(), &[0.3, -0.4]);
        let mut opt = Optimizer::adam(0.5, 0.9, 0.999, 0.0, &[vec![2]]);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data(), &[0.3, -0.4]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // bias correction makes the first update ~lr regardless of |g|
        for gval in [1e-3f32, 1.0, 250.0] {
            let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
            let g = Tensor::from_vec(&[1], vec![gval]).unwrap();
            let mut opt = Optimizer::adam(0.01, 0.9, 0.999, 0.0, &[vec![1]]);
            opt.step(&mut [&mut p], &[g]).unwrap();
            // hand-computed: mhat = g, vhat = g^2, update = lr * g / (|g| + eps)
            let expect = -0.01 * gval / (gval.abs() + 1e-8);
            assert!(
                (p.data()[0] - expect).abs() < 1e-6,
                "g={gval} p={}",
                p.data()[0]
            );
            assert!((p.data()[0].abs() - 0.01).abs() < 1e-4);
        }
    }

    #[test]
    fn plateau_fires_after_patience_epochs() {
        let mut s = PlateauScheduler::new(3, 0.1);
        assert_eq!(s.observe(1.0), None);
        assert_eq!(s.observe(1.1), None);
        assert_eq!(s.observe(1.2), None);
        assert_eq!(s.observe(1.3), Some(0.1));
        // improvement resets the counter
        assert_eq!(s.observe(0.5), None);
        assert_eq!(s.observe(0.6), None);
    }
}
