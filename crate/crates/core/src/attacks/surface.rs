//! Adversarial loss surfaces over (step size, iteration count) and the
//! linear fit of the optimal step size against the attack budget.

use super::pgd::{pgd_batch, PgdReturn};
use crate::error::{CoreError, Result};
use crate::nn::AttackTarget;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Mean adversarial loss over a batch at every (alpha, M) grid point for a
/// fixed budget.
#[derive(Debug, Clone)]
pub struct LossSurface {
    pub eps: f32,
    pub alphas: Vec<f32>,
    pub steps: Vec<usize>,
    /// Row-major [alpha][step].
    pub mean_loss: Vec<f64>,
}

impl LossSurface {
    pub fn loss_at(&self, ai: usize, mi: usize) -> f64 {
        self.mean_loss[ai * self.steps.len() + mi]
    }
}

/// Sweep PGD over the alpha grid, recording the mean loss at each step count.
/// One PGD run per alpha covers every M in the grid via its loss trace.
pub fn loss_surface(
    target: &dyn AttackTarget,
    x: &Tensor,
    labels: &[usize],
    eps: f32,
    alpha_grid: &[f32],
    m_grid: &[usize],
) -> Result<LossSurface> {
    if alpha_grid.is_empty() || m_grid.is_empty() {
        return Err(CoreError::invalid("loss_surface", "empty grid"));
    }
    let mut alphas = alpha_grid.to_vec();
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut steps = m_grid.to_vec();
    steps.sort_unstable();
    let m_max = *steps.last().unwrap();
    let b = labels.len() as f64;

    let mut mean_loss = vec![0.0f64; alphas.len() * steps.len()];
    for (ai, &alpha) in alphas.iter().enumerate() {
        let mut rng = StreamRng::new(0, 0);
        let outcome = pgd_batch(
            target, x, labels, eps, alpha, m_max, None, false, PgdReturn::Final, &mut rng,
        )?;
        for (mi, &m) in steps.iter().enumerate() {
            let mean = outcome.traces.iter().map(|tr| tr[m]).sum::<f64>() / b;
            mean_loss[ai * steps.len() + mi] = mean;
        }
    }
    Ok(LossSurface {
        eps,
        alphas,
        steps,
        mean_loss,
    })
}

/// The step size maximizing loss at the largest M; ties break toward the
/// smaller alpha.
pub fn optimal_alpha(surface: &LossSurface) -> f32 {
    let last_m = surface.steps.len() - 1;
    let mut best_a = surface.alphas[0];
    let mut best_loss = f64::NEG_INFINITY;
    for (ai, &alpha) in surface.alphas.iter().enumerate() {
        let l = surface.loss_at(ai, last_m);
        if l > best_loss {
            best_loss = l;
            best_a = alpha;
        }
    }
    best_a
}

/// Ordinary least squares of alpha-hat against epsilon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_alpha_vs_eps(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(CoreError::DegenerateFit(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(CoreError::DegenerateFit(
            "all budgets are identical".to_string(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|&(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
    })
}
