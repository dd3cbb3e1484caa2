//! Flickering attack: a perturbation that is constant over space but varies
//! per frame and channel, optimized to minimize the margin loss plus
//! thickness and roughness regularizers.

use super::AttackResult;
use crate::error::{CoreError, Result};
use crate::nn::AttackTarget;
use crate::tensor::{Tape, Tensor};

/// Per-(frame, channel) admissible offset interval: the ball bound
/// intersected with what keeps every pixel of that frame-channel in [0, 1].
/// Clamping to this interval preserves the spatial-constancy invariant.
fn offset_bounds(x: &Tensor, eps01: f32) -> (Vec<f32>, Vec<f32>) {
    let s = x.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut lo = vec![f32::NEG_INFINITY; t * c];
    let mut hi = vec![f32::INFINITY; t * c];
    for ti in 0..t {
        for ci in 0..c {
            let mut mn = f32::INFINITY;
            let mut mx = f32::NEG_INFINITY;
            for hw in 0..h * w {
                let v = x.data()[(ti * h * w + hw) * c + ci];
                mn = mn.min(v);
                mx = mx.max(v);
            }
            let mut l = (-eps01).max(-mn);
            let mut u = eps01.min(1.0 - mx);
            // one-ulp fixups against f32 rounding at the extremes
            while mx + u > 1.0 {
                u = f32::from_bits(u.to_bits() - 1);
            }
            while mn + l < 0.0 {
                l = if l < 0.0 {
                    f32::from_bits(l.to_bits() - 1) // toward zero for negatives
                } else {
                    f32::from_bits(l.to_bits() + 1)
                };
            }
            if l > u {
                l = 0.0;
                u = 0.0;
            }
            lo[ti * c + ci] = l;
            hi[ti * c + ci] = u;
        }
    }
    (lo, hi)
}

/// Gradient descent on lambda * (beta1 * D_thick + beta2 * D_rough) + L_cw
/// over per-(frame, channel) offsets. The step size is in 8-bit units and the
/// gradient is L-infinity normalized per step.
#[allow(clippy::too_many_arguments)]
pub fn flicker_attack(
    target: &dyn AttackTarget,
    clip: &Tensor,
    label: usize,
    lambda: f32,
    beta1: f32,
    beta2: f32,
    steps: usize,
    step_size: f32,
    margin: f32,
    eps: f32,
) -> Result<AttackResult> {
    let s = clip.shape().to_vec();
    if s.len() != 4 {
        return Err(CoreError::shape(
            "flicker_attack",
            format!("expected (T,H,W,C), got {:?}", s),
        ));
    }
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let eps01 = eps / 255.0;
    let step01 = step_size / 255.0;
    let (lo, hi) = offset_bounds(clip, eps01);

    let mut offsets = Tensor::zeros(&[t, c]);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut clean_pred = 0usize;
    let mut final_pred = 0usize;

    for step in 0..=steps {
        let mut tape = Tape::new();
        let off = tape.leaf(offsets.clone(), true);
        let broad = tape.broadcast_tc(off, h, w)?;
        let xc = tape.constant(clip.clone());
        let xa = tape.add(xc, broad)?;
        let xb = tape.reshape(xa, &[1, t, h, w, c])?;
        let z = target.logits(&mut tape, xb)?;
        let lcw = tape.cw_margin(z, &[label], margin)?;
        let pred = {
            let logits = tape.value(z);
            logits
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        if step == 0 {
            clean_pred = pred;
        }
        final_pred = pred;

        // regularizers on the offset parameterization
        let sq = tape.mul(off, off)?;
        let thick = tape.mean_all(sq);
        let rough = if t >= 2 {
            let a = tape.slice_frames(off, 1, t - 1)?;
            let b = tape.slice_frames(off, 0, t - 1)?;
            let d = tape.sub(a, b)?;
            let dsq = tape.mul(d, d)?;
            tape.mean_all(dsq)
        } else {
            let zero = tape.constant(Tensor::scalar(0.0));
            tape.mul_scalar(zero, 0.0)
        };
        let thick_w = tape.mul_scalar(thick, lambda * beta1);
        let rough_w = tape.mul_scalar(rough, lambda * beta2);
        let reg = tape.add(thick_w, rough_w)?;
        let total = tape.add(reg, lcw)?;
        let total_val = tape.item_f64(total);
        if !total_val.is_finite() {
            return Err(CoreError::NumericFailure {
                op: "flicker objective".to_string(),
            });
        }
        trace.push(total_val);
        if step == steps {
            break;
        }

        tape.backward(total)?;
        let g = match tape.grad(off) {
            Some(g) => g.clone(),
            None => break,
        };
        let gmax = g.max_abs();
        if gmax == 0.0 {
            break;
        }
        let scale = step01 / gmax;
        for ((o, &gv), (&l, &u)) in offsets
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(lo.iter().zip(&hi))
        {
            *o = (*o - scale * gv).clamp(l, u);
        }
    }

    // materialize the broadcast perturbation
    let mut delta = vec![0.0f32; t * h * w * c];
    for ti in 0..t {
        for hw in 0..h * w {
            let dst = (ti * h * w + hw) * c;
            delta[dst..dst + c].copy_from_slice(&offsets.data()[ti * c..(ti + 1) * c]);
        }
    }
    Ok(AttackResult {
        delta: Tensor::from_vec(&s, delta)?,
        loss_trace: trace,
        success: final_pred != clean_pred,
        steps_used: steps,
        frames_perturbed: None,
    })
}
