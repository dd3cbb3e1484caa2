//! Frame saliency attacks: rank frames by input-gradient mass, then perturb
//! everything at once (one-shot) or frame by frame until the prediction flips.

use super::pgd::{pgd_batch, PgdReturn};
use super::{fgsm, AttackResult, PerturbationSupport};
use crate::error::{CoreError, Result};
use crate::nn::AttackTarget;
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor};

/// Per-frame saliency: L1 norm of the cross-entropy gradient w.r.t. each
/// frame of the clip.
pub fn saliency_scores(
    target: &dyn AttackTarget,
    clip: &Tensor,
    label: usize,
) -> Result<Vec<f64>> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(CoreError::shape(
            "saliency_scores",
            format!("expected (T,H,W,C), got {:?}", s),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(clip.reshaped(&[1, s[0], s[1], s[2], s[3]])?, true);
    let z = target.logits(&mut tape, x)?;
    let ce = tape.cross_entropy(z, &[label])?;
    tape.backward(ce)?;
    let frame_len = s[1] * s[2] * s[3];
    match tape.grad(x) {
        None => Ok(vec![0.0; s[0]]),
        Some(g) => Ok(g
            .data()
            .chunks_exact(frame_len)
            .map(|frame| frame.iter().map(|&v| v.abs() as f64).sum())
            .collect()),
    }
}

/// One-shot variant: a single signed step of magnitude eps applied to all
/// frames simultaneously (FGSM with full support).
pub fn frame_saliency_oneshot(
    target: &dyn AttackTarget,
    clip: &Tensor,
    label: usize,
    eps: f32,
) -> Result<AttackResult> {
    fgsm(target, clip, label, eps, &PerturbationSupport::Full)
}

/// Iterative variant: frames ranked once by decreasing saliency, then
/// perturbed one at a time (inner_steps of PGD each) until the network is
/// fooled. Earlier frames keep their perturbation as later ones are attacked.
pub fn frame_saliency_iterative(
    target: &dyn AttackTarget,
    clip: &Tensor,
    label: usize,
    eps: f32,
    alpha: f32,
    inner_steps: usize,
) -> Result<AttackResult> {
    if inner_steps == 0 {
        return Err(CoreError::invalid(
            "frame_saliency_iterative",
            "inner_steps must be >= 1",
        ));
    }
    let s = clip.shape().to_vec();
    if s.len() != 4 {
        return Err(CoreError::shape(
            "frame_saliency_iterative",
            format!("expected (T,H,W,C), got {:?}", s),
        ));
    }
    let t_len = s[0];
    let x = clip.reshaped(&[1, s[0], s[1], s[2], s[3]])?;
    let mut rng = StreamRng::new(0, 0);

    // rank frames once, ties toward the earlier frame
    let scores = saliency_scores(target, clip, label)?;
    let mut order: Vec<usize> = (0..t_len).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    // already-misclassified inputs need no perturbation at all
    let clean_probe =
        pgd_batch(target, &x, &[label], 0.0, 0.0, 0, None, false, PgdReturn::Final, &mut rng)?;
    let clean_pred = clean_probe.clean_preds[0];
    let mut trace = vec![clean_probe.traces[0][0]];
    if clean_pred != label {
        return Ok(AttackResult {
            delta: Tensor::zeros(&s),
            loss_trace: trace,
            success: false,
            steps_used: 0,
            frames_perturbed: Some(Vec::new()),
        });
    }

    let mut delta = Tensor::zeros(x.shape());
    let mut perturbed = Vec::new();
    let mut fooled = false;
    let mut final_pred = clean_pred;
    for &frame in &order {
        let mask = PerturbationSupport::Frames(vec![frame])
            .mask(s[0], s[1], s[2], s[3])?
            .reshaped(x.shape())?;
        // attack continues from the accumulated delta
        let x_curr = x.add(&delta)?;
        let outcome = pgd_batch(
            target,
            &x_curr,
            &[label],
            eps,
            alpha,
            inner_steps,
            Some(&mask),
            false,
            PgdReturn::Final,
            &mut rng,
        )?;
        // outcome.delta is relative to x_curr and zero off this frame;
        // fold it in and re-project against the original clip
        delta = delta.add(&outcome.delta)?;
        super::project::project_slice(delta.data_mut(), x.data(), eps / 255.0);
        trace.extend(outcome.traces[0].iter().skip(1));
        perturbed.push(frame);
        final_pred = outcome.preds[0];
        if final_pred != label {
            fooled = true;
            break;
        }
    }
    let _ = fooled;
    Ok(AttackResult {
        delta: delta.reshaped(&s)?,
        loss_trace: trace,
        success: final_pred != clean_pred,
        steps_used: perturbed.len() * inner_steps,
        frames_perturbed: Some(perturbed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ClassifierF;
    use crate::rng::StreamRng;

    fn toy_model_and_clip() -> (ClassifierF, Tensor) {
        let mut rng = StreamRng::new(41, 0);
        let f = ClassifierF::new(4, 3, &mut rng);
        let mut xr = StreamRng::new(42, 0);
        let clip = Tensor::rand_uniform(&[8, 8, 8, 3], 0.1, 0.9, &mut xr);
        (f, clip)
    }

    #[test]
    fn constant_model_has_zero_scores() {
        let mut rng = StreamRng::new(43, 0);
        let mut f = ClassifierF::new(4, 3, &mut rng);
        // zero every parameter: logits are constant in the input
        for p in f.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        let mut xr = StreamRng::new(44, 0);
        let clip = Tensor::rand_uniform(&[8, 8, 8, 3], 0.1, 0.9, &mut xr);
        let scores = saliency_scores(&f, &clip, 1).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn scores_match_bruteforce_per_frame_norms() {
        let (f, clip) = toy_model_and_clip();
        let scores = saliency_scores(&f, &clip, 2).unwrap();
        // brute force: full gradient, then per-frame loop
        let s = clip.shape();
        let mut tape = Tape::new();
        let x = tape.leaf(clip.reshaped(&[1, s[0], s[1], s[2], s[3]]).unwrap(), true);
        let z = f.logits(&mut tape, x).unwrap();
        let ce = tape.cross_entropy(z, &[2]).unwrap();
        tape.backward(ce).unwrap();
        let g = tape.grad(x).unwrap();
        let frame_len = s[1] * s[2] * s[3];
        for (t, &score) in scores.iter().enumerate() {
            let want: f64 = g.data()[t * frame_len..(t + 1) * frame_len]
                .iter()
                .map(|&v| v.abs() as f64)
                .sum();
            assert!((score - want).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbed_frames_are_a_prefix_of_the_ranking() {
        let (f, clip) = toy_model_and_clip();
        let label = crate::nn::predict(&f, &clip.reshaped(&[1, 8, 8, 8, 3]).unwrap()).unwrap()[0];
        let res = frame_saliency_iterative(&f, &clip, label, 8.0, 2.0, 2).unwrap();
        let scores = saliency_scores(&f, &clip, label).unwrap();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let perturbed = res.frames_perturbed.unwrap();
        assert_eq!(&order[..perturbed.len()], &perturbed[..]);
    }

    #[test]
    fn misclassified_input_is_left_alone() {
        let (f, clip) = toy_model_and_clip();
        let pred = crate::nn::predict(&f, &clip.reshaped(&[1, 8, 8, 8, 3]).unwrap()).unwrap()[0];
        let wrong_label = (pred + 1) % 4;
        let res = frame_saliency_iterative(&f, &clip, wrong_label, 8.0, 2.0, 2).unwrap();
        assert_eq!(res.frames_perturbed.unwrap().len(), 0);
        assert!(res.delta.data().iter().all(|&v| v == 0.0));
        assert_eq!(res.steps_used, 0);
    }
}
