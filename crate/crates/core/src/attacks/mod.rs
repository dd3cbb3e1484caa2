//! Attack generation: FGSM, PGD and its video-specific variants (masked
//! patch, frame border, frame saliency, flickering), plus the loss-surface
//! analysis used to tune the step size.
//!
//! Budgets and step sizes are specified in 8-bit pixel units and divided by
//! 255 internally; clips live in [0, 1].

mod flicker;
mod pgd;
mod project;
mod saliency;
mod surface;

pub use flicker::flicker_attack;
pub use pgd::{
    border_thickness, fgsm, frame_border_attack, masked_pgd, patch_dims, pgd_batch, pgd_linf,
    BatchAttackOutcome, PgdReturn,
};
pub use project::{project_linf, project_slice};
pub use saliency::{frame_saliency_iterative, frame_saliency_oneshot, saliency_scores};
pub use surface::{fit_alpha_vs_eps, loss_surface, optimal_alpha, LinearFit, LossSurface};

use crate::error::{CoreError, Result};
use crate::nn::AttackTarget;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Attack family. Variant-specific parameters ride along with the tag.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackVariant {
    /// No perturbation; the epsilon = 0 evaluation column.
    Clean,
    Fgsm,
    Pgd,
    MaskedPgd {
        ratio: f32,
    },
    FrameBorder {
        ratio: f32,
    },
    SaliencyOneshot,
    SaliencyIterative {
        inner_steps: usize,
    },
    Flicker {
        lambda: f32,
        beta1: f32,
        beta2: f32,
        margin: f32,
    },
}

impl AttackVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AttackVariant::Clean => "clean",
            AttackVariant::Fgsm => "fgsm",
            AttackVariant::Pgd => "pgd",
            AttackVariant::MaskedPgd { .. } => "masked-pgd",
            AttackVariant::FrameBorder { .. } => "frame-border",
            AttackVariant::SaliencyOneshot => "saliency-oneshot",
            AttackVariant::SaliencyIterative { .. } => "saliency-iterative",
            AttackVariant::Flicker { .. } => "flicker",
        }
    }
}

/// Full description of one attack configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub variant: AttackVariant,
    /// Budget in 8-bit pixel units (L-infinity radius is eps/255).
    pub eps: f32,
    /// Step size in 8-bit pixel units.
    pub alpha: f32,
    /// Iteration count M.
    pub steps: usize,
    pub random_start: bool,
    pub track_best: bool,
}

impl AttackSpec {
    pub fn clean() -> AttackSpec {
        AttackSpec {
            variant: AttackVariant::Clean,
            eps: 0.0,
            alpha: 0.0,
            steps: 0,
            random_start: false,
            track_best: false,
        }
    }

    pub fn fgsm(eps: f32) -> AttackSpec {
        AttackSpec {
            variant: AttackVariant::Fgsm,
            eps,
            alpha: eps,
            steps: 1,
            random_start: false,
            track_best: false,
        }
    }

    pub fn pgd(eps: f32, alpha: f32, steps: usize) -> AttackSpec {
        AttackSpec {
            variant: AttackVariant::Pgd,
            eps,
            alpha,
            steps,
            random_start: false,
            track_best: false,
        }
    }

    pub fn with_track_best(mut self) -> AttackSpec {
        self.track_best = true;
        self
    }

    pub fn with_random_start(mut self) -> AttackSpec {
        self.random_start = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 || self.alpha < 0.0 {
            return Err(CoreError::invalid(
                "attack_spec",
                "eps and alpha must be nonnegative",
            ));
        }
        match &self.variant {
            AttackVariant::MaskedPgd { ratio } | AttackVariant::FrameBorder { ratio } => {
                if !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(CoreError::invalid(
                        "attack_spec",
                        format!("support ratio {ratio} outside (0, 1]"),
                    ));
                }
            }
            AttackVariant::SaliencyIterative { inner_steps } => {
                if *inner_steps == 0 {
                    return Err(CoreError::invalid(
                        "attack_spec",
                        "saliency-iterative needs inner_steps >= 1",
                    ));
                }
            }
            AttackVariant::Flicker {
                lambda,
                beta1,
                beta2,
                margin,
            } => {
                if *lambda < 0.0 || *beta1 < 0.0 || *beta2 < 0.0 || *margin < 0.0 {
                    return Err(CoreError::invalid(
                        "attack_spec",
                        "flicker parameters must be nonnegative",
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Stable label for report columns, e.g. "pgd:8".
    pub fn label(&self) -> String {
        match &self.variant {
            AttackVariant::Clean => "clean".to_string(),
            v => format!("{}:{}", v.name(), self.eps),
        }
    }
}

/// Where a perturbation is allowed to live.
#[derive(Debug, Clone, PartialEq)]
pub enum PerturbationSupport {
    Full,
    Patch {
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    },
    Border {
        thickness: usize,
    },
    Frames(Vec<usize>),
    /// One offset per (frame, channel), broadcast over H and W.
    FlickerTc,
}

impl PerturbationSupport {
    /// 0/1 mask over a (T,H,W,C) clip.
    pub fn mask(&self, t: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
        let mut m = vec![0.0f32; t * h * w * c];
        match self {
            PerturbationSupport::Full | PerturbationSupport::FlickerTc => m.fill(1.0),
            PerturbationSupport::Patch {
                top,
                left,
                h: ph,
                w: pw,
            } => {
                if top + ph > h || left + pw > w {
                    return Err(CoreError::invalid(
                        "support_mask",
                        format!("patch {top},{left} {ph}x{pw} outside {h}x{w} frame"),
                    ));
                }
                for ti in 0..t {
                    for y in *top..top + ph {
                        for x in *left..left + pw {
                            let base = ((ti * h + y) * w + x) * c;
                            m[base..base + c].fill(1.0);
                        }
                    }
                }
            }
            PerturbationSupport::Border { thickness } => {
                let b = *thickness;
                for ti in 0..t {
                    for y in 0..h {
                        for x in 0..w {
                            if y < b || y >= h.saturating_sub(b) || x < b || x >= w.saturating_sub(b)
                            {
                                let base = ((ti * h + y) * w + x) * c;
                                m[base..base + c].fill(1.0);
                            }
                        }
                    }
                }
            }
            PerturbationSupport::Frames(frames) => {
                for &f in frames {
                    if f >= t {
                        return Err(CoreError::invalid(
                            "support_mask",
                            format!("frame {f} outside clip of length {t}"),
                        ));
                    }
                    let base = f * h * w * c;
                    m[base..base + h * w * c].fill(1.0);
                }
            }
        }
        Tensor::from_vec(&[t, h, w, c], m)
    }
}

/// Outcome of attacking one clip.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Perturbation (T,H,W,C); x + delta is a valid clip.
    pub delta: Tensor,
    /// Objective value per iterate (cross-entropy for the PGD family).
    pub loss_trace: Vec<f64>,
    /// True when the argmax prediction changed relative to the clean input.
    pub success: bool,
    pub steps_used: usize,
    /// For frame-saliency iterative: frames perturbed, in attack order.
    pub frames_perturbed: Option<Vec<usize>>,
}

fn delta_return(spec: &AttackSpec) -> PgdReturn {
    if spec.track_best {
        PgdReturn::Best
    } else {
        PgdReturn::FinalNoEval
    }
}

/// Batched perturbation for a (B,T,H,W,C) batch under any variant. PGD-style
/// variants run batched (the per-clip gradient sign is unaffected by the
/// batch-mean loss); inherently sequential variants loop over clips.
pub fn attack_batch_delta(
    target: &dyn AttackTarget,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    spec.validate()?;
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(CoreError::shape(
            "attack_batch_delta",
            format!("expected (B,T,H,W,C), got {:?}", s),
        ));
    }
    let (b, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    match &spec.variant {
        AttackVariant::Clean => Ok(Tensor::zeros(&s)),
        AttackVariant::Pgd => Ok(pgd_batch(
            target,
            x,
            labels,
            spec.eps,
            spec.alpha,
            spec.steps,
            None,
            spec.random_start,
            delta_return(spec),
            rng,
        )?
        .delta),
        AttackVariant::Fgsm | AttackVariant::SaliencyOneshot => Ok(pgd_batch(
            target,
            x,
            labels,
            spec.eps,
            spec.eps,
            1,
            None,
            false,
            delta_return(spec),
            rng,
        )?
        .delta),
        AttackVariant::MaskedPgd { ratio } => {
            let (ph, pw) = patch_dims(h, w, *ratio);
            if ph == 0 || pw == 0 {
                return Err(CoreError::invalid(
                    "attack_batch_delta",
                    format!("patch ratio {ratio} yields an empty patch"),
                ));
            }
            // independent patch position per clip
            let mut mask = vec![0.0f32; x.len()];
            let clip_len = t * h * w * c;
            for bi in 0..b {
                let top = rng.below(h - ph + 1);
                let left = rng.below(w - pw + 1);
                let m = PerturbationSupport::Patch {
                    top,
                    left,
                    h: ph,
                    w: pw,
                }
                .mask(t, h, w, c)?;
                mask[bi * clip_len..(bi + 1) * clip_len].copy_from_slice(m.data());
            }
            let mask = Tensor::from_vec(&s, mask)?;
            Ok(pgd_batch(
                target,
                x,
                labels,
                spec.eps,
                spec.alpha,
                spec.steps,
                Some(&mask),
                spec.random_start,
                delta_return(spec),
                rng,
            )?
            .delta)
        }
        AttackVariant::FrameBorder { ratio } => {
            let thickness = border_thickness(h, w, *ratio);
            let m = PerturbationSupport::Border { thickness }.mask(t, h, w, c)?;
            let clip_len = t * h * w * c;
            let mut mask = vec![0.0f32; x.len()];
            for bi in 0..b {
                mask[bi * clip_len..(bi + 1) * clip_len].copy_from_slice(m.data());
            }
            let mask = Tensor::from_vec(&s, mask)?;
            Ok(pgd_batch(
                target,
                x,
                labels,
                spec.eps,
                spec.alpha,
                spec.steps,
                Some(&mask),
                spec.random_start,
                delta_return(spec),
                rng,
            )?
            .delta)
        }
        AttackVariant::SaliencyIterative { .. } | AttackVariant::Flicker { .. } => {
            let clip_len = t * h * w * c;
            let mut delta = vec![0.0f32; x.len()];
            for bi in 0..b {
                let clip = Tensor::from_vec(
                    &[t, h, w, c],
                    x.data()[bi * clip_len..(bi + 1) * clip_len].to_vec(),
                )?;
                let mut clip_rng = rng.fork(&format!("clip/{bi}"));
                let res = run_attack(target, &clip, labels[bi], spec, &mut clip_rng)?;
                delta[bi * clip_len..(bi + 1) * clip_len].copy_from_slice(res.delta.data());
            }
            Tensor::from_vec(&s, delta)
        }
    }
}

/// Dispatch an attack spec against a single clip.
pub fn run_attack(
    target: &dyn AttackTarget,
    clip: &Tensor,
    label: usize,
    spec: &AttackSpec,
    rng: &mut StreamRng,
) -> Result<AttackResult> {
    spec.validate()?;
    match &spec.variant {
        AttackVariant::Clean => Ok(AttackResult {
            delta: Tensor::zeros(clip.shape()),
            loss_trace: Vec::new(),
            success: false,
            steps_used: 0,
            frames_perturbed: None,
        }),
        AttackVariant::Fgsm => fgsm(target, clip, label, spec.eps, &PerturbationSupport::Full),
        AttackVariant::Pgd => pgd_linf(target, clip, label, spec),
        AttackVariant::MaskedPgd { ratio } => masked_pgd(
            target, clip, label, spec.eps, spec.alpha, spec.steps, *ratio, rng,
        ),
        AttackVariant::FrameBorder { ratio } => {
            frame_border_attack(target, clip, label, spec.eps, spec.alpha, spec.steps, *ratio)
        }
        AttackVariant::SaliencyOneshot => frame_saliency_oneshot(target, clip, label, spec.eps),
        AttackVariant::SaliencyIterative { inner_steps } => frame_saliency_iterative(
            target,
            clip,
            label,
            spec.eps,
            spec.alpha,
            *inner_steps,
        ),
        AttackVariant::Flicker {
            lambda,
            beta1,
            beta2,
            margin,
        } => flicker_attack(
            target, clip, label, *lambda, *beta1, *beta2, spec.steps, spec.alpha, *margin,
            spec.eps,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn support_masks_have_expected_sizes() {
        let full = PerturbationSupport::Full.mask(2, 4, 4, 3).unwrap();
        assert!(full.data().iter().all(|&v| v == 1.0));
        let patch = PerturbationSupport::Patch {
            top: 1,
            left: 2,
            h: 2,
            w: 2,
        }
        .mask(2, 4, 4, 1)
        .unwrap();
        assert_eq!(patch.sum_f64() as usize, 2 * 2 * 2);
        let border = PerturbationSupport::Border { thickness: 1 }
            .mask(1, 4, 4, 1)
            .unwrap();
        // 4x4 ring of thickness 1: 2b(H+W) - 4b^2 = 16 - 4 = 12
        assert_eq!(border.sum_f64() as usize, 12);
        let frames = PerturbationSupport::Frames(vec![1]).mask(3, 2, 2, 1).unwrap();
        assert_eq!(frames.sum_f64() as usize, 4);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = AttackSpec::pgd(8.0, 2.0, 5);
        s.eps = -1.0;
        assert!(s.validate().is_err());
        let s = AttackSpec {
            variant: AttackVariant::MaskedPgd { ratio: 1.5 },
            ..AttackSpec::pgd(8.0, 2.0, 5)
        };
        assert!(s.validate().is_err());
    }
}
