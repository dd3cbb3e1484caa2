//! Evaluation: clip- and video-level accuracy, robust accuracy under attack
//! specs, PSNR, and plot-ready exports.

mod emit;

pub use emit::{
    emit_surface, emit_tables, fmt_sig, parse_surface_tsv, write_alpha_fit, write_epoch_series,
};

use crate::attacks::{attack_batch_delta, AttackSpec, AttackVariant};
use crate::data::{Dataset, VideoClip};
use crate::error::{CoreError, Result};
use crate::nn::{classify, softmax_rows, ClassifierF, GenThenClassify, GeneratorG};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor};

/// Accuracy map for one model across attack specs.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub model_id: String,
    /// (spec label, top-1 accuracy), in evaluation order; always contains
    /// the clean column.
    pub entries: Vec<(String, f64)>,
    pub clip_count: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn accuracy(&self, label: &str) -> Option<f64> {
        self.entries.iter().find(|(l, _)| l == label).map(|&(_, a)| a)
    }

    pub fn clean_accuracy(&self) -> f64 {
        self.accuracy("clean").unwrap_or(0.0)
    }
}

/// Train/val accuracy per epoch with the generalization gap.
#[derive(Debug, Clone)]
pub struct EpochSeries {
    /// (epoch, train accuracy, validation accuracy)
    pub rows: Vec<(usize, f64, f64)>,
}

impl EpochSeries {
    pub fn from_log(log: &[crate::defense::EpochLog]) -> EpochSeries {
        EpochSeries {
            rows: log.iter().map(|e| (e.epoch, e.train_acc, e.val_acc)).collect(),
        }
    }

    pub fn gap(&self, i: usize) -> f64 {
        self.rows[i].1 - self.rows[i].2
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// A deployed model: classifier, optionally behind a denoising generator.
/// `attack_through_generator` selects the evaluation protocol: when false,
/// attacks are computed against the classifier alone (the generator is used
/// only as a pre-processing step), matching the generative-defense tables.
#[derive(Clone, Copy)]
pub struct EvalPipeline<'a> {
    pub classifier: &'a ClassifierF,
    pub generator: Option<&'a GeneratorG>,
    pub attack_through_generator: bool,
}

impl<'a> EvalPipeline<'a> {
    pub fn bare(classifier: &'a ClassifierF) -> EvalPipeline<'a> {
        EvalPipeline {
            classifier,
            generator: None,
            attack_through_generator: true,
        }
    }

    fn predictions(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        if let Some(g) = self.generator {
            h = g.forward(&mut tape, h, false)?.0;
        }
        let (z, _) = self.classifier.forward(&mut tape, h, false)?;
        let k = self.classifier.num_classes;
        Ok(tape.value(z).data().chunks_exact(k).map(argmax).collect())
    }

    fn attack_delta(
        &self,
        x: &Tensor,
        labels: &[usize],
        spec: &AttackSpec,
        rng: &mut StreamRng,
    ) -> Result<Tensor> {
        match (self.generator, self.attack_through_generator) {
            (Some(g), true) => {
                let composed = GenThenClassify {
                    generator: g,
                    classifier: self.classifier,
                };
                attack_batch_delta(&composed, x, labels, spec, rng)
            }
            _ => attack_batch_delta(self.classifier, x, labels, spec, rng),
        }
    }
}

/// Fraction of clips whose argmax logit matches the label.
pub fn clip_accuracy(f: &ClassifierF, clips: &[VideoClip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(CoreError::Data("clip_accuracy on empty set".to_string()));
    }
    let idxs: Vec<usize> = (0..clips.len()).collect();
    let mut correct = 0usize;
    for chunk in idxs.chunks(32) {
        let (x, labels) = crate::data::make_batch(clips, chunk)?;
        let z = classify(f, &x)?;
        let k = f.num_classes;
        for (row, &y) in z.data().chunks_exact(k).zip(&labels) {
            if argmax(row) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// Video-level prediction: softmax probabilities accumulated over
/// non-overlapping windows of `clip_len` frames (shorter videos loop).
pub fn video_level_prediction(
    f: &ClassifierF,
    video: &VideoClip,
    clip_len: usize,
) -> Result<usize> {
    let (t, h, w, c) = video.dims();
    let mut windows: Vec<Tensor> = Vec::new();
    if t < clip_len {
        // loop the clip as many times as necessary
        let frame = h * w * c;
        let mut data = Vec::with_capacity(clip_len * frame);
        for j in 0..clip_len {
            let src = (j % t) * frame;
            data.extend_from_slice(&video.frames.data()[src..src + frame]);
        }
        windows.push(Tensor::from_vec(&[clip_len, h, w, c], data)?);
    } else {
        for wstart in (0..=t - clip_len).step_by(clip_len) {
            let frame = h * w * c;
            let data =
                video.frames.data()[wstart * frame..(wstart + clip_len) * frame].to_vec();
            windows.push(Tensor::from_vec(&[clip_len, h, w, c], data)?);
        }
    }
    let k = f.num_classes;
    let mut accum = vec![0.0f64; k];
    for win in &windows {
        let z = classify(f, &win.reshaped(&[1, clip_len, h, w, c])?)?;
        let p = softmax_rows(&z);
        for (a, &v) in accum.iter_mut().zip(p.data()) {
            *a += v as f64;
        }
    }
    Ok(accum
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0))
}

pub fn video_level_accuracy(
    f: &ClassifierF,
    videos: &[VideoClip],
    clip_len: usize,
) -> Result<f64> {
    if videos.is_empty() {
        return Err(CoreError::Data("video_level_accuracy on empty set".to_string()));
    }
    let mut correct = 0usize;
    for v in videos {
        if video_level_prediction(f, v, clip_len)? == v.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / videos.len() as f64)
}

/// Peak signal-to-noise ratio in decibels for [0,1] data, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.mse_elementwise(b)?;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((-10.0 * mse.log10()).min(100.0))
}

/// Attack every clip under every spec (track-best forced on) and measure
/// top-1 accuracy. The spec list must include the clean case.
pub fn robust_accuracy(
    pipe: &EvalPipeline<'_>,
    data: &Dataset,
    specs: &[AttackSpec],
    seed: u64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(CoreError::Data("robust_accuracy on empty set".to_string()));
    }
    if !specs.iter().any(|s| s.variant == AttackVariant::Clean) {
        return Err(CoreError::invalid(
            "robust_accuracy",
            "spec list must include the clean case",
        ));
    }
    let idxs: Vec<usize> = (0..data.len()).collect();
    let mut entries = Vec::with_capacity(specs.len());
    for (si, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let mut eval_spec = spec.clone();
        eval_spec.track_best = true;
        let mut correct = 0usize;
        for (ci, chunk) in idxs.chunks(32).enumerate() {
            let (x, labels) = crate::data::make_batch(&data.clips, chunk)?;
            let preds = if matches!(spec.variant, AttackVariant::Clean) {
                pipe.predictions(&x)?
            } else {
                let mut rng =
                    StreamRng::labeled(seed, &format!("eval/attack/{si}/{ci}"));
                let delta = pipe.attack_delta(&x, &labels, &eval_spec, &mut rng)?;
                let x_adv = x.add(&delta)?;
                pipe.predictions(&x_adv)?
            };
            correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        }
        entries.push((spec.label(), correct as f64 / data.len() as f64));
    }
    Ok(EvalReport {
        model_id: String::new(),
        entries,
        clip_count: data.len(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_moving_shapes, Split};

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[2, 2], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = a.map(|v| v + 0.1);
        // MSE = 0.01 -> 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn psnr_matches_loop_oracle() {
        let mut rng = StreamRng::new(81, 0);
        let a = Tensor::rand_uniform(&[4, 5], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 5], 0.0, 1.0, &mut rng);
        let mut acc = 0.0f64;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            acc += ((x - y) as f64).powi(2);
        }
        let want = -10.0 * (acc / 20.0).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn clip_accuracy_matches_loop_oracle() {
        let mut rng = StreamRng::new(82, 0);
        let f = ClassifierF::new(3, 3, &mut rng);
        let data = generate_moving_shapes(5, Split::Test, 4, 3, 8, 16, 16).unwrap();
        let fast = clip_accuracy(&f, &data.clips).unwrap();
        let mut correct = 0;
        for c in &data.clips {
            let z = crate::nn::classify_clip(&f, &c.frames).unwrap();
            if argmax(z.data()) == c.label {
                correct += 1;
            }
        }
        assert!((fast - correct as f64 / data.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_an_error() {
        let mut rng = StreamRng::new(83, 0);
        let f = ClassifierF::new(3, 3, &mut rng);
        assert!(clip_accuracy(&f, &[]).is_err());
    }

    #[test]
    fn video_window_accumulation_example() {
        // two windows with probabilities [0.6, 0.4] and [0.1, 0.9]
        // accumulate to [0.7, 1.3] -> class 1
        let acc = [0.6 + 0.1, 0.4 + 0.9];
        assert_eq!(argmax(&[acc[0] as f32, acc[1] as f32]), 1);
    }

    #[test]
    fn video_equal_to_clip_len_matches_clip_prediction() {
        let mut rng = StreamRng::new(84, 0);
        let f = ClassifierF::new(3, 3, &mut rng);
        let data = generate_moving_shapes(6, Split::Test, 2, 3, 8, 16, 16).unwrap();
        for clip in &data.clips {
            let vid_pred = video_level_prediction(&f, clip, 8).unwrap();
            let z = crate::nn::classify_clip(&f, &clip.frames).unwrap();
            assert_eq!(vid_pred, argmax(z.data()));
        }
    }

    #[test]
    fn robust_accuracy_requires_clean_column() {
        let mut rng = StreamRng::new(85, 0);
        let f = ClassifierF::new(3, 3, &mut rng);
        let data = generate_moving_shapes(7, Split::Test, 2, 3, 8, 16, 16).unwrap();
        let pipe = EvalPipeline::bare(&f);
        let err = robust_accuracy(&pipe, &data, &[AttackSpec::pgd(4.0, 1.0, 1)], 0);
        assert!(err.is_err());
        let report = robust_accuracy(
            &pipe,
            &data,
            &[AttackSpec::clean(), AttackSpec::pgd(4.0, 1.0, 1)],
            0,
        )
        .unwrap();
        assert_eq!(report.entries.len(), 2);
        assert_eq!(report.entries[0].0, "clean");
        // clean column equals clip accuracy exactly
        let ca = clip_accuracy(&f, &data.clips).unwrap();
        assert_eq!(report.clean_accuracy(), ca);
    }
}
