//! Training-time augmentation: temporal sampling with looping, multi-scale
//! corner/center cropping, horizontal flipping, bilinear resize.

use super::VideoClip;
use crate::error::{CoreError, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropPosition {
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

pub const CROP_POSITIONS: [CropPosition; 5] = [
    CropPosition::Center,
    CropPosition::TopLeft,
    CropPosition::TopRight,
    CropPosition::BottomLeft,
    CropPosition::BottomRight,
];

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Output clip length; shorter inputs loop.
    pub frames: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub flip_prob: f32,
    /// Crop side = round(scale * input side); sampled uniformly.
    pub scales: Vec<f32>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            frames: 16,
            out_h: 32,
            out_w: 32,
            flip_prob: 0.5,
            scales: vec![1.0, 0.5f32.powf(0.25), 0.5f32.sqrt()],
        }
    }
}

fn crop_origin(pos: CropPosition, h: usize, w: usize, ch: usize, cw: usize) -> (usize, usize) {
    match pos {
        CropPosition::Center => ((h - ch) / 2, (w - cw) / 2),
        CropPosition::TopLeft => (0, 0),
        CropPosition::TopRight => (0, w - cw),
        CropPosition::BottomLeft => (h - ch, 0),
        CropPosition::BottomRight => (h - ch, w - cw),
    }
}

/// Bilinear resize of one (H,W,C) frame slice into (oh,ow,C).
fn resize_frame(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize, dst: &mut [f32]) {
    let fy = if oh > 1 { (h - 1) as f32 / (oh - 1) as f32 } else { 0.0 };
    let fx = if ow > 1 { (w - 1) as f32 / (ow - 1) as f32 } else { 0.0 };
    for oy in 0..oh {
        let sy = oy as f32 * fy;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f32;
        for ox in 0..ow {
            let sx = ox as f32 * fx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f32;
            for ci in 0..c {
                let v00 = src[(y0 * w + x0) * c + ci];
                let v01 = src[(y0 * w + x1) * c + ci];
                let v10 = src[(y1 * w + x0) * c + ci];
                let v11 = src[(y1 * w + x1) * c + ci];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                dst[(oy * ow + ox) * c + ci] = top + (bot - top) * wy;
            }
        }
    }
}

/// Apply the augmentation pipeline. Output is exactly
/// (cfg.frames, cfg.out_h, cfg.out_w, C) and stays in [0, 1].
pub fn augment(clip: &VideoClip, cfg: &AugmentConfig, rng: &mut StreamRng) -> Result<VideoClip> {
    let (t_in, h, w, c) = clip.dims();
    if cfg.scales.is_empty() {
        return Err(CoreError::invalid("augment", "empty scale set"));
    }
    if !(0.0..=1.0).contains(&cfg.flip_prob) {
        return Err(CoreError::invalid("augment", "flip probability outside [0,1]"));
    }
    // temporal position: uniform start, loop when the clip is short
    let t0 = if t_in > cfg.frames {
        rng.below(t_in - cfg.frames + 1)
    } else {
        0
    };
    let scale = cfg.scales[rng.below(cfg.scales.len())];
    let ch = ((h as f32 * scale).round() as usize).max(1);
    let cw = ((w as f32 * scale).round() as usize).max(1);
    if ch > h || cw > w {
        return Err(CoreError::invalid(
            "augment",
            format!("crop {ch}x{cw} larger than frame {h}x{w}"),
        ));
    }
    let pos = CROP_POSITIONS[rng.below(CROP_POSITIONS.len())];
    let (top, left) = crop_origin(pos, h, w, ch, cw);
    let flip = rng.uniform01() < cfg.flip_prob;

    let mut out = vec![0.0f32; cfg.frames * cfg.out_h * cfg.out_w * c];
    let mut cropped = vec![0.0f32; ch * cw * c];
    let frame_len = h * w * c;
    let out_frame_len = cfg.out_h * cfg.out_w * c;
    for j in 0..cfg.frames {
        let src_t = (t0 + j) % t_in;
        let frame = &clip.frames.data()[src_t * frame_len..(src_t + 1) * frame_len];
        for y in 0..ch {
            for x in 0..cw {
                let sx = if flip { left + (cw - 1 - x) } else { left + x };
                let src = ((top + y) * w + sx) * c;
                let dst = (y * cw + x) * c;
                cropped[dst..dst + c].copy_from_slice(&frame[src..src + c]);
            }
        }
        resize_frame(
            &cropped,
            ch,
            cw,
            c,
            cfg.out_h,
            cfg.out_w,
            &mut out[j * out_frame_len..(j + 1) * out_frame_len],
        );
    }
    Ok(VideoClip {
        frames: Tensor::from_vec(&[cfg.frames, cfg.out_h, cfg.out_w, c], out)?,
        label: clip.label,
        id: clip.id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_clip(t: usize) -> VideoClip {
        let mut rng = StreamRng::new(13, 0);
        VideoClip {
            frames: Tensor::rand_uniform(&[t, 8, 8, 2], 0.0, 1.0, &mut rng),
            label: 1,
            id: 0,
        }
    }

    fn identity_cfg(frames: usize) -> AugmentConfig {
        AugmentConfig {
            frames,
            out_h: 8,
            out_w: 8,
            flip_prob: 0.0,
            scales: vec![1.0],
        }
    }

    #[test]
    fn exact_size_center_crop_is_identity() {
        let clip = test_clip(8);
        let mut rng = StreamRng::new(1, 0);
        let out = augment(&clip, &identity_cfg(8), &mut rng).unwrap();
        assert_eq!(out.frames.data(), clip.frames.data());
    }

    #[test]
    fn short_clip_loops_with_its_period() {
        let clip = test_clip(8);
        let mut rng = StreamRng::new(2, 0);
        let out = augment(&clip, &identity_cfg(16), &mut rng).unwrap();
        let frame = 8 * 8 * 2;
        for j in 0..8 {
            assert_eq!(
                &out.frames.data()[j * frame..(j + 1) * frame],
                &out.frames.data()[(j + 8) * frame..(j + 9) * frame]
            );
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let clip = test_clip(8);
        let flip_once = |c: &VideoClip| {
            let cfg = AugmentConfig {
                flip_prob: 1.0,
                ..identity_cfg(8)
            };
            let mut rng = StreamRng::new(3, 0);
            augment(c, &cfg, &mut rng).unwrap()
        };
        let twice = flip_once(&flip_once(&clip));
        assert_eq!(twice.frames.data(), clip.frames.data());
    }

    #[test]
    fn output_stays_in_unit_range() {
        let clip = test_clip(10);
        let cfg = AugmentConfig {
            frames: 16,
            out_h: 8,
            out_w: 8,
            flip_prob: 0.5,
            scales: vec![1.0, 0.84, 0.7071],
        };
        for seed in 0..20 {
            let mut rng = StreamRng::new(seed, 0);
            let out = augment(&clip, &cfg, &mut rng).unwrap();
            assert_eq!(out.frames.shape(), &[16, 8, 8, 2]);
            assert!(out.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let clip = test_clip(8);
        let cfg = AugmentConfig {
            scales: vec![2.0],
            ..identity_cfg(8)
        };
        let mut rng = StreamRng::new(4, 0);
        let err = augment(&clip, &cfg, &mut rng).unwrap_err().to_string();
        assert!(err.contains("larger than frame"), "{err}");
    }
}
