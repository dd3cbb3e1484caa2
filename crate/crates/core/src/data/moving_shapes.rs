//! MovingShapes: a seeded synthetic corpus whose class is a motion pattern.
//!
//! Per-frame appearance (shape, color, size, pose, background) is drawn from
//! a stream that does not depend on the class; only the motion applied across
//! frames does. A frozen single frame therefore carries no label information
//! by construction, and clips of different classes that share an instance
//! index are bit-identical at t = 0.

use super::{Dataset, Split, VideoClip};
use crate::error::{CoreError, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const MOTION_CLASS_NAMES: [&str; 10] = [
    "translate-right",
    "translate-left",
    "translate-up",
    "translate-down",
    "diagonal-down-right",
    "diagonal-up-left",
    "rotate-cw",
    "rotate-ccw",
    "grow",
    "shrink",
];

#[derive(Clone, Copy)]
enum ShapeKind {
    Bar,
    Cross,
    Ell,
}

struct Appearance {
    kind: ShapeKind,
    color: [f32; 3],
    half_size: f32,
    cx: f32,
    cy: f32,
    angle0: f32,
    bg: [f32; 3],
    noise_seed: u64,
}

struct Motion {
    vx: f32,
    vy: f32,
    omega: f32,
    growth: f32,
}

fn draw_appearance(rng: &mut StreamRng, h: usize, w: usize) -> Appearance {
    let kind = match rng.below(3) {
        0 => ShapeKind::Bar,
        1 => ShapeKind::Cross,
        _ => ShapeKind::Ell,
    };
    // dark background, low-contrast shapes: the label-relevant signal is
    // deliberately low-amplitude, the way real video features are
    let bg = [
        rng.uniform(0.06, 0.2),
        rng.uniform(0.06, 0.2),
        rng.uniform(0.06, 0.2),
    ];
    let mut color = [0.0f32; 3];
    for (c, &b) in color.iter_mut().zip(&bg) {
        *c = b + rng.uniform(0.12, 0.28);
    }
    let half_size = rng.uniform(0.12, 0.2) * h.min(w) as f32;
    let cx = w as f32 / 2.0 + rng.uniform(-0.12, 0.12) * w as f32;
    let cy = h as f32 / 2.0 + rng.uniform(-0.12, 0.12) * h as f32;
    let angle0 = rng.uniform(0.0, std::f32::consts::TAU);
    let noise_seed = rng.next_u64();
    Appearance {
        kind,
        color,
        half_size,
        cx,
        cy,
        angle0,
        bg,
        noise_seed,
    }
}

fn draw_motion(rng: &mut StreamRng, class: usize, scale: f32) -> Motion {
    let v = rng.uniform(0.45, 0.7) * scale;
    let omega = rng.uniform(0.10, 0.16); // radians per frame
    let growth = rng.uniform(1.045, 1.075);
    let d = std::f32::consts::FRAC_1_SQRT_2;
    match class {
        0 => Motion { vx: v, vy: 0.0, omega: 0.0, growth: 1.0 },
        1 => Motion { vx: -v, vy: 0.0, omega: 0.0, growth: 1.0 },
        2 => Motion { vx: 0.0, vy: -v, omega: 0.0, growth: 1.0 },
        3 => Motion { vx: 0.0, vy: v, omega: 0.0, growth: 1.0 },
        4 => Motion { vx: v * d, vy: v * d, omega: 0.0, growth: 1.0 },
        5 => Motion { vx: -v * d, vy: -v * d, omega: 0.0, growth: 1.0 },
        6 => Motion { vx: 0.0, vy: 0.0, omega, growth: 1.0 },
        7 => Motion { vx: 0.0, vy: 0.0, omega: -omega, growth: 1.0 },
        8 => Motion { vx: 0.0, vy: 0.0, omega: 0.0, growth },
        _ => Motion { vx: 0.0, vy: 0.0, omega: 0.0, growth: 1.0 / growth },
    }
}

fn sdf_box(px: f32, py: f32, bx: f32, by: f32) -> f32 {
    let dx = px.abs() - bx;
    let dy = py.abs() - by;
    let ox = dx.max(0.0);
    let oy = dy.max(0.0);
    (ox * ox + oy * oy).sqrt() + dx.max(dy).min(0.0)
}

fn shape_sdf(kind: ShapeKind, px: f32, py: f32, a: f32) -> f32 {
    let w = (a / 3.0).max(1.1);
    match kind {
        ShapeKind::Bar => sdf_box(px, py, a, w),
        ShapeKind::Cross => sdf_box(px, py, a, w).min(sdf_box(px, py, w, a)),
        ShapeKind::Ell => {
            let c = a - w;
            sdf_box(px + c, py, w, a).min(sdf_box(px, py + c, a, w))
        }
    }
}

/// Hash-based static pixel noise in [-amp, amp], stable per (seed, y, x, c).
fn pixel_noise(seed: u64, y: usize, x: usize, c: usize, amp: f32) -> f32 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for v in [y as u64, x as u64, c as u64] {
        h ^= v.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 31;
    }
    let u = ((h >> 40) as f32) / ((1u64 << 24) as f32);
    (2.0 * u - 1.0) * amp
}

fn render_clip(app: &Appearance, motion: &Motion, t_len: usize, h: usize, w: usize) -> Tensor {
    const CHANNELS: usize = 3;
    let mut data = vec![0.0f32; t_len * h * w * CHANNELS];
    for t in 0..t_len {
        let tf = t as f32;
        let cx = app.cx + motion.vx * tf;
        let cy = app.cy + motion.vy * tf;
        let angle = app.angle0 + motion.omega * tf;
        let scale = motion.growth.powf(tf);
        let (sin, cos) = angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                // into shape frame: translate, rotate by -angle, unscale
                let rx = x as f32 + 0.5 - cx;
                let ry = y as f32 + 0.5 - cy;
                let sx = (cos * rx + sin * ry) / scale;
                let sy = (-sin * rx + cos * ry) / scale;
                let d = shape_sdf(app.kind, sx, sy, app.half_size) * scale;
                let coverage = (0.5 - d).clamp(0.0, 1.0);
                let base = ((t * h + y) * w + x) * CHANNELS;
                for c in 0..CHANNELS {
                    let bg = app.bg[c] + pixel_noise(app.noise_seed, y, x, c, 0.02);
                    let v = bg + (app.color[c] - bg) * coverage;
                    data[base + c] = v.clamp(0.02, 0.98);
                }
            }
        }
    }
    Tensor::from_vec(&[t_len, h, w, CHANNELS], data).expect("render shape")
}

/// Generate one split of the MovingShapes dataset: `n_per_class` clips for
/// each of the first `k` motion classes, deterministic in (seed, split).
pub fn generate_moving_shapes(
    seed: u64,
    split: Split,
    n_per_class: usize,
    k: usize,
    t_len: usize,
    h: usize,
    w: usize,
) -> Result<Dataset> {
    if k == 0 || k > MOTION_CLASS_NAMES.len() {
        return Err(CoreError::invalid(
            "generate_moving_shapes",
            format!("unsupported class count {k}; 1..={} available", MOTION_CLASS_NAMES.len()),
        ));
    }
    if t_len < 8 || h < 8 || w < 8 {
        return Err(CoreError::invalid(
            "generate_moving_shapes",
            format!("dimensions T={t_len} H={h} W={w} must all be >= 8"),
        ));
    }
    let mut clips = Vec::with_capacity(n_per_class * k);
    for class in 0..k {
        for inst in 0..n_per_class {
            // appearance stream is class-independent on purpose
            let mut app_rng = StreamRng::labeled(
                seed,
                &format!("moving-shapes/{}/appearance/{inst}", split.tag()),
            );
            let app = draw_appearance(&mut app_rng, h, w);
            let mut mot_rng = StreamRng::labeled(
                seed,
                &format!("moving-shapes/{}/motion/{inst}/{class}", split.tag()),
            );
            let motion = draw_motion(&mut mot_rng, class, h.min(w) as f32 / 32.0);
            let frames = render_clip(&app, &motion, t_len, h, w);
            let id = (split.index() << 32) | ((class as u64) << 16) | inst as u64;
            clips.push(VideoClip {
                frames,
                label: class,
                id,
            });
        }
    }
    Ok(Dataset {
        clips,
        split,
        seed,
        num_classes: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_moving_shapes(42, Split::Train, 2, 3, 8, 16, 16).unwrap();
        let b = generate_moving_shapes(42, Split::Train, 2, 3, 8, 16, 16).unwrap();
        for (ca, cb) in a.clips.iter().zip(&b.clips) {
            assert_eq!(ca.id, cb.id);
            assert_eq!(ca.frames.data(), cb.frames.data());
        }
    }

    #[test]
    fn labels_are_balanced_and_counted() {
        let d = generate_moving_shapes(1, Split::Train, 100, 10, 8, 8, 8).unwrap();
        assert_eq!(d.len(), 1000);
        for class in 0..10 {
            assert_eq!(d.clips.iter().filter(|c| c.label == class).count(), 100);
        }
    }

    #[test]
    fn unsupported_class_count_is_rejected() {
        assert!(generate_moving_shapes(1, Split::Train, 1, 99, 8, 8, 8).is_err());
        assert!(generate_moving_shapes(1, Split::Train, 1, 0, 8, 8, 8).is_err());
    }

    #[test]
    fn first_frame_is_class_independent() {
        // same instance index, different motion class: frame 0 must match
        // bit for bit, so a frozen clip carries no label information
        let d = generate_moving_shapes(7, Split::Val, 3, 4, 8, 16, 16).unwrap();
        let frame_len = 16 * 16 * 3;
        for inst in 0..3 {
            let reference = &d.clips[inst].frames.data()[..frame_len];
            for class in 1..4 {
                let clip = &d.clips[class * 3 + inst];
                assert_eq!(&clip.frames.data()[..frame_len], reference);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_by_id() {
        let a = generate_moving_shapes(5, Split::Train, 4, 3, 8, 8, 8).unwrap();
        let b = generate_moving_shapes(5, Split::Test, 4, 3, 8, 8, 8).unwrap();
        for ca in &a.clips {
            assert!(b.clips.iter().all(|cb| cb.id != ca.id));
        }
    }

    #[test]
    fn values_stay_well_inside_unit_range() {
        let d = generate_moving_shapes(3, Split::Train, 2, 10, 8, 16, 16).unwrap();
        for c in &d.clips {
            for &v in c.frames.data() {
                assert!((0.02..=0.98).contains(&v));
            }
        }
    }
}
