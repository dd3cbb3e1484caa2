//! Projection onto the L-infinity ball intersected with the valid pixel range.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Per-coordinate projection of `delta` in place:
/// clamp to [-eps/255, eps/255], then pull x + delta back into [0, 1].
///
/// The range step uses exact endpoint arithmetic plus a one-ulp fixup so the
/// result is exactly idempotent in f32 and never leaves the ball.
pub fn project_slice(delta: &mut [f32], x: &[f32], eps01: f32) {
    debug_assert_eq!(delta.len(), x.len());
    for (d, &xv) in delta.iter_mut().zip(x) {
        let mut dv = d.clamp(-eps01, eps01);
        let sum = xv + dv;
        if sum > 1.0 {
            dv = 1.0 - xv;
            while xv + dv > 1.0 {
                dv = next_down(dv);
            }
        } else if sum < 0.0 {
            // x + (-x) is exact in IEEE arithmetic
            dv = -xv;
        }
        *d = dv;
    }
}

fn next_down(v: f32) -> f32 {
    // f32::next_down is stable since 1.86; spelled out for clarity on the
    // one place bit-level monotonicity matters
    if v.is_nan() || v == f32::NEG_INFINITY {
        return v;
    }
    let bits = v.to_bits();
    if v == 0.0 {
        return -f32::from_bits(1);
    }
    f32::from_bits(if v > 0.0 { bits - 1 } else { bits + 1 })
}

/// Projection returning a new tensor; `eps` is in 8-bit pixel units.
pub fn project_linf(delta: &Tensor, eps: f32, x: &Tensor) -> Result<Tensor> {
    if delta.shape() != x.shape() {
        return Err(CoreError::shape(
            "project_linf",
            format!("{:?} vs {:?}", delta.shape(), x.shape()),
        ));
    }
    let mut out = delta.clone();
    project_slice(out.data_mut(), x.data(), eps / 255.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn ball_clamp_example() {
        let x = Tensor::full(&[3], 0.5);
        let d = Tensor::from_vec(&[3], vec![3.0 / 255.0, -10.0 / 255.0, 5.0 / 255.0]).unwrap();
        let p = project_linf(&d, 4.0, &x).unwrap();
        assert_eq!(
            p.data(),
            &[3.0 / 255.0, -(4.0f32 / 255.0), 4.0 / 255.0]
        );
    }

    #[test]
    fn in_ball_in_range_is_untouched() {
        let x = Tensor::from_vec(&[3], vec![0.2, 0.5, 0.9]).unwrap();
        let d = Tensor::from_vec(&[3], vec![0.01, -0.015, 0.003]).unwrap();
        let p = project_linf(&d, 8.0, &x).unwrap();
        assert_eq!(p.data(), d.data());
    }

    #[test]
    fn saturated_pixel_pins_sum_to_one() {
        let x = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let d = Tensor::from_vec(&[2], vec![0.02, -0.02]).unwrap();
        let p = project_linf(&d, 8.0, &x).unwrap();
        assert_eq!(x.data()[0] + p.data()[0], 1.0);
        assert_eq!(x.data()[1] + p.data()[1], 0.0);
    }

    #[test]
    fn projection_is_exactly_idempotent() {
        let mut rng = StreamRng::new(77, 0);
        for _ in 0..50 {
            let x = Tensor::rand_uniform(&[64], 0.0, 1.0, &mut rng);
            let d = Tensor::rand_uniform(&[64], -0.3, 0.3, &mut rng);
            let once = project_linf(&d, 8.0, &x).unwrap();
            let twice = project_linf(&once, 8.0, &x).unwrap();
            assert_eq!(once.data(), twice.data());
            let e = 8.0f32 / 255.0;
            for (i, (&dv, &xv)) in once.data().iter().zip(x.data()).enumerate() {
                assert!(dv.abs() <= e, "coord {i}: {dv}");
                let s = xv + dv;
                assert!((0.0..=1.0).contains(&s), "coord {i}: {s}");
            }
        }
    }
}
