//! Finite-difference gradient checking.

use super::{Tape, Tensor, VarId};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over coordinates of |ad - fd| / max(|ad|, |fd|, 1)
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
}

fn guarded_rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare autodiff gradients of a scalar function against central finite
/// differences, coordinate by coordinate.
///
/// The step `h` trades truncation against f32 roundoff; quadratic functions
/// tolerate a large step (central differences are exact for them), while
/// smooth curved losses want h around 1e-2. The effective step is measured
/// from the actually-representable perturbed inputs.
pub fn grad_check(
    f: impl Fn(&mut Tape, VarId) -> Result<VarId>,
    x: &Tensor,
    h: f64,
) -> Result<GradCheckReport> {
    // autodiff gradient
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true);
    let root = f(&mut tape, xid)?;
    tape.backward(root)?;
    let ad: Vec<f64> = match tape.grad(xid) {
        Some(g) => g.data().iter().map(|&v| v as f64).collect(),
        None => vec![0.0; x.len()],
    };

    let eval = |xt: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.leaf(xt.clone(), false);
        let root = f(&mut tape, xid)?;
        Ok(tape.item_f64(root))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords: x.len(),
    };
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let hi = (orig as f64 + h) as f32;
        let lo = (orig as f64 - h) as f32;
        xp.data_mut()[i] = hi;
        let fp = eval(&xp)?;
        xp.data_mut()[i] = lo;
        let fm = eval(&xp)?;
        xp.data_mut()[i] = orig;
        let h_eff = hi as f64 - lo as f64;
        let fd = (fp - fm) / h_eff;
        let abs = (ad[i] - fd).abs();
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(guarded_rel(ad[i], fd));
    }
    Ok(report)
}
