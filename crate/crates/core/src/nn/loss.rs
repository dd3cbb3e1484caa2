//! Loss builders on top of the tape ops.

use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Tensor, VarId};

/// MSE between a reconstruction and its target: squared Frobenius distance
/// divided by T*H*W per clip, averaged over the batch (channels stay in the
/// numerator, so a uniform +0.1 offset on C=3 channels gives 0.03).
pub fn mse_loss(tape: &mut Tape, a: VarId, b: VarId) -> Result<VarId> {
    let sa = tape.value(a).shape().to_vec();
    let sb = tape.value(b).shape();
    if sa != sb {
        return Err(CoreError::shape(
            "mse_loss",
            format!("{:?} vs {:?}", sa, sb),
        ));
    }
    if sa.is_empty() {
        return Err(CoreError::shape("mse_loss", "rank-0 tensor".to_string()));
    }
    let channels = *sa.last().unwrap();
    let volume = tape.value(a).len() / channels.max(1);
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq);
    Ok(tape.mul_scalar(total, 1.0 / volume as f32))
}

/// -log sigmoid(z), averaged: the "this is real" half of the GAN objective.
pub fn bce_real(tape: &mut Tape, logits: VarId) -> VarId {
    let neg = tape.mul_scalar(logits, -1.0);
    let sp = tape.softplus(neg);
    tape.mean_all(sp)
}

/// -log(1 - sigmoid(z)), averaged: the "this is generated" half.
pub fn bce_fake(tape: &mut Tape, logits: VarId) -> VarId {
    let sp = tape.softplus(logits);
    tape.mean_all(sp)
}

/// Softmax over rows of a plain logits tensor (no tape).
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = vec![0.0f32; logits.len()];
    for (orow, row) in out.chunks_exact_mut(k).zip(logits.data().chunks_exact(k)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut z = 0.0f64;
        for &v in row {
            z += ((v as f64) - m).exp();
        }
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = ((((v as f64) - m).exp()) / z) as f32;
        }
    }
    Tensor::from_vec(logits.shape(), out).expect("same shape")
}

/// Per-row cross-entropy of a plain logits tensor, 64-bit accumulated.
pub fn per_clip_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let k = *logits.shape().last().unwrap_or(&0);
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(CoreError::shape(
            "per_clip_cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let mut out = Vec::with_capacity(labels.len());
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(CoreError::invalid(
                "per_clip_cross_entropy",
                format!("label {y} out of range for {k} classes"),
            ));
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut z = 0.0f64;
        for &v in row {
            z += ((v as f64) - m).exp();
        }
        out.push(m + z.ln() - row[y] as f64);
    }
    Ok(out)
}
