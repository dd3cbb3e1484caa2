//! Reverse-mode differentiation tape.
//!
//! Operations append nodes in topological order (inputs always precede
//! outputs), so the backward pass is a single reverse sweep. A tape is
//! confined to one thread; independent tapes may run in parallel.

use super::kernels::{self, ConvGeom};
use super::{dims5, Tensor};
use crate::error::{CoreError, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    AddScalar(VarId),
    MulScalar(VarId, f32),
    Matmul(VarId, VarId),
    AddBias(VarId, VarId),
    Conv3d {
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        geom: ConvGeom,
    },
    ConvT3d {
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        geom: ConvGeom,
    },
    MaxPool3d {
        x: VarId,
        argmax: Vec<u32>,
    },
    AvgPool3d {
        x: VarId,
        k: [usize; 3],
        s: [usize; 3],
    },
    GlobalAvgPool(VarId),
    Relu(VarId),
    Sigmoid(VarId),
    Softplus(VarId),
    Softmax(VarId),
    Clamp {
        x: VarId,
        lo: f32,
        hi: f32,
    },
    Sign,
    Reshape(VarId),
    BroadcastTc {
        x: VarId,
        h: usize,
        w: usize,
    },
    SliceFrames {
        x: VarId,
        t0: usize,
    },
    AssignMasked {
        a: VarId,
        b: VarId,
        mask: Tensor,
    },
    SumAll(VarId),
    MeanAll(VarId),
    MaxAll {
        x: VarId,
        argmax: usize,
    },
    L1All(VarId),
    CrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    CwMargin {
        logits: VarId,
        labels: Vec<usize>,
        /// per-sample: index of the runner-up class when the margin is active
        other: Vec<Option<usize>>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    scalar_f64: Option<f64>,
    op: Op,
}

/// Recording tape for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> VarId {
        self.push_scalar(value, requires_grad, op, None)
    }

    fn push_scalar(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        op: Op,
        scalar_f64: Option<f64>,
    ) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            scalar_f64,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Scalar value with 64-bit precision where the producing op tracked one.
    pub fn item_f64(&self, id: VarId) -> f64 {
        let n = &self.nodes[id.0];
        n.scalar_f64.unwrap_or_else(|| n.value.data()[0] as f64)
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise / structural ops ----

    fn same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(CoreError::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f32) -> VarId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, self.rg(a), Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f32) -> VarId {
        let v = self.value(a).scale(c);
        self.push(v, self.rg(a), Op::MulScalar(a, c))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, self.rg(a), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, self.rg(a), Op::Sigmoid(a))
    }

    /// ln(1 + e^x), evaluated in its overflow-free form.
    pub fn softplus(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| {
            let xf = x as f64;
            (xf.max(0.0) + (-xf.abs()).exp().ln_1p()) as f32
        });
        self.push(v, self.rg(a), Op::Softplus(a))
    }

    pub fn clamp(&mut self, a: VarId, lo: f32, hi: f32) -> VarId {
        let v = self.value(a).clamped(lo, hi);
        self.push(v, self.rg(a), Op::Clamp { x: a, lo, hi })
    }

    /// sign(x) with sign(0) = 0; gradient is zero everywhere.
    pub fn sign(&mut self, a: VarId) -> VarId {
        let v = self.value(a).sign();
        self.push(v, self.rg(a), Op::Sign)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, self.rg(a), Op::Reshape(a)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let t = self.value(a);
        let k = *t
            .shape()
            .last()
            .ok_or_else(|| CoreError::shape("softmax", "rank-0 tensor".to_string()))?;
        let mut out = vec![0.0f32; t.len()];
        for (orow, row) in out.chunks_exact_mut(k).zip(t.data().chunks_exact(k)) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let mut z = 0.0f64;
            for &v in row {
                z += ((v as f64) - m).exp();
            }
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = ((((v as f64) - m).exp()) / z) as f32;
            }
        }
        let v = Tensor::from_vec(t.shape(), out)?;
        Ok(self.push(v, self.rg(a), Op::Softmax(a)))
    }

    /// Broadcast per-frame per-channel offsets (T,C) over a (T,H,W,C) volume.
    pub fn broadcast_tc(&mut self, a: VarId, h: usize, w: usize) -> Result<VarId> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(CoreError::shape(
                "broadcast_tc",
                format!("expected (T,C), got {:?}", t.shape()),
            ));
        }
        let (tt, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0f32; tt * h * w * c];
        for ti in 0..tt {
            let src = &t.data()[ti * c..(ti + 1) * c];
            for hw in 0..h * w {
                let dst = (ti * h * w + hw) * c;
                out[dst..dst + c].copy_from_slice(src);
            }
        }
        let v = Tensor::from_vec(&[tt, h, w, c], out)?;
        Ok(self.push(v, self.rg(a), Op::BroadcastTc { x: a, h, w }))
    }

    /// Contiguous slice along the leading axis.
    pub fn slice_frames(&mut self, a: VarId, t0: usize, len: usize) -> Result<VarId> {
        let t = self.value(a);
        let n0 = *t
            .shape()
            .first()
            .ok_or_else(|| CoreError::shape("slice_frames", "rank-0 tensor".to_string()))?;
        if t0 + len > n0 || len == 0 {
            return Err(CoreError::invalid(
                "slice_frames",
                format!("slice [{t0}, {}) out of axis length {n0}", t0 + len),
            ));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[t0 * inner..(t0 + len) * inner].to_vec();
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(v, self.rg(a), Op::SliceFrames { x: a, t0 }))
    }

    /// out = a where mask == 0, b where mask == 1 (elementwise lerp by mask).
    pub fn assign_masked(&mut self, a: VarId, b: VarId, mask: &Tensor) -> Result<VarId> {
        self.same_shape("assign_masked", a, b)?;
        if self.value(a).shape() != mask.shape() {
            return Err(CoreError::shape(
                "assign_masked",
                format!("{:?} vs mask {:?}", self.value(a).shape(), mask.shape()),
            ));
        }
        let mut out = vec![0.0f32; mask.len()];
        for (((o, &av), &bv), &mv) in out
            .iter_mut()
            .zip(self.value(a).data())
            .zip(self.value(b).data())
            .zip(mask.data())
        {
            *o = av * (1.0 - mv) + bv * mv;
        }
        let v = Tensor::from_vec(mask.shape(), out)?;
        Ok(self.push(
            v,
            self.rg(a) || self.rg(b),
            Op::AssignMasked {
                a,
                b,
                mask: mask.clone(),
            },
        ))
    }

    // ---- linear algebra / convolution ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::shape(
                "matmul",
                format!("{:?} x {:?}", sa, sb),
            ));
        }
        let v = kernels::matmul_forward(self.value(a), self.value(b));
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Matmul(a, b)))
    }

    /// Add a vector along the last axis.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(CoreError::shape(
                "add_bias",
                format!("{:?} + bias {:?}", sa, sb),
            ));
        }
        let n = sb[0];
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(self.value(bias).data()) {
                *v += bv;
            }
        }
        let v = Tensor::from_vec(sa, out)?;
        Ok(self.push(v, self.rg(a) || self.rg(bias), Op::AddBias(a, bias)))
    }

    pub fn conv3d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<VarId> {
        let xs = dims5(self.value(x).shape(), "conv3d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 5 || ws[4] != xs[4] {
            return Err(CoreError::shape(
                "conv3d",
                format!("input {:?} vs weight {:?}", xs, ws),
            ));
        }
        let geom = ConvGeom {
            kernel: [ws[1], ws[2], ws[3]],
            stride,
            pad,
        };
        if geom.out_dims(xs[1], xs[2], xs[3]).is_none() {
            return Err(CoreError::shape(
                "conv3d",
                format!("kernel {:?} does not fit input {:?}", geom.kernel, xs),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [ws[0]] {
                return Err(CoreError::shape(
                    "conv3d",
                    format!("bias {:?} vs Cout {}", self.value(b).shape(), ws[0]),
                ));
            }
        }
        let v = kernels::conv3d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || bias.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(v, rg, Op::Conv3d { x, w, bias, geom }))
    }

    pub fn conv_t3d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<VarId> {
        let xs = dims5(self.value(x).shape(), "conv_t3d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 5 || ws[0] != xs[4] {
            return Err(CoreError::shape(
                "conv_t3d",
                format!("input {:?} vs weight {:?}", xs, ws),
            ));
        }
        let geom = ConvGeom {
            kernel: [ws[1], ws[2], ws[3]],
            stride,
            pad,
        };
        if geom.transpose_out_dims(xs[1], xs[2], xs[3]).is_none() {
            return Err(CoreError::shape(
                "conv_t3d",
                format!("geometry {:?} invalid for input {:?}", geom, xs),
            ));
        }
        let v = kernels::conv_t3d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || bias.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(v, rg, Op::ConvT3d { x, w, bias, geom }))
    }

    pub fn max_pool3d(&mut self, x: VarId, k: [usize; 3], s: [usize; 3]) -> Result<VarId> {
        let xs = dims5(self.value(x).shape(), "max_pool3d")?;
        let geom = ConvGeom {
            kernel: k,
            stride: s,
            pad: [0, 0, 0],
        };
        if geom.out_dims(xs[1], xs[2], xs[3]).is_none() {
            return Err(CoreError::shape(
                "max_pool3d",
                format!("window {:?} does not fit {:?}", k, xs),
            ));
        }
        let (v, argmax) = kernels::max_pool3d_forward(self.value(x), k, s);
        Ok(self.push(v, self.rg(x), Op::MaxPool3d { x, argmax }))
    }

    pub fn avg_pool3d(&mut self, x: VarId, k: [usize; 3], s: [usize; 3]) -> Result<VarId> {
        let xs = dims5(self.value(x).shape(), "avg_pool3d")?;
        let geom = ConvGeom {
            kernel: k,
            stride: s,
            pad: [0, 0, 0],
        };
        if geom.out_dims(xs[1], xs[2], xs[3]).is_none() {
            return Err(CoreError::shape(
                "avg_pool3d",
                format!("window {:?} does not fit {:?}", k, xs),
            ));
        }
        let v = kernels::avg_pool3d_forward(self.value(x), k, s);
        Ok(self.push(v, self.rg(x), Op::AvgPool3d { x, k, s }))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        dims5(self.value(x).shape(), "global_avg_pool")?;
        let v = kernels::global_avg_pool_forward(self.value(x));
        Ok(self.push(v, self.rg(x), Op::GlobalAvgPool(x)))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.value(a).sum_f64();
        self.push_scalar(
            Tensor::scalar(s as f32),
            self.rg(a),
            Op::SumAll(a),
            Some(s),
        )
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let s = self.value(a).mean_f64();
        self.push_scalar(
            Tensor::scalar(s as f32),
            self.rg(a),
            Op::MeanAll(a),
            Some(s),
        )
    }

    pub fn max_all(&mut self, a: VarId) -> VarId {
        let data = self.value(a).data();
        let mut best = f32::NEG_INFINITY;
        let mut argmax = 0usize;
        for (i, &v) in data.iter().enumerate() {
            if v > best {
                best = v;
                argmax = i;
            }
        }
        self.push_scalar(
            Tensor::scalar(best),
            self.rg(a),
            Op::MaxAll { x: a, argmax },
            Some(best as f64),
        )
    }

    /// Sum of absolute values.
    pub fn l1_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data().iter().map(|&v| v.abs() as f64).sum();
        self.push_scalar(Tensor::scalar(s as f32), self.rg(a), Op::L1All(a), Some(s))
    }

    // ---- losses ----

    /// Mean negative log-softmax probability of the true class.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(CoreError::shape(
                "cross_entropy",
                format!("logits {:?} vs {} labels", t.shape(), labels.len()),
            ));
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(CoreError::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let b = labels.len();
        let mut probs = vec![0.0f32; t.len()];
        let mut total = 0.0f64;
        for (bi, (prow, row)) in probs
            .chunks_exact_mut(k)
            .zip(t.data().chunks_exact(k))
            .enumerate()
        {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let mut z = 0.0f64;
            for &v in row {
                z += ((v as f64) - m).exp();
            }
            let lse = m + z.ln();
            total += lse - row[labels[bi]] as f64;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (((v as f64) - lse).exp()) as f32;
            }
        }
        let loss = total / b as f64;
        let probs = Tensor::from_vec(t.shape(), probs)?;
        Ok(self.push_scalar(
            Tensor::scalar(loss as f32),
            self.rg(logits),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Some(loss),
        ))
    }

    /// Margin loss max(z_y - max_{j != y} z_j, -m), averaged over the batch.
    pub fn cw_margin(&mut self, logits: VarId, labels: &[usize], margin: f32) -> Result<VarId> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(CoreError::shape(
                "cw_margin",
                format!("logits {:?} vs {} labels", t.shape(), labels.len()),
            ));
        }
        let k = t.shape()[1];
        if k < 2 {
            return Err(CoreError::invalid("cw_margin", "need at least 2 classes"));
        }
        if margin < 0.0 {
            return Err(CoreError::invalid("cw_margin", "margin must be >= 0"));
        }
        let b = labels.len();
        let mut other = Vec::with_capacity(b);
        let mut total = 0.0f64;
        for (bi, row) in t.data().chunks_exact(k).enumerate() {
            let y = labels[bi];
            if y >= k {
                return Err(CoreError::invalid(
                    "cw_margin",
                    format!("label {y} out of range for {k} classes"),
                ));
            }
            let (mut best, mut best_j) = (f32::NEG_INFINITY, 0usize);
            for (j, &v) in row.iter().enumerate() {
                if j != y && v > best {
                    best = v;
                    best_j = j;
                }
            }
            let m = (row[y] - best) as f64;
            if m > -(margin as f64) {
                total += m;
                other.push(Some(best_j));
            } else {
                total += -(margin as f64);
                other.push(None);
            }
        }
        let loss = total / b as f64;
        Ok(self.push_scalar(
            Tensor::scalar(loss as f32),
            self.rg(logits),
            Op::CwMargin {
                logits,
                labels: labels.to_vec(),
                other,
            },
            Some(loss),
        ))
    }

    // ---- backward ----

    /// Populate grads of every requires-grad ancestor of a scalar root.
    /// Existing grads are cleared first.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(CoreError::invalid(
                "backward",
                format!(
                    "root must be scalar, got shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        self.reset_grads();
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn acc(&mut self, id: VarId, contrib: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gv, cv) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gv += cv;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn step_backward(&mut self, i: usize) {
        // Split so the node's own grad/value can be read while inputs are written.
        let g = self.nodes[i].grad.take().expect("checked by caller");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                self.acc(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = g.mul(&self.nodes[b.0].value).expect("shapes recorded");
                let gb = g.mul(&self.nodes[a.0].value).expect("shapes recorded");
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.acc(a, g.clone());
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                self.acc(a, g.scale(c));
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (ga, gb) = kernels::matmul_backward(
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    &g,
                    self.rg(a),
                    self.rg(b),
                );
                if let Some(ga) = ga {
                    self.acc(a, ga);
                }
                if let Some(gb) = gb {
                    self.acc(b, gb);
                }
            }
            Op::AddBias(a, bias) => {
                let (a, bias) = (*a, *bias);
                if self.rg(bias) {
                    let n = self.nodes[bias.0].value.len();
                    let mut acc = vec![0.0f64; n];
                    for row in g.data().chunks_exact(n) {
                        for (av, &gv) in acc.iter_mut().zip(row) {
                            *av += gv as f64;
                        }
                    }
                    let gb =
                        Tensor::from_vec(&[n], acc.iter().map(|&v| v as f32).collect()).unwrap();
                    self.acc(bias, gb);
                }
                self.acc(a, g.clone());
            }
            Op::Conv3d { x, w, bias, geom } => {
                let (x, w, bias, geom) = (*x, *w, *bias, *geom);
                let grads = kernels::conv3d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    &g,
                    &geom,
                    self.rg(x),
                    self.rg(w),
                    bias.map(|b| self.rg(b)).unwrap_or(false),
                );
                if let Some(gi) = grads.input {
                    self.acc(x, gi);
                }
                if let Some(gw) = grads.weight {
                    self.acc(w, gw);
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    self.acc(b, gb);
                }
            }
            Op::ConvT3d { x, w, bias, geom } => {
                let (x, w, bias, geom) = (*x, *w, *bias, *geom);
                let grads = kernels::conv_t3d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    &g,
                    &geom,
                    self.rg(x),
                    self.rg(w),
                    bias.map(|b| self.rg(b)).unwrap_or(false),
                );
                if let Some(gi) = grads.input {
                    self.acc(x, gi);
                }
                if let Some(gw) = grads.weight {
                    self.acc(w, gw);
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    self.acc(b, gb);
                }
            }
            Op::MaxPool3d { x, argmax } => {
                let x = *x;
                let gi =
                    kernels::max_pool3d_backward(&g, argmax, self.nodes[x.0].value.shape());
                self.acc(x, gi);
            }
            Op::AvgPool3d { x, k, s } => {
                let (x, k, s) = (*x, *k, *s);
                let gi = kernels::avg_pool3d_backward(&g, self.nodes[x.0].value.shape(), k, s);
                self.acc(x, gi);
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                let gi = kernels::global_avg_pool_backward(&g, self.nodes[x.0].value.shape());
                self.acc(x, gi);
            }
            Op::Relu(x) => {
                let x = *x;
                let gi = Tensor::from_vec(
                    self.nodes[x.0].value.shape(),
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                self.acc(x, gi);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let y = &self.nodes[i].value;
                let gi = Tensor::from_vec(
                    y.shape(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
                        .collect(),
                )
                .unwrap();
                self.acc(x, gi);
            }
            Op::Softplus(x) => {
                let x = *x;
                let gi = Tensor::from_vec(
                    self.nodes[x.0].value.shape(),
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * (1.0 / (1.0 + (-xv).exp())))
                        .collect(),
                )
                .unwrap();
                self.acc(x, gi);
            }
            Op::Softmax(x) => {
                let x = *x;
                let y = &self.nodes[i].value;
                let k = *y.shape().last().unwrap();
                let mut gi = vec![0.0f32; y.len()];
                for ((grow, yrow), orow) in g
                    .data()
                    .chunks_exact(k)
                    .zip(y.data().chunks_exact(k))
                    .zip(gi.chunks_exact_mut(k))
                {
                    let dot: f64 = grow
                        .iter()
                        .zip(yrow)
                        .map(|(&a, &b)| (a as f64) * (b as f64))
                        .sum();
                    for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = ((gv as f64 - dot) * yv as f64) as f32;
                    }
                }
                self.acc(x, Tensor::from_vec(y.shape(), gi).unwrap());
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let gi = Tensor::from_vec(
                    self.nodes[x.0].value.shape(),
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > lo && xv < hi { gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                self.acc(x, gi);
            }
            Op::Sign => {}
            Op::Reshape(x) => {
                let x = *x;
                let gi = Tensor::from_vec(self.nodes[x.0].value.shape(), g.data().to_vec()).unwrap();
                self.acc(x, gi);
            }
            Op::BroadcastTc { x, h, w } => {
                let (x, h, w) = (*x, *h, *w);
                let (tt, c) = (
                    self.nodes[x.0].value.shape()[0],
                    self.nodes[x.0].value.shape()[1],
                );
                let mut acc = vec![0.0f64; tt * c];
                for ti in 0..tt {
                    for hw in 0..h * w {
                        let src = (ti * h * w + hw) * c;
                        for ci in 0..c {
                            acc[ti * c + ci] += g.data()[src + ci] as f64;
                        }
                    }
                }
                let gi =
                    Tensor::from_vec(&[tt, c], acc.iter().map(|&v| v as f32).collect()).unwrap();
                self.acc(x, gi);
            }
            Op::SliceFrames { x, t0 } => {
                let (x, t0) = (*x, *t0);
                let shape = self.nodes[x.0].value.shape().to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut gi = vec![0.0f32; self.nodes[x.0].value.len()];
                gi[t0 * inner..t0 * inner + g.len()].copy_from_slice(g.data());
                self.acc(x, Tensor::from_vec(&shape, gi).unwrap());
            }
            Op::AssignMasked { a, b, mask } => {
                let (a, b) = (*a, *b);
                let ga = Tensor::from_vec(
                    mask.shape(),
                    mask.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&mv, &gv)| gv * (1.0 - mv))
                        .collect(),
                )
                .unwrap();
                let gb = Tensor::from_vec(
                    mask.shape(),
                    mask.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&mv, &gv)| gv * mv)
                        .collect(),
                )
                .unwrap();
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::SumAll(x) => {
                let x = *x;
                let gv = g.item();
                let gi = Tensor::full(self.nodes[x.0].value.shape(), gv);
                self.acc(x, gi);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.len() as f32;
                let gi = Tensor::full(self.nodes[x.0].value.shape(), g.item() / n);
                self.acc(x, gi);
            }
            Op::MaxAll { x, argmax } => {
                let (x, argmax) = (*x, *argmax);
                let mut gi = Tensor::zeros(self.nodes[x.0].value.shape());
                gi.data_mut()[argmax] = g.item();
                self.acc(x, gi);
            }
            Op::L1All(x) => {
                let x = *x;
                let gv = g.item();
                let gi = self.nodes[x.0].value.sign().scale(gv);
                self.acc(x, gi);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let b = labels.len();
                let scale = g.item() / b as f32;
                let k = probs.shape()[1];
                let mut gi = probs.scale(scale);
                for (bi, &y) in labels.iter().enumerate() {
                    gi.data_mut()[bi * k + y] -= scale;
                }
                self.acc(logits, gi);
            }
            Op::CwMargin {
                logits,
                labels,
                other,
            } => {
                let logits_id = *logits;
                let b = labels.len();
                let scale = g.item() / b as f32;
                let k = self.nodes[logits_id.0].value.shape()[1];
                let mut gi = Tensor::zeros(self.nodes[logits_id.0].value.shape());
                for bi in 0..b {
                    if let Some(j) = other[bi] {
                        gi.data_mut()[bi * k + labels[bi]] += scale;
                        gi.data_mut()[bi * k + j] -= scale;
                    }
                }
                self.acc(logits_id, gi);
            }
        }
        self.nodes[i].grad = Some(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn clamp_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.5, 2.0]).unwrap(), true);
        let c = tape.clamp(x, 0.0, 1.0);
        let s = tape.sum_all(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_is_repeatable_bitwise() {
        let mut rng = crate::rng::StreamRng::new(1, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng), true);
        let w = tape.leaf(Tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut rng), true);
        let y = tape.matmul(x, w).unwrap();
        let r = tape.relu(y);
        let loss = tape.mean_all(r);
        tape.backward(loss).unwrap();
        let g1 = tape.grad(x).unwrap().data().to_vec();
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(g1, tape.grad(x).unwrap().data());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 101]), false);
        let l = tape.cross_entropy(z, &[17]).unwrap();
        assert!((tape.item_f64(l) - (101.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 5]), false);
        assert!(tape.cross_entropy(z, &[5]).is_err());
    }

    #[test]
    fn cw_margin_examples() {
        // z = [3,1], y = 0, m = 0.05 -> 2
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(&[1, 2], vec![3.0, 1.0]).unwrap(), false);
        let l = tape.cw_margin(z, &[0], 0.05).unwrap();
        assert!((tape.item_f64(l) - 2.0).abs() < 1e-9);
        // z_y far below all others -> -m
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(&[1, 3], vec![-9.0, 1.0, 2.0]).unwrap(), false);
        let l = tape.cw_margin(z, &[0], 0.05).unwrap();
        assert!((tape.item_f64(l) + 0.05).abs() < 1e-9);
    }

    #[test]
    fn sign_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![2.5, -0.1, 0.0]).unwrap(), true);
        let s = tape.sign(x);
        assert_eq!(tape.value(s).data(), &[1.0, -1.0, 0.0]);
        let l = tape.sum_all(s);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none() || tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_tc_structure() {
        let mut tape = Tape::new();
        let off = tape.leaf(Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap(), true);
        let b = tape.broadcast_tc(off, 4, 5).unwrap();
        assert_eq!(tape.value(b).shape(), &[2, 4, 5, 3]);
        // constant over H,W within each (t,c)
        let v = tape.value(b);
        for t in 0..2 {
            for c in 0..3 {
                let want = (t * 3 + c) as f32;
                for hw in 0..20 {
                    assert_eq!(v.data()[(t * 20 + hw) * 3 + c], want);
                }
            }
        }
        let s = tape.sum_all(b);
        tape.backward(s).unwrap();
        assert!(tape.grad(off).unwrap().data().iter().all(|&g| g == 20.0));
    }
}
