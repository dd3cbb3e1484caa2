//! Desk-scale 3D CNN models: classifier F, generator G and discriminator D.

use crate::error::{CoreError, Result};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor, VarId};

/// One (possibly transposed) 3D convolution layer with bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub transposed: bool,
}

impl ConvLayer {
    /// Standard conv; weight layout (Cout, Kt, Kh, Kw, Cin), Kaiming fan-in init.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut StreamRng,
    ) -> ConvLayer {
        let fan_in = (k * k * k * in_ch) as f32;
        let std = (2.0 / fan_in).sqrt();
        ConvLayer {
            weight: Tensor::rand_normal(&[out_ch, k, k, k, in_ch], 0.0, std, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride: [stride; 3],
            pad: [pad; 3],
            transposed: false,
        }
    }

    /// Transposed conv; weight layout (Cin, Kt, Kh, Kw, Cout).
    pub fn new_transposed(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut StreamRng,
    ) -> ConvLayer {
        let fan_in = (k * k * k * in_ch) as f32;
        let std = (2.0 / fan_in).sqrt();
        ConvLayer {
            weight: Tensor::rand_normal(&[in_ch, k, k, k, out_ch], 0.0, std, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride: [stride; 3],
            pad: [pad; 3],
            transposed: true,
        }
    }

    fn forward(&self, tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        if self.transposed {
            tape.conv_t3d(x, w, Some(b), self.stride, self.pad)
        } else {
            tape.conv3d(x, w, Some(b), self.stride, self.pad)
        }
    }
}

/// Parameter ids created by binding a model onto a tape, in declaration order.
#[derive(Debug, Clone)]
pub struct TapeBinding {
    pub ids: Vec<VarId>,
}

impl TapeBinding {
    /// Collect parameter gradients after a backward pass (zeros where unset).
    pub fn grads(&self, tape: &Tape, shapes: &[Vec<usize>]) -> Vec<Tensor> {
        self.ids
            .iter()
            .zip(shapes)
            .map(|(&id, shape)| match tape.grad(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(shape),
            })
            .collect()
    }
}

fn bind_conv(tape: &mut Tape, layer: &ConvLayer, trainable: bool) -> (VarId, VarId) {
    (
        tape.leaf(layer.weight.clone(), trainable),
        tape.leaf(layer.bias.clone(), trainable),
    )
}

/// Action classifier: 3 blocks of [3x3x3 conv, relu, 2x max pool] with
/// channel widths (16, 32, 64), global average pool, linear head.
#[derive(Debug, Clone)]
pub struct ClassifierF {
    pub blocks: Vec<ConvLayer>,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    pub num_classes: usize,
}

pub const CLASSIFIER_WIDTHS: [usize; 3] = [16, 32, 64];

impl ClassifierF {
    pub fn new(num_classes: usize, in_ch: usize, rng: &mut StreamRng) -> ClassifierF {
        let mut blocks = Vec::new();
        let mut c = in_ch;
        for &w in CLASSIFIER_WIDTHS.iter() {
            blocks.push(ConvLayer::new(c, w, 3, 1, 1, rng));
            c = w;
        }
        let std = (1.0 / c as f32).sqrt();
        ClassifierF {
            blocks,
            fc_weight: Tensor::rand_normal(&[c, num_classes], 0.0, std, rng),
            fc_bias: Tensor::zeros(&[num_classes]),
            num_classes,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.push(&b.weight);
            p.push(&b.bias);
        }
        p.push(&self.fc_weight);
        p.push(&self.fc_bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.push(&mut b.weight);
            p.push(&mut b.bias);
        }
        p.push(&mut self.fc_weight);
        p.push(&mut self.fc_bias);
        p
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(CoreError::invalid(
                "set_params",
                format!("expected {} tensors, got {}", slots.len(), values.len()),
            ));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(CoreError::shape(
                    "set_params",
                    format!("{:?} vs {:?}", slot.shape(), v.shape()),
                ));
            }
            **slot = v;
        }
        Ok(())
    }

    /// Insert parameters onto a tape once; the binding can drive several
    /// forward passes whose gradients then accumulate.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TapeBinding {
        let mut ids = Vec::new();
        for block in &self.blocks {
            let (w, b) = bind_conv(tape, block, trainable);
            ids.push(w);
            ids.push(b);
        }
        ids.push(tape.leaf(self.fc_weight.clone(), trainable));
        ids.push(tape.leaf(self.fc_bias.clone(), trainable));
        TapeBinding { ids }
    }

    pub fn forward_bound(&self, tape: &mut Tape, x: VarId, bind: &TapeBinding) -> Result<VarId> {
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, h, bind.ids[2 * i], bind.ids[2 * i + 1])?;
            h = tape.relu(h);
            h = tape.max_pool3d(h, [2, 2, 2], [2, 2, 2])?;
        }
        let g = tape.global_avg_pool(h)?;
        let n = bind.ids.len();
        let z = tape.matmul(g, bind.ids[n - 2])?;
        tape.add_bias(z, bind.ids[n - 1])
    }

    /// Forward pass to logits (B, K). `trainable` marks parameters as
    /// requiring gradients on this tape.
    pub fn forward(&self, tape: &mut Tape, x: VarId, trainable: bool) -> Result<(VarId, TapeBinding)> {
        let bind = self.bind(tape, trainable);
        let z = self.forward_bound(tape, x, &bind)?;
        Ok((z, bind))
    }
}

/// Perturbation elimination generator: strided 4x4x4 conv encoder, matching
/// transposed conv decoder, residual connection, final clamp to [0, 1].
#[derive(Debug, Clone)]
pub struct GeneratorG {
    pub enc: Vec<ConvLayer>,
    pub dec: Vec<ConvLayer>,
}

pub const GENERATOR_WIDTHS: [usize; 2] = [32, 64];

impl GeneratorG {
    pub fn new(in_ch: usize, rng: &mut StreamRng) -> GeneratorG {
        let mut enc = Vec::new();
        let mut c = in_ch;
        for &w in GENERATOR_WIDTHS.iter() {
            enc.push(ConvLayer::new(c, w, 4, 2, 1, rng));
            c = w;
        }
        let mut dec = Vec::new();
        let mut widths_back: Vec<usize> = GENERATOR_WIDTHS[..GENERATOR_WIDTHS.len() - 1].to_vec();
        widths_back.reverse();
        widths_back.push(in_ch);
        for &w in &widths_back {
            dec.push(ConvLayer::new_transposed(c, w, 4, 2, 1, rng));
            c = w;
        }
        // residual design: a small last layer keeps G near the identity at init
        if let Some(last) = dec.last_mut() {
            last.weight = last.weight.scale(0.1);
        }
        GeneratorG { enc, dec }
    }

    /// Total spatial stride of the encoder; input dims must divide it.
    pub fn total_stride(&self) -> usize {
        1 << self.enc.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for l in self.enc.iter().chain(&self.dec) {
            p.push(&l.weight);
            p.push(&l.bias);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for l in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            p.push(&mut l.weight);
            p.push(&mut l.bias);
        }
        p
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(CoreError::invalid(
                "set_params",
                format!("expected {} tensors, got {}", slots.len(), values.len()),
            ));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(CoreError::shape(
                    "set_params",
                    format!("{:?} vs {:?}", slot.shape(), v.shape()),
                ));
            }
            **slot = v;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TapeBinding {
        let mut ids = Vec::new();
        for l in self.enc.iter().chain(&self.dec) {
            let (w, b) = bind_conv(tape, l, trainable);
            ids.push(w);
            ids.push(b);
        }
        TapeBinding { ids }
    }

    pub fn forward_bound(&self, tape: &mut Tape, x: VarId, bind: &TapeBinding) -> Result<VarId> {
        let mut h = x;
        for (i, l) in self.enc.iter().enumerate() {
            h = l.forward(tape, h, bind.ids[2 * i], bind.ids[2 * i + 1])?;
            h = tape.relu(h);
        }
        let off = self.enc.len();
        for (i, l) in self.dec.iter().enumerate() {
            h = l.forward(tape, h, bind.ids[2 * (off + i)], bind.ids[2 * (off + i) + 1])?;
            if i + 1 < self.dec.len() {
                h = tape.relu(h);
            }
        }
        let sum = tape.add(h, x)?;
        Ok(tape.clamp(sum, 0.0, 1.0))
    }

    pub fn forward(&self, tape: &mut Tape, x: VarId, trainable: bool) -> Result<(VarId, TapeBinding)> {
        let bind = self.bind(tape, trainable);
        let out = self.forward_bound(tape, x, &bind)?;
        Ok((out, bind))
    }

    /// Denoise a batch without recording gradients.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let (out, _) = self.forward(&mut tape, xid, false)?;
        Ok(tape.value(out).clone())
    }
}

/// GAN discriminator: 3 strided conv blocks, global pooling, one logit.
#[derive(Debug, Clone)]
pub struct DiscriminatorD {
    pub blocks: Vec<ConvLayer>,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

pub const DISCRIMINATOR_WIDTHS: [usize; 3] = [16, 32, 64];

/// Logits are clamped to this magnitude before the sigmoid so D's output
/// stays strictly inside (0, 1) in f32.
pub const D_LOGIT_CLAMP: f32 = 15.0;

impl DiscriminatorD {
    pub fn new(in_ch: usize, rng: &mut StreamRng) -> DiscriminatorD {
        let mut blocks = Vec::new();
        let mut c = in_ch;
        for &w in DISCRIMINATOR_WIDTHS.iter() {
            blocks.push(ConvLayer::new(c, w, 4, 2, 1, rng));
            c = w;
        }
        let std = (1.0 / c as f32).sqrt();
        DiscriminatorD {
            blocks,
            fc_weight: Tensor::rand_normal(&[c, 1], 0.0, std, rng),
            fc_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.push(&b.weight);
            p.push(&b.bias);
        }
        p.push(&self.fc_weight);
        p.push(&self.fc_bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.push(&mut b.weight);
            p.push(&mut b.bias);
        }
        p.push(&mut self.fc_weight);
        p.push(&mut self.fc_bias);
        p
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(CoreError::invalid(
                "set_params",
                format!("expected {} tensors, got {}", slots.len(), values.len()),
            ));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(CoreError::shape(
                    "set_params",
                    format!("{:?} vs {:?}", slot.shape(), v.shape()),
                ));
            }
            **slot = v;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TapeBinding {
        let mut ids = Vec::new();
        for block in &self.blocks {
            let (w, b) = bind_conv(tape, block, trainable);
            ids.push(w);
            ids.push(b);
        }
        ids.push(tape.leaf(self.fc_weight.clone(), trainable));
        ids.push(tape.leaf(self.fc_bias.clone(), trainable));
        TapeBinding { ids }
    }

    pub fn forward_logits_bound(
        &self,
        tape: &mut Tape,
        x: VarId,
        bind: &TapeBinding,
    ) -> Result<VarId> {
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, h, bind.ids[2 * i], bind.ids[2 * i + 1])?;
            h = tape.relu(h);
        }
        let g = tape.global_avg_pool(h)?;
        let n = bind.ids.len();
        let z = tape.matmul(g, bind.ids[n - 2])?;
        let z = tape.add_bias(z, bind.ids[n - 1])?;
        Ok(tape.clamp(z, -D_LOGIT_CLAMP, D_LOGIT_CLAMP))
    }

    /// Clamped logits (B, 1); feed these to the stable BCE losses.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        x: VarId,
        trainable: bool,
    ) -> Result<(VarId, TapeBinding)> {
        let bind = self.bind(tape, trainable);
        let z = self.forward_logits_bound(tape, x, &bind)?;
        Ok((z, bind))
    }

    /// Per-clip probability that the input is an original (real) video.
    pub fn prob(&self, x: &Tensor) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let (z, _) = self.forward_logits(&mut tape, xid, false)?;
        Ok(tape
            .value(z)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect())
    }
}

/// Anything an attack can differentiate through to class logits.
pub trait AttackTarget: Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, tape: &mut Tape, x: VarId) -> Result<VarId>;
}

impl AttackTarget for ClassifierF {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        Ok(self.forward(tape, x, false)?.0)
    }
}

/// Classifier behind a (frozen) denoising generator: F(G(x)).
pub struct GenThenClassify<'a> {
    pub generator: &'a GeneratorG,
    pub classifier: &'a ClassifierF,
}

impl AttackTarget for GenThenClassify<'_> {
    fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    fn logits(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let (g, _) = self.generator.forward(tape, x, false)?;
        Ok(self.classifier.forward(tape, g, false)?.0)
    }
}

/// Logits for a batch of clips, no gradients recorded.
pub fn classify(f: &ClassifierF, clips: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(clips.clone());
    let (z, _) = f.forward(&mut tape, x, false)?;
    Ok(tape.value(z).clone())
}

/// Logits for one unbatched (T,H,W,C) clip.
pub fn classify_clip(f: &ClassifierF, clip: &Tensor) -> Result<Tensor> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(CoreError::shape(
            "classify_clip",
            format!("expected (T,H,W,C), got {:?}", s),
        ));
    }
    let batched = clip.reshaped(&[1, s[0], s[1], s[2], s[3]])?;
    let z = classify(f, &batched)?;
    z.reshaped(&[f.num_classes])
}

/// Argmax predictions for a batch through any attack target.
pub fn predict(target: &dyn AttackTarget, clips: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let x = tape.constant(clips.clone());
    let z = target.logits(&mut tape, x)?;
    let logits = tape.value(z);
    let k = target.num_classes();
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroed_final_layer_gives_uniform_softmax() {
        let mut rng = StreamRng::new(1, 0);
        let mut f = ClassifierF::new(101, 3, &mut rng);
        f.fc_weight = Tensor::zeros(f.fc_weight.shape());
        f.fc_bias = Tensor::zeros(f.fc_bias.shape());
        let mut xr = StreamRng::new(2, 0);
        let x = Tensor::rand_uniform(&[2, 8, 8, 8, 3], 0.0, 1.0, &mut xr);
        let z = classify(&f, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let zt = tape.constant(z);
        let ce = tape.cross_entropy(zt, &[5, 9]).unwrap();
        assert!((tape.item_f64(ce) - (101.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn batch_of_one_matches_unbatched() {
        let mut rng = StreamRng::new(3, 0);
        let f = ClassifierF::new(10, 3, &mut rng);
        let mut xr = StreamRng::new(4, 0);
        let clip = Tensor::rand_uniform(&[8, 16, 16, 3], 0.0, 1.0, &mut xr);
        let single = classify_clip(&f, &clip).unwrap();
        let batched = classify(&f, &clip.reshaped(&[1, 8, 16, 16, 3]).unwrap()).unwrap();
        assert_eq!(single.data(), batched.data());
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let mut rng = StreamRng::new(5, 0);
        let g = GeneratorG::new(3, &mut rng);
        let mut xr = StreamRng::new(6, 0);
        let x = Tensor::rand_uniform(&[2, 8, 16, 16, 3], 0.0, 1.0, &mut xr);
        let y = g.apply(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn discriminator_output_strictly_inside_unit_interval() {
        let mut rng = StreamRng::new(7, 0);
        let d = DiscriminatorD::new(3, &mut rng);
        let mut xr = StreamRng::new(8, 0);
        let x = Tensor::rand_uniform(&[3, 8, 8, 8, 3], 0.0, 1.0, &mut xr);
        for p in d.prob(&x).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = StreamRng::new(9, 0);
        let f = ClassifierF::new(5, 3, &mut rng);
        let mut xr = StreamRng::new(10, 0);
        let x = Tensor::rand_uniform(&[1, 8, 8, 8, 3], 0.0, 1.0, &mut xr);
        let a = classify(&f, &x).unwrap();
        let b = classify(&f, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
