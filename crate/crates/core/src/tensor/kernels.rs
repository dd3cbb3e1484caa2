//! Raw numeric kernels behind the tape operations.
//!
//! Convolutions are im2col + single-threaded sgemm, parallelized across batch
//! samples. Anything that reduces across samples (weight gradients, bias
//! gradients) is computed per sample and folded in index order, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use super::Tensor;

/// C(m,n) = A(m,k) * B(k,n) + beta * C, row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 3D convolution: kernel, stride and padding along (T, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self, t: usize, h: usize, w: usize) -> Option<[usize; 3]> {
        let dim = |x: usize, k: usize, s: usize, p: usize| {
            let padded = x + 2 * p;
            if padded < k || s == 0 {
                None
            } else {
                Some((padded - k) / s + 1)
            }
        };
        Some([
            dim(t, self.kernel[0], self.stride[0], self.pad[0])?,
            dim(h, self.kernel[1], self.stride[1], self.pad[1])?,
            dim(w, self.kernel[2], self.stride[2], self.pad[2])?,
        ])
    }

    /// Output dims of the transposed convolution: (x-1)*stride - 2*pad + kernel.
    pub fn transpose_out_dims(&self, t: usize, h: usize, w: usize) -> Option<[usize; 3]> {
        let dim = |x: usize, k: usize, s: usize, p: usize| {
            let grown = (x - 1) * s + k;
            if x == 0 || grown <= 2 * p {
                None
            } else {
                Some(grown - 2 * p)
            }
        };
        Some([
            dim(t, self.kernel[0], self.stride[0], self.pad[0])?,
            dim(h, self.kernel[1], self.stride[1], self.pad[1])?,
            dim(w, self.kernel[2], self.stride[2], self.pad[2])?,
        ])
    }
}

struct SampleDims {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
}

/// Gather one sample into the patch matrix: rows are output positions,
/// columns are (kt, kh, kw, cin) in row-major order.
fn im2col(x: &[f32], d: &SampleDims, g: &ConvGeom, out_dims: [usize; 3], cols: &mut [f32]) {
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [to, ho, wo] = out_dims;
    let k_row = kt * kh * kw * d.c;
    cols.fill(0.0);
    for ot in 0..to {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((ot * ho + oh) * wo + ow) * k_row;
                for ikt in 0..kt {
                    let t = (ot * st + ikt) as isize - pt as isize;
                    if t < 0 || t as usize >= d.t {
                        continue;
                    }
                    for ikh in 0..kh {
                        let h = (oh * sh + ikh) as isize - ph as isize;
                        if h < 0 || h as usize >= d.h {
                            continue;
                        }
                        for ikw in 0..kw {
                            let w = (ow * sw + ikw) as isize - pw as isize;
                            if w < 0 || w as usize >= d.w {
                                continue;
                            }
                            let src =
                                (((t as usize * d.h + h as usize) * d.w + w as usize) * d.c) as usize;
                            let dst = row + ((ikt * kh + ikh) * kw + ikw) * d.c;
                            cols[dst..dst + d.c].copy_from_slice(&x[src..src + d.c]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of the patch matrix back into a sample (adjoint of im2col).
fn col2im(cols: &[f32], d: &SampleDims, g: &ConvGeom, out_dims: [usize; 3], x: &mut [f32]) {
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [to, ho, wo] = out_dims;
    let k_row = kt * kh * kw * d.c;
    for ot in 0..to {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((ot * ho + oh) * wo + ow) * k_row;
                for ikt in 0..kt {
                    let t = (ot * st + ikt) as isize - pt as isize;
                    if t < 0 || t as usize >= d.t {
                        continue;
                    }
                    for ikh in 0..kh {
                        let h = (oh * sh + ikh) as isize - ph as isize;
                        if h < 0 || h as usize >= d.h {
                            continue;
                        }
                        for ikw in 0..kw {
                            let w = (ow * sw + ikw) as isize - pw as isize;
                            if w < 0 || w as usize >= d.w {
                                continue;
                            }
                            let dst =
                                (((t as usize * d.h + h as usize) * d.w + w as usize) * d.c) as usize;
                            let src = row + ((ikt * kh + ikh) * kw + ikw) * d.c;
                            for i in 0..d.c {
                                x[dst + i] += cols[src + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward 3D convolution.
/// x: (B,T,H,W,Cin), w: (Cout,Kt,Kh,Kw,Cin), bias: (Cout) optional.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let xs = x.shape();
    let (b, t, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let cout = w.shape()[0];
    let od = g.out_dims(t, h, wd).expect("validated by caller");
    let [to, ho, wo] = od;
    let m = to * ho * wo;
    let k_row = g.kernel[0] * g.kernel[1] * g.kernel[2] * cin;
    let sample_in = t * h * wd * cin;
    let sample_out = m * cout;
    let mut out = vec![0.0f32; b * sample_out];
    let d = SampleDims {
        t,
        h,
        w: wd,
        c: cin,
    };

    out.par_chunks_mut(sample_out).enumerate().for_each(|(bi, o)| {
        let xi = &x.data()[bi * sample_in..(bi + 1) * sample_in];
        let mut cols = vec![0.0f32; m * k_row];
        im2col(xi, &d, g, od, &mut cols);
        // out(m, cout) = cols(m, k) * w^T(k, cout)
        gemm(
            m,
            k_row,
            cout,
            &cols,
            k_row as isize,
            1,
            w.data(),
            1,
            k_row as isize,
            0.0,
            o,
        );
        if let Some(bias) = bias {
            for row in o.chunks_exact_mut(cout) {
                for (v, &bv) in row.iter_mut().zip(bias.data()) {
                    *v += bv;
                }
            }
        }
    });
    Tensor::from_vec(&[b, to, ho, wo, cout], out).expect("conv3d shape")
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Backward 3D convolution. Grad buffers are only computed when requested.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let xs = x.shape();
    let (b, t, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let cout = w.shape()[0];
    let od = g.out_dims(t, h, wd).expect("validated");
    let [to, ho, wo] = od;
    let m = to * ho * wo;
    let k_row = g.kernel[0] * g.kernel[1] * g.kernel[2] * cin;
    let sample_in = t * h * wd * cin;
    let sample_out = m * cout;
    let d = SampleDims {
        t,
        h,
        w: wd,
        c: cin,
    };

    let input = need_input.then(|| {
        let mut gi = vec![0.0f32; b * sample_in];
        gi.par_chunks_mut(sample_in).enumerate().for_each(|(bi, gix)| {
            let go = &gout.data()[bi * sample_out..(bi + 1) * sample_out];
            let mut dcols = vec![0.0f32; m * k_row];
            // dcols(m, k) = gout(m, cout) * w(cout, k)
            gemm(
                m,
                cout,
                k_row,
                go,
                cout as isize,
                1,
                w.data(),
                k_row as isize,
                1,
                0.0,
                &mut dcols,
            );
            col2im(&dcols, &d, g, od, gix);
        });
        Tensor::from_vec(xs, gi).expect("conv3d input grad shape")
    });

    let weight = need_weight.then(|| {
        let per_sample: Vec<Vec<f32>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let xi = &x.data()[bi * sample_in..(bi + 1) * sample_in];
                let go = &gout.data()[bi * sample_out..(bi + 1) * sample_out];
                let mut cols = vec![0.0f32; m * k_row];
                im2col(xi, &d, g, od, &mut cols);
                let mut gw = vec![0.0f32; cout * k_row];
                // gw(cout, k) = gout^T(cout, m) * cols(m, k)
                gemm(
                    cout,
                    m,
                    k_row,
                    go,
                    1,
                    cout as isize,
                    &cols,
                    k_row as isize,
                    1,
                    0.0,
                    &mut gw,
                );
                gw
            })
            .collect();
        let mut acc = vec![0.0f32; cout * k_row];
        for gw in &per_sample {
            for (a, &v) in acc.iter_mut().zip(gw) {
                *a += v;
            }
        }
        Tensor::from_vec(w.shape(), acc).expect("conv3d weight grad shape")
    });

    let bias = need_bias.then(|| {
        let mut acc = vec![0.0f64; cout];
        for row in gout.data().chunks_exact(cout) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        Tensor::from_vec(&[cout], acc.iter().map(|&v| v as f32).collect()).expect("bias grad")
    });

    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// Forward transposed 3D convolution.
/// x: (B,T,H,W,Cin), w: (Cin,Kt,Kh,Kw,Cout), bias: (Cout) optional.
pub fn conv_t3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let xs = x.shape();
    let (b, t, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let cout = *w.shape().last().unwrap();
    let od = g.transpose_out_dims(t, h, wd).expect("validated");
    let [to, ho, wo] = od;
    let m = t * h * wd;
    let k_row = g.kernel[0] * g.kernel[1] * g.kernel[2] * cout;
    let sample_in = m * cin;
    let sample_out = to * ho * wo * cout;
    // scatter geometry: input positions play the role of conv output rows
    let scatter_dims = SampleDims {
        t: to,
        h: ho,
        w: wo,
        c: cout,
    };
    let mut out = vec![0.0f32; b * sample_out];

    out.par_chunks_mut(sample_out).enumerate().for_each(|(bi, o)| {
        let xi = &x.data()[bi * sample_in..(bi + 1) * sample_in];
        let mut cols = vec![0.0f32; m * k_row];
        // cols(m, k) = x(m, cin) * w(cin, k)
        gemm(
            m,
            cin,
            k_row,
            xi,
            cin as isize,
            1,
            w.data(),
            k_row as isize,
            1,
            0.0,
            &mut cols,
        );
        col2im(&cols, &scatter_dims, g, [t, h, wd], o);
        if let Some(bias) = bias {
            for row in o.chunks_exact_mut(cout) {
                for (v, &bv) in row.iter_mut().zip(bias.data()) {
                    *v += bv;
                }
            }
        }
    });
    Tensor::from_vec(&[b, to, ho, wo, cout], out).expect("conv_t3d shape")
}

/// Backward transposed 3D convolution.
pub fn conv_t3d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let xs = x.shape();
    let (b, t, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let cout = *w.shape().last().unwrap();
    let od = g.transpose_out_dims(t, h, wd).expect("validated");
    let [to, ho, wo] = od;
    let m = t * h * wd;
    let k_row = g.kernel[0] * g.kernel[1] * g.kernel[2] * cout;
    let sample_in = m * cin;
    let sample_out = to * ho * wo * cout;
    let gather_dims = SampleDims {
        t: to,
        h: ho,
        w: wo,
        c: cout,
    };

    let input = need_input.then(|| {
        let mut gi = vec![0.0f32; b * sample_in];
        gi.par_chunks_mut(sample_in).enumerate().for_each(|(bi, gix)| {
            let go = &gout.data()[bi * sample_out..(bi + 1) * sample_out];
            let mut gcols = vec![0.0f32; m * k_row];
            im2col(go, &gather_dims, g, [t, h, wd], &mut gcols);
            // gi(m, cin) = gcols(m, k) * w^T(k, cin)
            gemm(
                m,
                k_row,
                cin,
                &gcols,
                k_row as isize,
                1,
                w.data(),
                1,
                k_row as isize,
                0.0,
                gix,
            );
        });
        Tensor::from_vec(xs, gi).expect("conv_t3d input grad shape")
    });

    let weight = need_weight.then(|| {
        let per_sample: Vec<Vec<f32>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let xi = &x.data()[bi * sample_in..(bi + 1) * sample_in];
                let go = &gout.data()[bi * sample_out..(bi + 1) * sample_out];
                let mut gcols = vec![0.0f32; m * k_row];
                im2col(go, &gather_dims, g, [t, h, wd], &mut gcols);
                let mut gw = vec![0.0f32; cin * k_row];
                // gw(cin, k) = x^T(cin, m) * gcols(m, k)
                gemm(
                    cin,
                    m,
                    k_row,
                    xi,
                    1,
                    cin as isize,
                    &gcols,
                    k_row as isize,
                    1,
                    0.0,
                    &mut gw,
                );
                gw
            })
            .collect();
        let mut acc = vec![0.0f32; cin * k_row];
        for gw in &per_sample {
            for (a, &v) in acc.iter_mut().zip(gw) {
                *a += v;
            }
        }
        Tensor::from_vec(w.shape(), acc).expect("conv_t3d weight grad shape")
    });

    let bias = need_bias.then(|| {
        let mut acc = vec![0.0f64; cout];
        for row in gout.data().chunks_exact(cout) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        Tensor::from_vec(&[cout], acc.iter().map(|&v| v as f32).collect()).expect("bias grad")
    });

    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// Max pooling over (T,H,W). Returns output and per-output argmax (index
/// within the sample), ties broken toward the first element in scan order.
pub fn max_pool3d_forward(x: &Tensor, k: [usize; 3], s: [usize; 3]) -> (Tensor, Vec<u32>) {
    let xs = x.shape();
    let (b, t, h, w, c) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let g = ConvGeom {
        kernel: k,
        stride: s,
        pad: [0, 0, 0],
    };
    let [to, ho, wo] = g.out_dims(t, h, w).expect("validated");
    let sample_in = t * h * w * c;
    let sample_out = to * ho * wo * c;
    let mut out = vec![0.0f32; b * sample_out];
    let mut arg = vec![0u32; b * sample_out];

    out.par_chunks_mut(sample_out)
        .zip(arg.par_chunks_mut(sample_out))
        .enumerate()
        .for_each(|(bi, (o, am))| {
            let xi = &x.data()[bi * sample_in..(bi + 1) * sample_in];
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        for ci in 0..c {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for kt in 0..k[0] {
                                for kh in 0..k[1] {
                                    for kw in 0..k[2] {
                                        let (it, ih, iw) =
                                            (ot * s[0] + kt, oh * s[1] + kh, ow * s[2] + kw);
                                        let idx = ((it * h + ih) * w + iw) * c + ci;
                                        if xi[idx] > best {
                                            best = xi[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            let oidx = ((ot * ho + oh) * wo + ow) * c + ci;
                            o[oidx] = best;
                            am[oidx] = best_idx as u32;
                        }
                    }
                }
            }
        });
    (
        Tensor::from_vec(&[b, to, ho, wo, c], out).expect("max pool shape"),
        arg,
    )
}

pub fn max_pool3d_backward(gout: &Tensor, arg: &[u32], in_shape: &[usize]) -> Tensor {
    let sample_in: usize = in_shape[1..].iter().product();
    let b = in_shape[0];
    let sample_out = gout.len() / b;
    let mut gi = vec![0.0f32; b * sample_in];
    gi.par_chunks_mut(sample_in).enumerate().for_each(|(bi, gx)| {
        let go = &gout.data()[bi * sample_out..(bi + 1) * sample_out];
        let am = &arg[bi * sample_out..(bi + 1) * sample_out];
        for (g, &a) in go.iter().zip(am) {
            gx[a as usize] += *g;
        }
    });
    Tensor::from_vec(in_shape, gi).expect("max pool input grad")
}

/// Average pooling over (T,H,W).
pub fn avg_pool3d_forward(x: &Tensor, k: [usize; 3], s: [usize; 3]) -> Tensor {
    let xs = x.shape();
    let (b, t, h, w, c) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let g = ConvGeom {
        kernel: k,
        stride: s,
        pad: [0, 0, 0],
    };
    let [to, ho, wo] = g.out_dims(t, h, w).expect("validated");
    let sample_in = t * h * w * c;
    let sample_out = to * ho * wo * c;
    let norm = 1.0 / (k[0] * k[1] * k[2]) as f64;
    let mut out = vec![0.0f32; b * sample_out];
    out.par_chunks_mut(sample_out).enumerate().for_each(|(bi, o)| {
        let xi = &x.data()[bi * sample_in..(bi + 1) * sample_in];
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    for ci in 0..c {
                        let mut acc = 0.0f64;
                        for kt in 0..k[0] {
                            for kh in 0..k[1] {
                                for kw in 0..k[2] {
                                    let (it, ih, iw) =
                                        (ot * s[0] + kt, oh * s[1] + kh, ow * s[2] + kw);
                                    acc += xi[((it * h + ih) * w + iw) * c + ci] as f64;
                                }
                            }
                        }
                        o[((ot * ho + oh) * wo + ow) * c + ci] = (acc * norm) as f32;
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[b, to, ho, wo, c], out).expect("avg pool shape")
}

pub fn avg_pool3d_backward(gout: &Tensor, in_shape: &[usize], k: [usize; 3], s: [usize; 3]) -> Tensor {
    let (b, t, h, w, c) = (
        in_shape[0],
        in_shape[1],
        in_shape[2],
        in_shape[3],
        in_shape[4],
    );
    let os = gout.shape();
    let [to, ho, wo] = [os[1], os[2], os[3]];
    let sample_in = t * h * w * c;
    let sample_out = to * ho * wo * c;
    let norm = 1.0 / (k[0] * k[1] * k[2]) as f32;
    let mut gi = vec![0.0f32; b * sample_in];
    gi.par_chunks_mut(sample_in).enumerate().for_each(|(bi, gx)| {
        let go = &gout.data()[bi * sample_out..(bi + 1) * sample_out];
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    for ci in 0..c {
                        let g = go[((ot * ho + oh) * wo + ow) * c + ci] * norm;
                        for kt in 0..k[0] {
                            for kh in 0..k[1] {
                                for kw in 0..k[2] {
                                    let (it, ih, iw) =
                                        (ot * s[0] + kt, oh * s[1] + kh, ow * s[2] + kw);
                                    gx[((it * h + ih) * w + iw) * c + ci] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(in_shape, gi).expect("avg pool input grad")
}

/// (B,T,H,W,C) -> (B,C), mean over the spatio-temporal volume.
pub fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let (b, c) = (xs[0], xs[4]);
    let vol = xs[1] * xs[2] * xs[3];
    let mut out = vec![0.0f32; b * c];
    for bi in 0..b {
        let xi = &x.data()[bi * vol * c..(bi + 1) * vol * c];
        let mut acc = vec![0.0f64; c];
        for row in xi.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        for (o, &a) in out[bi * c..(bi + 1) * c].iter_mut().zip(&acc) {
            *o = (a / vol as f64) as f32;
        }
    }
    Tensor::from_vec(&[b, c], out).expect("gap shape")
}

pub fn global_avg_pool_backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
    let (b, c) = (in_shape[0], in_shape[4]);
    let vol = in_shape[1] * in_shape[2] * in_shape[3];
    let scale = 1.0 / vol as f32;
    let mut gi = vec![0.0f32; b * vol * c];
    for bi in 0..b {
        let g = &gout.data()[bi * c..(bi + 1) * c];
        for row in gi[bi * vol * c..(bi + 1) * vol * c].chunks_exact_mut(c) {
            for (o, &gv) in row.iter_mut().zip(g) {
                *o = gv * scale;
            }
        }
    }
    Tensor::from_vec(in_shape, gi).expect("gap input grad")
}

/// 2D matrix product (M,K) x (K,N) -> (M,N).
pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0f32; m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        0.0,
        &mut out,
    );
    Tensor::from_vec(&[m, n], out).expect("matmul shape")
}

/// Gradients of matmul: ga = g * b^T, gb = a^T * g.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    gout: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ga = need_a.then(|| {
        let mut out = vec![0.0f32; m * k];
        gemm(
            m,
            n,
            k,
            gout.data(),
            n as isize,
            1,
            b.data(),
            1,
            n as isize,
            0.0,
            &mut out,
        );
        Tensor::from_vec(&[m, k], out).expect("matmul ga")
    });
    let gb = need_b.then(|| {
        let mut out = vec![0.0f32; k * n];
        gemm(
            k,
            m,
            n,
            a.data(),
            1,
            k as isize,
            gout.data(),
            n as isize,
            1,
            0.0,
            &mut out,
        );
        Tensor::from_vec(&[k, n], out).expect("matmul gb")
    });
    (ga, gb)
}
