//! Raw convolution kernels: im2col/col2im plus GEMM-backed forward and
//! backward passes. These operate on plain tensors; the graph ops in
//! `graph.rs` wrap them with autodiff bookkeeping.
//!
//! Spatial extents use floor semantics internally,
//! `out = (h + 2*pad - k) / stride + 1`, which also defines the adjoint
//! pair used by the transposed convolution.

use rayon::prelude::*;

use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Row-major GEMM: C[m,n] = alpha * A * B + beta * C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        )
    }
}

/// Unpack one sample `[c_in, h, w]` into columns `[c_in*k*k, h_out*w_out]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    col: &mut [f64],
) {
    let l = h_out * w_out;
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * l;
                for oh in 0..h_out {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let dst = &mut col[row + oh * w_out..row + (oh + 1) * w_out];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        *d = if iw < 0 || iw >= w as isize { 0.0 } else { src_row[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into one sample `[c_in, h, w]` (adjoint of `im2col`).
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    x: &mut [f64],
) {
    let l = h_out * w_out;
    for ci in 0..c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * l;
                for oh in 0..h_out {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &col[row + oh * w_out..row + (oh + 1) * w_out];
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, s) in src.iter().enumerate() {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst_row[iw as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvShape {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn check_conv(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    op: &'static str,
) -> Result<ConvShape> {
    let (b, c_in, h, w) = x.dims4(op)?;
    let ks = kernel.shape();
    if ks.len() != 4 {
        return Err(Error::Shape {
            op,
            detail: format!("kernel must be 4-D [c_out,c_in,k,k], got {:?}", ks),
        });
    }
    let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kh != kw {
        return Err(Error::Shape { op, detail: format!("kernel must be square, got {}x{}", kh, kw) });
    }
    if kc != c_in {
        return Err(Error::Shape {
            op,
            detail: format!("kernel input-channel axis {} != input channel axis {}", kc, c_in),
        });
    }
    if let Some(bias) = bias {
        if bias.shape() != [c_out] {
            return Err(Error::Shape {
                op,
                detail: format!("bias shape {:?} != [c_out] = [{}]", bias.shape(), c_out),
            });
        }
    }
    if stride == 0 {
        return Err(Error::Shape { op, detail: "stride must be positive".into() });
    }
    let (h_out, w_out) = match (conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad))
    {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "spatial axes {}x{} too small for kernel {} stride {} padding {}",
                    h, w, kh, stride, pad
                ),
            })
        }
    };
    Ok(ConvShape { batch: b, c_in, h, w, c_out, k: kh, stride, pad, h_out, w_out })
}

/// Direct 3x3, stride-1, pad-1 forward for one sample. Row-oriented so the
/// inner loops vectorize; this is the hot path at high resolutions where
/// the im2col GEMM is too skinny to be efficient.
fn conv3x3_forward_sample(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    wk: &[f64],
    bias: Option<&[f64]>,
    y: &mut [f64],
) {
    let mut acc = vec![0.0; w];
    for co in 0..c_out {
        for oh in 0..h {
            acc.fill(bias.map_or(0.0, |b| b[co]));
            for ci in 0..c_in {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                let wrow = &wk[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
                for kh in 0..3 {
                    let ih = oh as isize + kh as isize - 1;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xr = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let (k0, k1, k2) = (wrow[kh * 3], wrow[kh * 3 + 1], wrow[kh * 3 + 2]);
                    acc[0] += k1 * xr[0] + k2 * xr[1];
                    for ow in 1..w - 1 {
                        acc[ow] += k0 * xr[ow - 1] + k1 * xr[ow] + k2 * xr[ow + 1];
                    }
                    acc[w - 1] += k0 * xr[w - 2] + k1 * xr[w - 1];
                }
            }
            y[(co * h + oh) * w..(co * h + oh + 1) * w].copy_from_slice(&acc);
        }
    }
}

/// Direct 3x3, stride-1, pad-1 kernel gradient for one sample.
fn conv3x3_kernel_grad_sample(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    dy: &[f64],
    dw: &mut [f64],
) {
    for co in 0..c_out {
        let dplane = &dy[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            let out = &mut dw[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
            for kh in 0..3 {
                for oh in 0..h {
                    let ih = oh as isize + kh as isize - 1;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dr = &dplane[oh * w..(oh + 1) * w];
                    let xr = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                    for ow in 1..w - 1 {
                        s0 += dr[ow] * xr[ow - 1];
                        s1 += dr[ow] * xr[ow];
                        s2 += dr[ow] * xr[ow + 1];
                    }
                    s0 += dr[w - 1] * xr[w - 2];
                    s1 += dr[0] * xr[0] + dr[w - 1] * xr[w - 1];
                    s2 += dr[0] * xr[1];
                    out[kh * 3] += s0;
                    out[kh * 3 + 1] += s1;
                    out[kh * 3 + 2] += s2;
                }
            }
        }
    }
}

fn is_direct3x3(s: &ConvShape) -> bool {
    // The row kernels index `w-2` and `1`, so they need at least 2 columns.
    s.k == 3 && s.stride == 1 && s.pad == 1 && s.w >= 2
}

fn is_pointwise(s: &ConvShape) -> bool {
    s.k == 1 && s.stride == 1 && s.pad == 0
}

/// Cross-correlation forward pass.
pub fn conv_forward(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let s = check_conv(x, kernel, bias, stride, pad, "conv2d")?;
    let l = s.h_out * s.w_out;
    let ckk = s.c_in * s.k * s.k;
    let mut y = Tensor::zeros(&[s.batch, s.c_out, s.h_out, s.w_out]);
    let in_len = s.c_in * s.h * s.w;
    let out_len = s.c_out * l;
    let wk = kernel.data();
    let bias = bias.map(|b| b.data());
    y.data_mut()
        .par_chunks_mut(out_len)
        .zip(x.data().par_chunks(in_len))
        .for_each(|(ys, xs)| {
            if is_direct3x3(&s) {
                conv3x3_forward_sample(xs, s.c_in, s.h, s.w, s.c_out, wk, bias, ys);
            } else if is_pointwise(&s) {
                // 1x1 convolution is a plain channel-mixing GEMM.
                dgemm(s.c_out, s.c_in, l, 1.0, wk, s.c_in as isize, 1, xs, l as isize, 1, 0.0, ys, l as isize, 1);
            } else {
                let mut col = vec![0.0; ckk * l];
                im2col(xs, s.c_in, s.h, s.w, s.k, s.stride, s.pad, s.h_out, s.w_out, &mut col);
                dgemm(s.c_out, ckk, l, 1.0, wk, ckk as isize, 1, &col, l as isize, 1, 0.0, ys, l as isize, 1);
            }
            if !is_direct3x3(&s) {
                if let Some(bias) = bias {
                    for (co, row) in ys.chunks_mut(l).enumerate() {
                        let b = bias[co];
                        row.iter_mut().for_each(|v| *v += b);
                    }
                }
            }
        });
    Ok(y)
}

/// Gradient w.r.t. the convolution input: scatter `W^T * dy` back to x.
pub fn conv_backward_input(
    dy: &[f64],
    kernel: &Tensor,
    s: &ConvShape,
) -> Vec<f64> {
    let l = s.h_out * s.w_out;
    let ckk = s.c_in * s.k * s.k;
    let in_len = s.c_in * s.h * s.w;
    let out_len = s.c_out * l;
    let wk = kernel.data();
    // For stride-1 pad-1 3x3, the input gradient is itself a 3x3 direct
    // convolution of dy with the kernel rotated 180 degrees and its
    // channel axes swapped.
    let rotated: Option<Vec<f64>> = is_direct3x3(s).then(|| {
        let mut r = vec![0.0; wk.len()];
        for co in 0..s.c_out {
            for ci in 0..s.c_in {
                for kh in 0..3 {
                    for kw in 0..3 {
                        r[((ci * s.c_out + co) * 3 + (2 - kh)) * 3 + (2 - kw)] =
                            wk[((co * s.c_in + ci) * 3 + kh) * 3 + kw];
                    }
                }
            }
        }
        r
    });
    let mut dx = vec![0.0; s.batch * in_len];
    dx.par_chunks_mut(in_len)
        .zip(dy.par_chunks(out_len))
        .for_each(|(dxs, dys)| {
            if let Some(rot) = &rotated {
                conv3x3_forward_sample(dys, s.c_out, s.h, s.w, s.c_in, rot, None, dxs);
            } else if is_pointwise(s) {
                dgemm(s.c_in, s.c_out, l, 1.0, wk, 1, s.c_in as isize, dys, l as isize, 1, 0.0, dxs, l as isize, 1);
            } else {
                let mut dcol = vec![0.0; ckk * l];
                dgemm(ckk, s.c_out, l, 1.0, wk, 1, ckk as isize, dys, l as isize, 1, 0.0, &mut dcol, l as isize, 1);
                col2im(&dcol, s.c_in, s.h, s.w, s.k, s.stride, s.pad, s.h_out, s.w_out, dxs);
            }
        });
    dx
}

/// Gradient w.r.t. the kernel: `dy * im2col(x)^T`, summed over the batch
/// in sample order for determinism.
pub fn conv_backward_kernel(x: &[f64], dy: &[f64], s: &ConvShape) -> Vec<f64> {
    let l = s.h_out * s.w_out;
    let ckk = s.c_in * s.k * s.k;
    let in_len = s.c_in * s.h * s.w;
    let out_len = s.c_out * l;
    let per_sample: Vec<Vec<f64>> = x
        .par_chunks(in_len)
        .zip(dy.par_chunks(out_len))
        .map(|(xs, dys)| {
            let mut dw = vec![0.0; s.c_out * ckk];
            if is_direct3x3(s) {
                conv3x3_kernel_grad_sample(xs, s.c_in, s.h, s.w, s.c_out, dys, &mut dw);
            } else if is_pointwise(s) {
                dgemm(s.c_out, l, s.c_in, 1.0, dys, l as isize, 1, xs, 1, l as isize, 0.0, &mut dw, s.c_in as isize, 1);
            } else {
                let mut col = vec![0.0; ckk * l];
                im2col(xs, s.c_in, s.h, s.w, s.k, s.stride, s.pad, s.h_out, s.w_out, &mut col);
                dgemm(s.c_out, l, ckk, 1.0, dys, l as isize, 1, &col, 1, l as isize, 0.0, &mut dw, ckk as isize, 1);
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; s.c_out * ckk];
    for part in &per_sample {
        for (d, p) in dw.iter_mut().zip(part) {
            *d += p;
        }
    }
    dw
}

/// Gradient w.r.t. the bias: sum of dy over batch and spatial axes.
pub fn conv_backward_bias(dy: &[f64], batch: usize, c_out: usize, l: usize) -> Vec<f64> {
    let mut db = vec![0.0; c_out];
    for bi in 0..batch {
        for (co, d) in db.iter_mut().enumerate() {
            let row = &dy[(bi * c_out + co) * l..(bi * c_out + co + 1) * l];
            *d += row.iter().sum::<f64>();
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn ones_kernel_counts_window_overlap() {
        // 3x3 ones input, 3x3 ones kernel, padding 1: center sees all 9,
        // corners see 4.
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let k = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv_forward(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[8], 4.0);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = t(&[2, 1, 4, 4], (0..32).map(|i| i as f64).collect());
        let k = t(&[1, 1, 1, 1], vec![1.0]);
        let y = conv_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = t(&[1, 2, 4, 4], vec![0.0; 32]);
        let k = t(&[1, 3, 3, 3], vec![0.0; 27]);
        let err = conv_forward(&x, &k, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "message should name the axis: {msg}");
    }

    fn brute_force_case(b: usize, ci: usize, h: usize, w: usize, co: usize, k: usize, s: usize, p: usize, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = t(&[b, ci, h, w], (0..b * ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
        let kn = t(&[co, ci, k, k], (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect());
        let bias = t(&[co], (0..co).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = conv_forward(&x, &kn, Some(&bias), s, p).unwrap();
        let (ho, wo) = (conv_out_extent(h, k, s, p).unwrap(), conv_out_extent(w, k, s, p).unwrap());
        for bi in 0..b {
            for o in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.data()[o];
                        for c in 0..ci {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh * s + kh) as isize - p as isize;
                                    let iw = (ow * s + kw) as isize - p as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                        acc += x.data()[((bi * ci + c) * h + ih as usize) * w + iw as usize]
                                            * kn.data()[((o * ci + c) * k + kh) * k + kw];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((bi * co + o) * ho + oh) * wo + ow];
                        assert!(
                            (got - acc).abs() < 1e-12,
                            "mismatch at {bi},{o},{oh},{ow} for k={k} s={s} p={p}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn brute_force_reference_match() {
        // One case per dispatch path: strided im2col GEMM, direct 3x3, 1x1.
        brute_force_case(2, 3, 7, 6, 4, 3, 2, 1, 9);
        brute_force_case(2, 3, 6, 6, 4, 3, 1, 1, 10);
        brute_force_case(2, 5, 4, 6, 3, 1, 1, 0, 11);
        brute_force_case(1, 2, 5, 5, 2, 2, 2, 0, 12);
    }
}
