//! Reverse-mode autodiff over a linear tape of tensor operations.
//!
//! Operations execute eagerly on insertion; `backward` replays the tape
//! in reverse, accumulating gradients through each operation's adjoint
//! rule. A graph is built per forward/backward pass and then dropped.

use crate::engine::conv::{
    check_conv, conv_backward_bias, conv_backward_input, conv_backward_kernel, conv_forward,
    conv_out_extent, ConvShape,
};
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// Identifier of a node in one `Graph`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Per-channel batch statistics produced by a training-mode
/// batch-normalization forward pass (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Adjoint of a strided convolution; spatial extent is multiplied by
    /// `stride`. Kernel layout `[c_in, c_out, k, k]`.
    Deconv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxChannel {
        x: NodeId,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum {
        x: NodeId,
    },
    SumSquares {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    /// Soft-dice discrepancy `1 - 2*sum(m*p) / (sum(m^2) + sum(p^2))`.
    /// Gradient flows to `probs` only; `target` is treated as constant.
    Dice {
        probs: NodeId,
        target: NodeId,
        num: f64,
        den: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const POOL_WINDOW: usize = 3;
const POOL_STRIDE: usize = 2;
const POOL_PAD: usize = 1;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. node `id`, if the node
    /// was reachable from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Like `grad`, but materializes zeros for nodes the loss does not
    /// reach (disconnected parameters have zero gradient).
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let s = check_conv(xt, wt, Some(bt), stride, pad, "conv2d")?;
        // The public contract requires the output extent to divide exactly.
        if (s.h + 2 * pad - s.k) % stride != 0 || (s.w + 2 * pad - s.k) % stride != 0 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!(
                    "spatial axes {}x{} with kernel {} stride {} padding {} do not tile exactly",
                    s.h, s.w, s.k, stride, pad
                ),
            });
        }
        let y = conv_forward(xt, wt, Some(bt), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, y))
    }

    /// Fractionally-strided convolution: output spatial extent is exactly
    /// `stride` times the input extent (padding is derived from the kernel
    /// size to make this hold). Kernel layout is `[c_in, c_out, k, k]`.
    pub fn transposed_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (batch, c_in, h, w_ext) = xt.dims4("transposed_conv2d")?;
        let ks = wt.shape();
        if ks.len() != 4 {
            return Err(Error::Shape {
                op: "transposed_conv2d",
                detail: format!("kernel must be 4-D [c_in,c_out,k,k], got {:?}", ks),
            });
        }
        let (kc_in, c_out, k) = (ks[0], ks[1], ks[2]);
        if ks[2] != ks[3] {
            return Err(Error::Shape {
                op: "transposed_conv2d",
                detail: format!("kernel must be square, got {}x{}", ks[2], ks[3]),
            });
        }
        if kc_in != c_in {
            return Err(Error::Shape {
                op: "transposed_conv2d",
                detail: format!("kernel input-channel axis {} != input channel axis {}", kc_in, c_in),
            });
        }
        if bt.shape() != [c_out] {
            return Err(Error::Shape {
                op: "transposed_conv2d",
                detail: format!("bias shape {:?} != [c_out] = [{}]", bt.shape(), c_out),
            });
        }
        if stride == 0 {
            return Err(Error::Shape { op: "transposed_conv2d", detail: "stride must be positive".into() });
        }
        let pad = deconv_pad(k, stride)?;
        let (h_up, w_up) = (h * stride, w_ext * stride);
        // Sanity: the adjoint convolution must map the upsampled extent back.
        debug_assert_eq!(conv_out_extent(h_up, k, stride, pad), Some(h));

        let shape = ConvShape {
            batch,
            c_in: c_out,
            h: h_up,
            w: w_up,
            c_out: c_in,
            k,
            stride,
            pad,
            h_out: h,
            w_out: w_ext,
        };
        let mut y_data = conv_backward_input(xt.data(), wt, &shape);
        let l = h_up * w_up;
        for bi in 0..batch {
            for co in 0..c_out {
                let off = (bi * c_out + co) * l;
                let bias = bt.data()[co];
                y_data[off..off + l].iter_mut().for_each(|v| *v += bias);
            }
        }
        let y = Tensor::from_vec(&[batch, c_out, h_up, w_up], y_data)?;
        Ok(self.push(Op::Deconv2d { x, w, b, stride, pad }, y))
    }

    /// Max pooling with a 3x3 window, stride 2, padding 1. Ties route the
    /// gradient to the first position in row-major window order.
    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        let (b, c, h, w) = xt.dims4("maxpool2d")?;
        if h + 2 * POOL_PAD < POOL_WINDOW || w + 2 * POOL_PAD < POOL_WINDOW {
            return Err(Error::Shape {
                op: "maxpool2d",
                detail: format!("spatial axes {}x{} smaller than window", h, w),
            });
        }
        let h_out = conv_out_extent(h, POOL_WINDOW, POOL_STRIDE, POOL_PAD).unwrap();
        let w_out = conv_out_extent(w, POOL_WINDOW, POOL_STRIDE, POOL_PAD).unwrap();
        let mut y = vec![0.0; b * c * h_out * w_out];
        let mut argmax = vec![0u32; y.len()];
        let xd = xt.data();
        for bc in 0..b * c {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kh in 0..POOL_WINDOW {
                        let ih = (oh * POOL_STRIDE + kh) as isize - POOL_PAD as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..POOL_WINDOW {
                            let iw = (ow * POOL_STRIDE + kw) as isize - POOL_PAD as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = ih as usize * w + iw as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let out_idx = (bc * h_out + oh) * w_out + ow;
                    y[out_idx] = best;
                    argmax[out_idx] = (bc * h * w + best_idx) as u32;
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h_out, w_out], y)?;
        Ok(self.push(Op::MaxPool2d { x, argmax }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_vec(self.value(x).shape(), y).expect("same shape");
        self.push(Op::Relu { x }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!("operand shapes {:?} and {:?} differ", at.shape(), bt.shape()),
            });
        }
        let y: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(at.shape(), y)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Per-pixel softmax over the channel axis, computed with
    /// max-subtraction for stability.
    pub fn softmax_channel(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        let (b, c, h, w) = xt.dims4("softmax_channel")?;
        if c < 2 {
            return Err(Error::Shape {
                op: "softmax_channel",
                detail: format!("need at least 2 channels, got {}", c),
            });
        }
        let hw = h * w;
        let xd = xt.data();
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            let base = bi * c * hw;
            for pix in 0..hw {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(xd[base + ch * hw + pix]);
                }
                let mut total = 0.0;
                for ch in 0..c {
                    let e = (xd[base + ch * hw + pix] - max).exp();
                    y[base + ch * hw + pix] = e;
                    total += e;
                }
                for ch in 0..c {
                    y[base + ch * hw + pix] /= total;
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], y)?;
        Ok(self.push(Op::SoftmaxChannel { x }, value))
    }

    /// Training-mode batch normalization over the `(batch, h, w)` axes per
    /// channel, with biased variance. Returns the output node and the
    /// batch statistics for the caller's running-statistics update.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let xt = self.value(x);
        let (b, c, h, w) = xt.dims4("batch_norm_train")?;
        let n = b * h * w;
        if n < 2 {
            return Err(Error::DegenerateBatch { count: n });
        }
        check_affine("batch_norm_train", self.value(gamma), self.value(beta), c)?;
        let hw = h * w;
        let xd = xt.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let plane = &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for bi in 0..b {
            for ch in 0..c {
                let plane = &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                let m = mean[ch];
                var[ch] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (m, is, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in 0..hw {
                    y[off + i] = g * (xd[off + i] - m) * is + be;
                }
            }
        }
        let stats = BatchStats { mean: mean.clone(), var };
        let value = Tensor::from_vec(&[b, c, h, w], y)?;
        let id = self.push(Op::BnTrain { x, gamma, beta, mean, inv_std }, value);
        Ok((id, stats))
    }

    /// Inference-mode batch normalization using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let xt = self.value(x);
        let (b, c, h, w) = xt.dims4("batch_norm_eval")?;
        check_affine("batch_norm_eval", self.value(gamma), self.value(beta), c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape {
                op: "batch_norm_eval",
                detail: format!("running stats length {} != channel axis {}", mean.len(), c),
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let hw = h * w;
        let xd = xt.data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (m, is, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in 0..hw {
                    y[off + i] = g * (xd[off + i] - m) * is + be;
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], y)?;
        Ok(self.push(Op::BnEval { x, gamma, beta, mean: mean.to_vec(), inv_std }, value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Op::SumSquares { x }, Tensor::scalar(total))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(self.value(x).shape(), y).expect("same shape");
        self.push(Op::Scale { x, c }, value)
    }

    /// Soft-dice loss between probabilities and a (constant) target map,
    /// summed jointly over every pixel-channel entry of the batch.
    pub fn dice(&mut self, probs: NodeId, target: NodeId) -> Result<NodeId> {
        let (mt, pt) = (self.value(probs), self.value(target));
        if mt.shape() != pt.shape() {
            return Err(Error::Shape {
                op: "dice",
                detail: format!("probs shape {:?} != target shape {:?}", mt.shape(), pt.shape()),
            });
        }
        if mt.numel() == 0 {
            return Err(Error::Shape { op: "dice", detail: "empty batch".into() });
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (m, p) in mt.data().iter().zip(pt.data()) {
            num += m * p;
            den += m * m + p * p;
        }
        num *= 2.0;
        let loss = 1.0 - num / den;
        Ok(self.push(Op::Dice { probs, target, num, den }, Tensor::scalar(loss)))
    }

    /// Reverse pass from a scalar loss. Gradients from any previous call
    /// are cleared first; repeated calls recompute rather than accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].value.shape().to_vec() });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            let g = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xt = &before[x.0].value;
                    let wt = &before[w.0].value;
                    let s = check_conv(xt, wt, None, *stride, *pad, "conv2d").expect("checked");
                    let dx = conv_backward_input(g, wt, &s);
                    let dw = conv_backward_kernel(xt.data(), g, &s);
                    let db = conv_backward_bias(g, s.batch, s.c_out, s.h_out * s.w_out);
                    acc(before, *x, &dx);
                    acc(before, *w, &dw);
                    acc(before, *b, &db);
                }
                Op::Deconv2d { x, w, b, stride, pad } => {
                    let xt = &before[x.0].value;
                    let wt = &before[w.0].value;
                    let (batch, c_in, h, w_ext) = xt.dims4("transposed_conv2d").expect("checked");
                    let k = wt.shape()[2];
                    let c_out = wt.shape()[1];
                    let s = ConvShape {
                        batch,
                        c_in: c_out,
                        h: h * stride,
                        w: w_ext * stride,
                        c_out: c_in,
                        k,
                        stride: *stride,
                        pad: *pad,
                        h_out: h,
                        w_out: w_ext,
                    };
                    // Forward was conv_backward_input, so the adjoints swap:
                    // d_input is a forward convolution of the output grad.
                    let g_tensor =
                        Tensor::from_vec(&[batch, c_out, s.h, s.w], g.clone()).expect("grad shape");
                    let dx = conv_forward(&g_tensor, wt, None, *stride, *pad).expect("checked");
                    let dw = conv_backward_kernel(g, xt.data(), &s);
                    let db = conv_backward_bias(g, batch, c_out, s.h * s.w);
                    acc(before, *x, dx.data());
                    acc(before, *w, &dw);
                    acc(before, *b, &db);
                }
                Op::MaxPool2d { x, argmax } => {
                    let mut dx = vec![0.0; before[x.0].value.numel()];
                    for (gi, &src) in g.iter().zip(argmax.iter()) {
                        dx[src as usize] += *gi;
                    }
                    acc(before, *x, &dx);
                }
                Op::Relu { x } => {
                    let xd = before[x.0].value.data();
                    let dx: Vec<f64> =
                        g.iter().zip(xd).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect();
                    acc(before, *x, &dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    acc(before, a, g);
                    acc(before, b, g);
                }
                Op::SoftmaxChannel { x } => {
                    let y = node.value.data();
                    let shape = node.value.shape();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let hw = h * w;
                    let mut dx = vec![0.0; y.len()];
                    for bi in 0..b {
                        let base = bi * c * hw;
                        for pix in 0..hw {
                            let mut dot = 0.0;
                            for ch in 0..c {
                                let i = base + ch * hw + pix;
                                dot += g[i] * y[i];
                            }
                            for ch in 0..c {
                                let i = base + ch * hw + pix;
                                dx[i] = y[i] * (g[i] - dot);
                            }
                        }
                    }
                    acc(before, *x, &dx);
                }
                Op::BnTrain { x, gamma, beta, mean, inv_std } => {
                    let xt = &before[x.0].value;
                    let (b, c, h, w) = xt.dims4("batch_norm_train").expect("checked");
                    let hw = h * w;
                    let n = (b * hw) as f64;
                    let xd = xt.data();
                    let gd = before[gamma.0].value.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let (m, is) = (mean[ch], inv_std[ch]);
                            for i in 0..hw {
                                let xhat = (xd[off + i] - m) * is;
                                dgamma[ch] += g[off + i] * xhat;
                                dbeta[ch] += g[off + i];
                            }
                        }
                    }
                    let mut dx = vec![0.0; xd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let (m, is) = (mean[ch], inv_std[ch]);
                            let scale = gd[ch] * is / n;
                            for i in 0..hw {
                                let xhat = (xd[off + i] - m) * is;
                                dx[off + i] =
                                    scale * (n * g[off + i] - dbeta[ch] - xhat * dgamma[ch]);
                            }
                        }
                    }
                    acc(before, *x, &dx);
                    acc(before, *gamma, &dgamma);
                    acc(before, *beta, &dbeta);
                }
                Op::BnEval { x, gamma, beta, mean, inv_std } => {
                    let xt = &before[x.0].value;
                    let (b, c, h, w) = xt.dims4("batch_norm_eval").expect("checked");
                    let hw = h * w;
                    let xd = xt.data();
                    let gd = before[gamma.0].value.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; xd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let (m, is) = (mean[ch], inv_std[ch]);
                            for i in 0..hw {
                                let xhat = (xd[off + i] - m) * is;
                                dgamma[ch] += g[off + i] * xhat;
                                dbeta[ch] += g[off + i];
                                dx[off + i] = g[off + i] * gd[ch] * is;
                            }
                        }
                    }
                    acc(before, *x, &dx);
                    acc(before, *gamma, &dgamma);
                    acc(before, *beta, &dbeta);
                }
                Op::Sum { x } => {
                    let n = before[x.0].value.numel();
                    let dx = vec![g[0]; n];
                    acc(before, *x, &dx);
                }
                Op::SumSquares { x } => {
                    let dx: Vec<f64> = before[x.0].value.data().iter().map(|v| 2.0 * v * g[0]).collect();
                    acc(before, *x, &dx);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    acc(before, *x, &dx);
                }
                Op::Dice { probs, target, num, den } => {
                    let md = before[probs.0].value.data();
                    let pd = before[target.0].value.data();
                    let den2 = den * den;
                    let dm: Vec<f64> = md
                        .iter()
                        .zip(pd)
                        .map(|(m, p)| g[0] * (2.0 * m * num - 2.0 * p * den) / den2)
                        .collect();
                    acc(before, *probs, &dm);
                }
            }
        }
        Ok(())
    }
}

fn deconv_pad(k: usize, _stride: usize) -> Result<usize> {
    // Padding that makes the adjoint convolution map `stride*n -> n`.
    if k >= 1 {
        Ok(if k % 2 == 1 { (k - 1) / 2 } else { (k - 2) / 2 })
    } else {
        Err(Error::Shape { op: "transposed_conv2d", detail: "kernel extent must be >= 1".into() })
    }
}

fn check_affine(op: &'static str, gamma: &Tensor, beta: &Tensor, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape {
            op,
            detail: format!(
                "gamma {:?} / beta {:?} must both have channel length [{}]",
                gamma.shape(),
                beta.shape(),
                c
            ),
        });
    }
    Ok(())
}

fn acc(nodes: &mut [Node], id: NodeId, delta: &[f64]) {
    let node = &mut nodes[id.0];
    match &mut node.grad {
        Some(g) => {
            for (gi, d) in g.iter_mut().zip(delta) {
                *gi += *d;
            }
        }
        None => node.grad = Some(delta.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_requires_matching_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn add_identities() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let zero = g.leaf(Tensor::zeros(&[4]));
        let y = g.add(a, zero).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());
        let neg = g.scale(a, -1.0);
        let z = g.add(a, neg).unwrap();
        assert!(g.value(z).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn maxpool_single_window() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant_input_stays_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2, 6, 6], 3.25));
        let y = g.maxpool2d(x).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 3.25));
    }

    #[test]
    fn maxpool_routes_gradient_to_single_argmax() {
        let mut g = Graph::new();
        // Distinct values: each window's gradient lands on exactly one input.
        let x = g.leaf(
            Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| (i * 7 % 16) as f64).collect()).unwrap(),
        );
        let y = g.maxpool2d(x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let dx = g.grad(x).unwrap();
        let touched = dx.iter().filter(|v| **v != 0.0).count();
        assert!(touched <= g.value(y).numel());
        let total: f64 = dx.iter().sum();
        assert_eq!(total, g.value(y).numel() as f64);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 0.0]).unwrap());
        let y = g.softmax_channel(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x2 = g.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![1000.0, 0.0]).unwrap());
        let y2 = g.softmax_channel(x2).unwrap();
        let d = g.value(y2).data();
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_sums_to_one_per_pixel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[2, 3, 4, 4], (0..96).map(|_| rng.random_range(-5.0..5.0)).collect())
                .unwrap(),
        );
        let y = g.softmax_channel(x).unwrap();
        let d = g.value(y).data();
        let hw = 16;
        for bi in 0..2 {
            for pix in 0..hw {
                let s: f64 = (0..3).map(|c| d[bi * 3 * hw + c * hw + pix]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_linear_weight() {
        // loss = sum(w * x) for scalar w: dloss/dw = sum(x).
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![2.0, 3.0, 4.0]).unwrap());
        let wx = g.scale(x, 5.0);
        let loss = g.sum(wx);
        g.backward(loss).unwrap();
        // d loss / d x = w = 5 everywhere.
        assert_eq!(g.grad(x).unwrap(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let unused = g.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let y = g.sum_squares(x);
        g.backward(y).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), first.as_slice());
    }

    #[test]
    fn deconv_shape_contract_doubles_extent() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 0.5));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.transposed_conv2d(x, w, b, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn dice_loss_perfect_match_is_zero() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let t = g.leaf(Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let loss = g.dice(p, t).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn dice_loss_half_confidence_single_pixel() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap());
        let t = g.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap());
        let loss = g.dice(p, t).unwrap();
        assert!((g.value(loss).item() - 1.0 / 3.0).abs() < 1e-15);
    }
}
