//! Reverse-mode gradient tape.
//!
//! Operations are recorded in topological order during the forward pass;
//! `backward` replays them in reverse, visiting each node exactly once.
//! A tape is built per forward pass and discarded afterwards.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::har::{har_apply, har_gradients, har_mask, HarParams};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sum(NodeId),
    Conv4d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Per-channel normalization with statistics computed over the spatial
    /// modes of this sample; mean/inv_std cached for the backward pass.
    NormStats {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Per-channel affine normalization against fixed (running) statistics.
    NormFixed {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Har {
        x: NodeId,
        params: NodeId,
    },
    GlobalMean(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Pick(NodeId, usize),
    CrossEntropy {
        logits: NodeId,
        label: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients per tape node after a backward pass. Nodes the loss does not
/// depend on carry no gradient; `get` materializes zeros for them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn get(&self, tape: &GradTape, id: NodeId) -> Tensor {
        match self.try_get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x).scale(k);
        self.push(Op::Scale(x, k), v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).relu();
        self.push(Op::Relu(x), v)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    /// 4D convolution over a channels-first rank-5 input.
    ///
    /// `x`: [C_in, s0..s3], `w`: [C_out, C_in, k,k,k,k], `b`: [C_out].
    /// Zero padding `pad` and a common stride on all four spatial modes.
    pub fn conv4d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let v = conv4d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(
            Op::Conv4d {
                x,
                w,
                b,
                stride,
                pad,
            },
            v,
        ))
    }

    /// Normalization with per-sample spatial statistics (training mode).
    /// Returns the node plus the per-channel mean and variance so the
    /// caller can maintain running statistics.
    pub fn norm_stats(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        check_rank5(xv)?;
        let channels = xv.shape()[0];
        check_channel_vec(self.value(gamma), channels, "gamma")?;
        check_channel_vec(self.value(beta), channels, "beta")?;
        let n = xv.len() / channels;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let slice = &xv.data()[c * n..(c + 1) * n];
            let m = slice.iter().sum::<f64>() / n as f64;
            let v = slice.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            mean[c] = m;
            var[c] = v;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = xv.clone();
        for c in 0..channels {
            for e in &mut out.data_mut()[c * n..(c + 1) * n] {
                *e = gv[c] * (*e - mean[c]) * inv_std[c] + bv[c];
            }
        }
        let id = self.push(
            Op::NormStats {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            out,
        );
        // Recompute mean/var to hand back (they were moved into the op).
        match &self.nodes[id].op {
            Op::NormStats { mean, inv_std, .. } => {
                let m = mean.clone();
                let v: Vec<f64> = inv_std.iter().map(|&i| 1.0 / (i * i) - eps).collect();
                Ok((id, m, v))
            }
            _ => unreachable!(),
        }
    }

    /// Normalization against fixed running statistics (eval mode).
    pub fn norm_fixed(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        check_rank5(xv)?;
        let channels = xv.shape()[0];
        check_channel_vec(self.value(gamma), channels, "gamma")?;
        check_channel_vec(self.value(beta), channels, "beta")?;
        if mean.len() != channels || var.len() != channels {
            return Err(CoreError::Dimension(
                "running statistics length mismatch".to_string(),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();
        let n = xv.len() / channels;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = xv.clone();
        for c in 0..channels {
            for e in &mut out.data_mut()[c * n..(c + 1) * n] {
                *e = gv[c] * (*e - mean[c]) * inv_std[c] + bv[c];
            }
        }
        Ok(self.push(
            Op::NormFixed {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            out,
        ))
    }

    /// Hypersphere attention regulation: `F ⊙ Θ + F` with the six mask
    /// parameters recorded as a [6] leaf (c0..c3, mu, sigma).
    pub fn har(&mut self, x: NodeId, params: NodeId) -> Result<NodeId> {
        let pv = self.value(params);
        if pv.len() != 6 {
            return Err(CoreError::Parameter(
                "har params node must hold 6 scalars".to_string(),
            ));
        }
        let p = HarParams::from_array(pv.data().try_into().unwrap());
        let xv = self.value(x);
        let spatial: [usize; 4] = match xv.rank() {
            4 => xv.shape().try_into().unwrap(),
            5 => xv.shape()[1..].try_into().unwrap(),
            _ => {
                return Err(CoreError::Dimension(
                    "har input must be rank 4 or 5".to_string(),
                ))
            }
        };
        let mask = har_mask(&spatial, &p)?;
        let v = har_apply(xv, &mask)?;
        Ok(self.push(Op::Har { x, params }, v))
    }

    /// Mean over all spatial modes of a rank-5 input: [C, s0..s3] -> [C].
    pub fn global_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        check_rank5(xv)?;
        let channels = xv.shape()[0];
        let n = xv.len() / channels;
        let data: Vec<f64> = (0..channels)
            .map(|c| xv.data()[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let v = Tensor::new(vec![channels], data)?;
        Ok(self.push(Op::GlobalMean(x), v))
    }

    /// Fully connected layer: x [In], w [Out, In], b [Out] -> [Out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if wv.rank() != 2 || xv.rank() != 1 || bv.rank() != 1 {
            return Err(CoreError::Dimension("linear expects x[I], w[O,I], b[O]".to_string()));
        }
        let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
        if xv.len() != in_dim || bv.len() != out_dim {
            return Err(CoreError::Dimension("linear shape mismatch".to_string()));
        }
        let data: Vec<f64> = (0..out_dim)
            .map(|o| {
                bv.data()[o]
                    + wv.data()[o * in_dim..(o + 1) * in_dim]
                        .iter()
                        .zip(xv.data())
                        .map(|(&w, &x)| w * x)
                        .sum::<f64>()
            })
            .collect();
        let v = Tensor::new(vec![out_dim], data)?;
        Ok(self.push(Op::Linear { x, w, b }, v))
    }

    /// Selects one element of a rank-1 node as a scalar.
    pub fn pick(&mut self, x: NodeId, idx: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 1 || idx >= xv.len() {
            return Err(CoreError::Lookup(format!("pick index {idx} out of range")));
        }
        let v = Tensor::scalar(xv.data()[idx]);
        Ok(self.push(Op::Pick(x, idx), v))
    }

    /// Cross-entropy of softmax(logits) against an integer label.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 1 || label >= lv.len() {
            return Err(CoreError::Contract("bad logits/label for cross entropy".to_string()));
        }
        let max = lv.max_value();
        let log_z = max
            + libm::log(
                lv.data().iter().map(|&v| libm::exp(v - max)).sum::<f64>(),
            );
        let loss = log_z - lv.data()[label];
        Ok(self.push(Op::CrossEntropy { logits, label }, Tensor::scalar(loss)))
    }

    /// Reverse pass from a scalar loss node. Gradients flow to every node
    /// the loss depends on; other nodes (including unrecorded leaves) read
    /// back as zero via `Gradients::get`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(CoreError::Lookup("loss node out of range".to_string()));
        }
        if !self.value(loss).is_scalar() {
            return Err(CoreError::Contract(
                "backward requires a scalar loss node".to_string(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        id: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Hadamard(a, b) => {
                accum(grads, *a, g.hadamard(self.value(*b))?);
                accum(grads, *b, g.hadamard(self.value(*a))?);
            }
            Op::Scale(x, k) => accum(grads, *x, g.scale(*k)),
            Op::Relu(x) => {
                let gx = self.value(*x).zip(g, |x, g| if x > 0.0 { g } else { 0.0 })?;
                accum(grads, *x, gx);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                accum(grads, *x, Tensor::filled(self.value(*x).shape(), s));
            }
            Op::Conv4d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (gx, gw, gb) =
                    conv4d_backward(self.value(*x), self.value(*w), g, *stride, *pad)?;
                accum(grads, *x, gx);
                accum(grads, *w, gw);
                accum(grads, *b, gb);
            }
            Op::NormStats {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let channels = xv.shape()[0];
                let n = xv.len() / channels;
                let gv = self.value(*gamma).data();
                let mut gx = Tensor::zeros(xv.shape());
                let mut ggamma = Tensor::zeros(&[channels]);
                let mut gbeta = Tensor::zeros(&[channels]);
                for c in 0..channels {
                    let xs = &xv.data()[c * n..(c + 1) * n];
                    let gs = &g.data()[c * n..(c + 1) * n];
                    let istd = inv_std[c];
                    let m = mean[c];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for i in 0..n {
                        let xh = (xs[i] - m) * istd;
                        sum_g += gs[i];
                        sum_gx += gs[i] * xh;
                    }
                    ggamma.data_mut()[c] = sum_gx;
                    gbeta.data_mut()[c] = sum_g;
                    let nf = n as f64;
                    let out = &mut gx.data_mut()[c * n..(c + 1) * n];
                    for i in 0..n {
                        let xh = (xs[i] - m) * istd;
                        out[i] = gv[c] * istd / nf * (nf * gs[i] - sum_g - xh * sum_gx);
                    }
                }
                accum(grads, *x, gx);
                accum(grads, *gamma, ggamma);
                accum(grads, *beta, gbeta);
            }
            Op::NormFixed {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let channels = xv.shape()[0];
                let n = xv.len() / channels;
                let gv = self.value(*gamma).data();
                let mut gx = Tensor::zeros(xv.shape());
                let mut ggamma = Tensor::zeros(&[channels]);
                let mut gbeta = Tensor::zeros(&[channels]);
                for c in 0..channels {
                    let xs = &xv.data()[c * n..(c + 1) * n];
                    let gs = &g.data()[c * n..(c + 1) * n];
                    let out = &mut gx.data_mut()[c * n..(c + 1) * n];
                    let mut sg = 0.0;
                    let mut sgx = 0.0;
                    for i in 0..n {
                        out[i] = gs[i] * gv[c] * inv_std[c];
                        sg += gs[i];
                        sgx += gs[i] * (xs[i] - mean[c]) * inv_std[c];
                    }
                    ggamma.data_mut()[c] = sgx;
                    gbeta.data_mut()[c] = sg;
                }
                accum(grads, *x, gx);
                accum(grads, *gamma, ggamma);
                accum(grads, *beta, gbeta);
            }
            Op::Har { x, params } => {
                let pv = self.value(*params);
                let p = HarParams::from_array(pv.data().try_into().unwrap());
                let hg = har_gradients(g, self.value(*x), &p)?;
                accum(grads, *x, hg.d_feature);
                let mut pg = [0.0; 6];
                pg[..4].copy_from_slice(&hg.d_center);
                pg[4] = hg.d_mu;
                pg[5] = hg.d_sigma;
                accum(grads, *params, Tensor::new(vec![6], pg.to_vec())?);
            }
            Op::GlobalMean(x) => {
                let xv = self.value(*x);
                let channels = xv.shape()[0];
                let n = xv.len() / channels;
                let mut gx = Tensor::zeros(xv.shape());
                for c in 0..channels {
                    let s = g.data()[c] / n as f64;
                    for e in &mut gx.data_mut()[c * n..(c + 1) * n] {
                        *e = s;
                    }
                }
                accum(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                let mut gx = Tensor::zeros(&[in_dim]);
                let mut gw = Tensor::zeros(&[out_dim, in_dim]);
                for o in 0..out_dim {
                    let go = g.data()[o];
                    for i in 0..in_dim {
                        gx.data_mut()[i] += go * wv.data()[o * in_dim + i];
                        gw.data_mut()[o * in_dim + i] = go * xv.data()[i];
                    }
                }
                accum(grads, *x, gx);
                accum(grads, *w, gw);
                accum(grads, *b, g.clone());
            }
            Op::Pick(x, idx) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                gx.data_mut()[*idx] = g.data()[0];
                accum(grads, *x, gx);
            }
            Op::CrossEntropy { logits, label } => {
                let lv = self.value(*logits);
                let max = lv.max_value();
                let z: f64 = lv.data().iter().map(|&v| libm::exp(v - max)).sum();
                let s = g.data()[0];
                let data: Vec<f64> = lv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let p = libm::exp(v - max) / z;
                        s * (p - if i == *label { 1.0 } else { 0.0 })
                    })
                    .collect();
                accum(grads, *logits, Tensor::new(vec![lv.len()], data)?);
            }
        }
        Ok(())
    }
}

fn accum(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn check_rank5(t: &Tensor) -> Result<()> {
    if t.rank() != 5 {
        return Err(CoreError::Dimension(
            "expected channels-first rank-5 tensor".to_string(),
        ));
    }
    Ok(())
}

fn check_channel_vec(t: &Tensor, channels: usize, name: &str) -> Result<()> {
    if t.rank() != 1 || t.len() != channels {
        return Err(CoreError::Dimension(format!(
            "{name} must be a length-{channels} vector"
        )));
    }
    Ok(())
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(CoreError::Dimension(
            "kernel larger than padded input".to_string(),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn conv4d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    check_rank5(x)?;
    if w.rank() != 6 {
        return Err(CoreError::Dimension(
            "conv4d weight must be rank 6".to_string(),
        ));
    }
    let c_in = x.shape()[0];
    let (c_out, w_cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if w_cin != c_in || w.shape()[2..] != [k, k, k, k] {
        return Err(CoreError::Dimension(
            "conv4d weight shape mismatch".to_string(),
        ));
    }
    check_channel_vec(b, c_out, "bias")?;
    if stride == 0 {
        return Err(CoreError::Config("stride must be >= 1".to_string()));
    }

    let ins: [usize; 4] = x.shape()[1..].try_into().unwrap();
    let mut outs = [0usize; 4];
    for m in 0..4 {
        outs[m] = conv_out_extent(ins[m], k, stride, pad)?;
    }

    let in_spatial: usize = ins.iter().product();
    let in_s = [ins[1] * ins[2] * ins[3], ins[2] * ins[3], ins[3], 1usize];
    let kern_len = k * k * k * k;

    // Valid kernel-offset window per output coordinate and mode, so the
    // padding branch leaves the hot loops entirely.
    let windows: [Vec<(usize, usize)>; 4] = core::array::from_fn(|m| {
        (0..outs[m])
            .map(|o| kernel_window(o * stride, k, pad, ins[m]))
            .collect()
    });

    let xd = x.data();
    let wd = w.data();
    let bdat = b.data();
    let out_spatial: usize = outs.iter().product();
    let mut out = Tensor::zeros(&[c_out, outs[0], outs[1], outs[2], outs[3]]);
    let od = out.data_mut();
    for co in 0..c_out {
        let w_base = co * c_in * kern_len;
        let o_base = co * out_spatial;
        let mut oi = 0usize;
        for o0 in 0..outs[0] {
            let (lo0, hi0) = windows[0][o0];
            let i0base = o0 * stride;
            for o1 in 0..outs[1] {
                let (lo1, hi1) = windows[1][o1];
                let i1base = o1 * stride;
                for o2 in 0..outs[2] {
                    let (lo2, hi2) = windows[2][o2];
                    let i2base = o2 * stride;
                    for o3 in 0..outs[3] {
                        let (lo3, hi3) = windows[3][o3];
                        let i3base = o3 * stride;
                        let mut acc = bdat[co];
                        for ci in 0..c_in {
                            let x_base = ci * in_spatial;
                            let wk_base = w_base + ci * kern_len;
                            for k0 in lo0..hi0 {
                                let x0 = x_base + (i0base + k0 - pad) * in_s[0];
                                let w0 = wk_base + k0 * k * k * k;
                                for k1 in lo1..hi1 {
                                    let x1 = x0 + (i1base + k1 - pad) * in_s[1];
                                    let w1 = w0 + k1 * k * k;
                                    for k2 in lo2..hi2 {
                                        let x2 = x1 + (i2base + k2 - pad) * in_s[2];
                                        let w2 = w1 + k2 * k;
                                        let xrow =
                                            &xd[x2 + i3base + lo3 - pad..x2 + i3base + hi3 - pad];
                                        let wrow = &wd[w2 + lo3..w2 + hi3];
                                        for (xv, wv) in xrow.iter().zip(wrow) {
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                        }
                        od[o_base + oi] = acc;
                        oi += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kernel offsets hitting real (unpadded) input for one output position.
#[inline]
fn kernel_window(ibase: usize, k: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(ibase).min(k);
    let hi = (extent + pad - ibase).min(k).max(lo);
    (lo, hi)
}

fn conv4d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c_in = x.shape()[0];
    let c_out = w.shape()[0];
    let k = w.shape()[2];
    let ins: [usize; 4] = x.shape()[1..].try_into().unwrap();
    let outs: [usize; 4] = g.shape()[1..].try_into().unwrap();
    let in_spatial: usize = ins.iter().product();
    let out_spatial: usize = outs.iter().product();
    let in_s = [ins[1] * ins[2] * ins[3], ins[2] * ins[3], ins[3], 1usize];
    let kern_len = k * k * k * k;

    let windows: [Vec<(usize, usize)>; 4] = core::array::from_fn(|m| {
        (0..outs[m])
            .map(|o| kernel_window(o * stride, k, pad, ins[m]))
            .collect()
    });

    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[c_out]);
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();

    for co in 0..c_out {
        let w_base = co * c_in * kern_len;
        let o_base = co * out_spatial;
        let mut oi = 0usize;
        let mut bias_acc = 0.0;
        for o0 in 0..outs[0] {
            let (lo0, hi0) = windows[0][o0];
            let i0base = o0 * stride;
            for o1 in 0..outs[1] {
                let (lo1, hi1) = windows[1][o1];
                let i1base = o1 * stride;
                for o2 in 0..outs[2] {
                    let (lo2, hi2) = windows[2][o2];
                    let i2base = o2 * stride;
                    for o3 in 0..outs[3] {
                        let (lo3, hi3) = windows[3][o3];
                        let i3base = o3 * stride;
                        let go = gd[o_base + oi];
                        oi += 1;
                        if go == 0.0 {
                            continue;
                        }
                        bias_acc += go;
                        for ci in 0..c_in {
                            let x_base = ci * in_spatial;
                            let wk_base = w_base + ci * kern_len;
                            for k0 in lo0..hi0 {
                                let x0 = x_base + (i0base + k0 - pad) * in_s[0];
                                let w0 = wk_base + k0 * k * k * k;
                                for k1 in lo1..hi1 {
                                    let x1 = x0 + (i1base + k1 - pad) * in_s[1];
                                    let w1 = w0 + k1 * k * k;
                                    for k2 in lo2..hi2 {
                                        let x2 = x1 + (i2base + k2 - pad) * in_s[2];
                                        let w2 = w1 + k2 * k;
                                        let xs = x2 + i3base + lo3 - pad;
                                        let xe = x2 + i3base + hi3 - pad;
                                        let gxrow = &mut gxd[xs..xe];
                                        let gwrow = &mut gwd[w2 + lo3..w2 + hi3];
                                        let xrow = &xd[xs..xe];
                                        let wrow = &wd[w2 + lo3..w2 + hi3];
                                        for i in 0..gxrow.len() {
                                            gxrow[i] += go * wrow[i];
                                            gwrow[i] += go * xrow[i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gb.data_mut()[co] = bias_acc;
    }
    Ok((gx, gw, gb))
}
