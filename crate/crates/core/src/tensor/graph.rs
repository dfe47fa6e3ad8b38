//! Reverse-mode autodiff over a per-forward computation graph.
//!
//! Each forward pass records nodes in creation order, which doubles as a
//! topological order. `backward` walks the nodes in reverse exactly once and
//! accumulates gradients into every node that requires them, including
//! intermediate feature maps marked with [`Graph::retain_grad`] (the tap
//! points used for activation-map extraction).
//!
//! Convolution uses the cross-correlation convention (no kernel flip).

use crate::error::{Error, Result};
use crate::tensor::data::{Scalar, TensorData};

/// Handle to a tensor node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: S,
        hi: S,
    },
    Log {
        x: usize,
    },
    Abs {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: S,
    },
    Sum {
        x: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        stride: usize,
        padding: usize,
        // im2col buffer per batch item, cached for the backward pass
        cols: Vec<S>,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    AddChannelBias {
        x: usize,
        bias: usize,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    UpsampleNearest2 {
        x: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    SliceChannel {
        x: usize,
        channel: usize,
    },
    L2Normalize {
        x: usize,
        inv_norm: S,
    },
    MaskedBceMean {
        p: usize,
        targets: Vec<S>,
        weights: Vec<S>,
        norm: S,
    },
}

struct Node<S> {
    value: TensorData<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    retain: bool,
    op: Op<S>,
}

/// Computation graph for one forward pass. Single-threaded by design;
/// independent graphs may run concurrently.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: TensorData<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            retain: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: TensorData<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &TensorData<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Marks an intermediate tensor so its gradient stays retrievable after
    /// backward without a second pass (a gradient tap).
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Gradient of the last backward with respect to `v`, if one was recorded.
    pub fn grad(&self, v: Var) -> Option<TensorData<S>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            TensorData::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape always matches value shape")
        })
    }

    // ---- elementwise -----------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let req = self.requires(x);
        let v = self.nodes[x.0].value.clone_map(|a| a.max(S::zero()));
        self.push(v, req, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let req = self.requires(x);
        let v = self.nodes[x.0].value.clone_map(sigmoid_stable);
        self.push(v, req, Op::Sigmoid { x: x.0 })
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let req = self.requires(x);
        let v = self.nodes[x.0].value.clone_map(|a| a.max(lo).min(hi));
        self.push(v, req, Op::Clamp { x: x.0, lo, hi })
    }

    pub fn log(&mut self, x: Var) -> Var {
        let req = self.requires(x);
        let v = self.nodes[x.0].value.clone_map(|a| a.ln());
        self.push(v, req, Op::Log { x: x.0 })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let req = self.requires(x);
        let v = self.nodes[x.0].value.clone_map(|a| a.abs());
        self.push(v, req, Op::Abs { x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let req = self.requires(a) || self.requires(b);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let v = TensorData::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, req, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let req = self.requires(a) || self.requires(b);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = TensorData::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, req, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let req = self.requires(x);
        let v = self.nodes[x.0].value.clone_map(|a| a * c);
        self.push(v, req, Op::Scale { x: x.0, c })
    }

    /// Total reduction to a scalar of shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let req = self.requires(x);
        let mut acc = S::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.push(TensorData::scalar(acc), req, Op::Sum { x: x.0 })
    }

    // ---- neural network ops ----------------------------------------------

    /// 2-D cross-correlation. Input `[N,C,H,W]`, weight `[F,C,kh,kw]`,
    /// output `[N,F,H',W']` with `H' = (H + 2p - kh)/stride + 1` (floor).
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(Error::shape_mismatch(
                "conv2d",
                "input [N,C,H,W] and weight [F,C,kh,kw]",
                format!("input {ishape:?}, weight {wshape:?}"),
            ));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, wc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wc != c || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape_mismatch(
                "conv2d",
                format!("weight [F,{c},kh<={},kw<={}]", h + 2 * padding, w + 2 * padding),
                format!("weight {wshape:?} against input {ishape:?}"),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let ckk = c * kh * kw;
        let ohw = oh * ow;

        let mut cols = vec![S::zero(); n * ckk * ohw];
        let mut out = vec![S::zero(); n * f * ohw];
        {
            let x = self.nodes[input.0].value.data();
            let wt = self.nodes[weight.0].value.data();
            for ni in 0..n {
                let col = &mut cols[ni * ckk * ohw..(ni + 1) * ckk * ohw];
                im2col(
                    &x[ni * c * h * w..(ni + 1) * c * h * w],
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    padding,
                    oh,
                    ow,
                    col,
                );
                matmul_nn_acc(
                    wt,
                    col,
                    f,
                    ckk,
                    ohw,
                    &mut out[ni * f * ohw..(ni + 1) * f * ohw],
                );
            }
        }
        let req = self.requires(input) || self.requires(weight);
        let v = TensorData::new(vec![n, f, oh, ow], out)?;
        Ok(self.push(
            v,
            req,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                stride,
                padding,
                cols,
            },
        ))
    }

    /// Fully connected layer: `x [N,in] * w [out,in]^T + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::shape_mismatch(
                "linear",
                "x [N,in], w [out,in], b [out]",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![S::zero(); n * fout];
        matmul_nt_acc(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            n,
            fin,
            fout,
            &mut out,
        );
        let bias = self.nodes[b.0].value.data();
        for row in out.chunks_exact_mut(fout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        let v = TensorData::new(vec![n, fout], out)?;
        Ok(self.push(
            v,
            req,
            Op::Linear {
                input: x.0,
                weight: w.0,
                bias: b.0,
            },
        ))
    }

    /// Adds a per-channel bias to a `[N,C,H,W]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::shape_mismatch(
                "add_channel_bias",
                "x [N,C,H,W], bias [C]",
                format!("x {xs:?}, bias {bs:?}"),
            ));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut out = self.nodes[x.0].value.data().to_vec();
        let bv = self.nodes[bias.0].value.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for o in &mut out[base..base + hw] {
                    *o += bv[ci];
                }
            }
        }
        let req = self.requires(x) || self.requires(bias);
        let v = TensorData::new(xs, out)?;
        Ok(self.push(v, req, Op::AddChannelBias { x: x.0, bias: bias.0 }))
    }

    /// Train-mode batch norm over `[N,C,H,W]` using biased batch statistics.
    /// Returns the normalized tensor plus the batch stats so the caller can
    /// fold them into running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<(Var, BatchStats<S>)> {
        let xs = self.shape(x).to_vec();
        self.check_bn_shapes("batch_norm_train", &xs, gamma, beta)?;
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = n * hw;
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_norm_train needs N*H*W >= 2, got {m}"
            )));
        }
        let xv = self.nodes[x.0].value.data();
        let mf = S::from_f64(m as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ci in 0..c {
            let mut acc = S::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for &v in &xv[base..base + hw] {
                    acc += v;
                }
            }
            mean[ci] = acc / mf;
            let mut vacc = S::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for &v in &xv[base..base + hw] {
                    let d = v - mean[ci];
                    vacc += d * d;
                }
            }
            var[ci] = vacc / mf;
        }
        let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut xhat = vec![S::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for k in 0..hw {
                    xhat[base + k] = (xv[base + k] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let g = self.nodes[gamma.0].value.data().to_vec();
        let b = self.nodes[beta.0].value.data().to_vec();
        let mut out = vec![S::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for k in 0..hw {
                    out[base + k] = g[ci] * xhat[base + k] + b[ci];
                }
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let v = TensorData::new(xs, out)?;
        let stats = BatchStats {
            mean,
            var: var.clone(),
        };
        let var_node = self.push(
            v,
            req,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        );
        Ok((var_node, stats))
    }

    /// Eval-mode batch norm using tracked running statistics (constants).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        self.check_bn_shapes("batch_norm_eval", &xs, gamma, beta)?;
        let c = xs[1];
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape_mismatch(
                "batch_norm_eval",
                format!("running stats of length {c}"),
                format!("{} and {}", running_mean.len(), running_var.len()),
            ));
        }
        let (n, hw) = (xs[0], xs[2] * xs[3]);
        let inv_std: Vec<S> = running_var
            .iter()
            .map(|&v| (v + eps).sqrt().recip())
            .collect();
        let xv = self.nodes[x.0].value.data();
        let mut xhat = vec![S::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for k in 0..hw {
                    xhat[base + k] = (xv[base + k] - running_mean[ci]) * inv_std[ci];
                }
            }
        }
        let g = self.nodes[gamma.0].value.data().to_vec();
        let b = self.nodes[beta.0].value.data().to_vec();
        let mut out = vec![S::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for k in 0..hw {
                    out[base + k] = g[ci] * xhat[base + k] + b[ci];
                }
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let v = TensorData::new(xs, out)?;
        Ok(self.push(
            v,
            req,
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first maximum in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape_mismatch(
                "max_pool2",
                "[N,C,H,W] with even H and W",
                format!("{xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let ibase = (ni * c + ci) * h * w;
                let obase = (ni * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = ibase + (2 * oy) * w + 2 * ox;
                        let mut best = xv[best_idx];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ibase + (2 * oy + dy) * w + (2 * ox + dx);
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[obase + oy * ow + ox] = best;
                        argmax[obase + oy * ow + ox] = best_idx;
                    }
                }
            }
        }
        let req = self.requires(x);
        let v = TensorData::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(v, req, Op::MaxPool2 { x: x.0, argmax }))
    }

    /// Spatial mean over H and W: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape_mismatch(
                "global_avg_pool",
                "[N,C,H,W]",
                format!("{xs:?}"),
            ));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv = S::from_f64(1.0 / hw as f64);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mut acc = S::zero();
                for &v in &xv[base..base + hw] {
                    acc += v;
                }
                out[ni * c + ci] = acc * inv;
            }
        }
        let req = self.requires(x);
        let v = TensorData::new(vec![n, c], out)?;
        Ok(self.push(v, req, Op::GlobalAvgPool { x: x.0 }))
    }

    /// Nearest-neighbor 2x upsampling of a `[N,C,H,W]` tensor.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape_mismatch(
                "upsample_nearest2",
                "[N,C,H,W]",
                format!("{xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * oh * ow;
            for y in 0..oh {
                for xq in 0..ow {
                    out[obase + y * ow + xq] = xv[ibase + (y / 2) * w + xq / 2];
                }
            }
        }
        let req = self.requires(x);
        let v = TensorData::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(v, req, Op::UpsampleNearest2 { x: x.0 }))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::shape_mismatch(
                "concat_channels",
                "matching N, H, W",
                format!("{sa:?} vs {sb:?}"),
            ));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![S::zero(); n * (ca + cb) * hw];
        for ni in 0..n {
            let oa = ni * (ca + cb) * hw;
            out[oa..oa + ca * hw].copy_from_slice(&av[ni * ca * hw..(ni + 1) * ca * hw]);
            out[oa + ca * hw..oa + (ca + cb) * hw]
                .copy_from_slice(&bv[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let req = self.requires(a) || self.requires(b);
        let v = TensorData::new(vec![n, ca + cb, sa[2], sa[3]], out)?;
        Ok(self.push(v, req, Op::ConcatChannels { a: a.0, b: b.0 }))
    }

    /// Extracts one channel: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn slice_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || channel >= xs[1] {
            return Err(Error::InvalidArgument(format!(
                "slice_channel {channel} out of range for shape {xs:?}"
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); n * hw];
        for ni in 0..n {
            let base = (ni * c + channel) * hw;
            out[ni * hw..(ni + 1) * hw].copy_from_slice(&xv[base..base + hw]);
        }
        let req = self.requires(x);
        let v = TensorData::new(vec![n, 1, xs[2], xs[3]], out)?;
        Ok(self.push(v, req, Op::SliceChannel { x: x.0, channel }))
    }

    /// L2-normalizes a flat vector; a zero vector passes through unchanged.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.data();
        let mut sq = S::zero();
        for &v in xv {
            sq += v * v;
        }
        let norm = sq.sqrt();
        let inv_norm = if norm > S::zero() {
            norm.recip()
        } else {
            S::zero()
        };
        let out: Vec<S> = xv.iter().map(|&v| v * inv_norm).collect();
        let req = self.requires(x);
        let shape = self.shape(x).to_vec();
        let v = TensorData::new(shape, out).expect("same shape");
        self.push(v, req, Op::L2Normalize { x: x.0, inv_norm })
    }

    /// Mean binary cross-entropy over weighted pixels:
    /// `-(1/W) * sum_i w_i * [y_i ln p_i + (1-y_i) ln(1-p_i)]` with
    /// `W = sum_i w_i`. With no labeled pixels the result is 0 and no
    /// gradient flows.
    pub fn masked_bce_mean(&mut self, p: Var, targets: &[S], weights: &[S]) -> Result<Var> {
        let numel = self.nodes[p.0].value.numel();
        if targets.len() != numel || weights.len() != numel {
            return Err(Error::shape_mismatch(
                "masked_bce_mean",
                format!("targets/weights of length {numel}"),
                format!("{} and {}", targets.len(), weights.len()),
            ));
        }
        let pv = self.nodes[p.0].value.data();
        let mut wsum = S::zero();
        for &w in weights {
            wsum += w;
        }
        let one = S::one();
        let mut loss = S::zero();
        if wsum > S::zero() {
            for i in 0..numel {
                if weights[i] > S::zero() {
                    let pi = pv[i];
                    let term = targets[i] * pi.ln() + (one - targets[i]) * (one - pi).ln();
                    loss -= weights[i] * term;
                }
            }
            loss = loss / wsum;
        }
        let norm = if wsum > S::zero() { wsum } else { S::one() };
        let req = self.requires(p);
        Ok(self.push(
            TensorData::scalar(loss),
            req,
            Op::MaskedBceMean {
                p: p.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm,
            },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every reachable node that requires them; a requires-grad leaf the
    /// output does not depend on ends up with an all-zero gradient.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let numel = self.nodes[out.0].value.numel();
        if numel != 1 {
            return Err(Error::NonScalarBackward { numel });
        }
        for node in self.nodes.iter_mut() {
            if node.requires_grad || node.retain {
                let len = node.value.numel();
                match &mut node.grad {
                    Some(g) => g.iter_mut().for_each(|v| *v = S::zero()),
                    none => *none = Some(vec![S::zero(); len]),
                }
            }
        }
        if let Some(g) = &mut self.nodes[out.0].grad {
            g[0] = S::one();
        } else {
            // output does not require grad: nothing to propagate
            return Ok(());
        }
        for i in (0..=out.0).rev() {
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_one(&op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].grad.is_some()
    }

    fn accum(&mut self, idx: usize, contribution: &[S]) {
        if let Some(g) = &mut self.nodes[idx].grad {
            for (gi, &ci) in g.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
    }

    fn backprop_one(&mut self, op: &Op<S>, gout: &[S]) {
        let one = S::one();
        match op {
            Op::Leaf => {}
            Op::Relu { x } => {
                if self.wants(*x) {
                    let gx: Vec<S> = self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                        .collect();
                    self.accum(*x, &gx);
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    let gx: Vec<S> = self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| {
                            let s = sigmoid_stable(v);
                            g * s * (one - s)
                        })
                        .collect();
                    self.accum(*x, &gx);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.wants(*x) {
                    let gx: Vec<S> = self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| if v > *lo && v < *hi { g } else { S::zero() })
                        .collect();
                    self.accum(*x, &gx);
                }
            }
            Op::Log { x } => {
                if self.wants(*x) {
                    let gx: Vec<S> = self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| g / v)
                        .collect();
                    self.accum(*x, &gx);
                }
            }
            Op::Abs { x } => {
                if self.wants(*x) {
                    let gx: Vec<S> = self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| {
                            if v > S::zero() {
                                g
                            } else if v < S::zero() {
                                -g
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    self.accum(*x, &gx);
                }
            }
            Op::Add { a, b } => {
                self.accum(*a, gout);
                self.accum(*b, gout);
            }
            Op::Sub { a, b } => {
                self.accum(*a, gout);
                if self.wants(*b) {
                    let gb: Vec<S> = gout.iter().map(|&g| -g).collect();
                    self.accum(*b, &gb);
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let gx: Vec<S> = gout.iter().map(|&g| g * *c).collect();
                    self.accum(*x, &gx);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let g = gout[0];
                    let gx = vec![g; self.nodes[*x].value.numel()];
                    self.accum(*x, &gx);
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
                cols,
            } => {
                let ishape = self.nodes[*input].value.shape().to_vec();
                let wshape = self.nodes[*weight].value.shape().to_vec();
                let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (f, kh, kw) = (wshape[0], wshape[2], wshape[3]);
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (w + 2 * padding - kw) / stride + 1;
                let ckk = c * kh * kw;
                let ohw = oh * ow;
                if self.wants(*weight) {
                    let mut gw = vec![S::zero(); f * ckk];
                    for ni in 0..n {
                        matmul_nt_acc(
                            &gout[ni * f * ohw..(ni + 1) * f * ohw],
                            &cols[ni * ckk * ohw..(ni + 1) * ckk * ohw],
                            f,
                            ohw,
                            ckk,
                            &mut gw,
                        );
                    }
                    self.accum(*weight, &gw);
                }
                if self.wants(*input) {
                    let wt = self.nodes[*weight].value.data().to_vec();
                    let mut gx = vec![S::zero(); n * c * h * w];
                    let mut gcol = vec![S::zero(); ckk * ohw];
                    for ni in 0..n {
                        gcol.iter_mut().for_each(|v| *v = S::zero());
                        matmul_tn_acc(
                            &wt,
                            &gout[ni * f * ohw..(ni + 1) * f * ohw],
                            f,
                            ckk,
                            ohw,
                            &mut gcol,
                        );
                        col2im_acc(
                            &gcol,
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            oh,
                            ow,
                            &mut gx[ni * c * h * w..(ni + 1) * c * h * w],
                        );
                    }
                    self.accum(*input, &gx);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, fin) = {
                    let s = self.nodes[*input].value.shape();
                    (s[0], s[1])
                };
                let fout = self.nodes[*weight].value.shape()[0];
                if self.wants(*input) {
                    let mut gx = vec![S::zero(); n * fin];
                    matmul_nn_acc(
                        gout,
                        self.nodes[*weight].value.data(),
                        n,
                        fout,
                        fin,
                        &mut gx,
                    );
                    self.accum(*input, &gx);
                }
                if self.wants(*weight) {
                    let mut gw = vec![S::zero(); fout * fin];
                    matmul_tn_acc(
                        gout,
                        self.nodes[*input].value.data(),
                        n,
                        fout,
                        fin,
                        &mut gw,
                    );
                    self.accum(*weight, &gw);
                }
                if self.wants(*bias) {
                    let mut gb = vec![S::zero(); fout];
                    for row in gout.chunks_exact(fout) {
                        for (g, &r) in gb.iter_mut().zip(row) {
                            *g += r;
                        }
                    }
                    self.accum(*bias, &gb);
                }
            }
            Op::AddChannelBias { x, bias } => {
                self.accum(*x, gout);
                if self.wants(*bias) {
                    let s = self.nodes[*x].value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut gb = vec![S::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for &g in &gout[base..base + hw] {
                                gb[ci] += g;
                            }
                        }
                    }
                    self.accum(*bias, &gb);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.nodes[*x].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = S::from_f64((n * hw) as f64);
                let gv = self.nodes[*gamma].value.data().to_vec();
                // per-channel sums of g and g*xhat
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for k in 0..hw {
                            sum_g[ci] += gout[base + k];
                            sum_gx[ci] += gout[base + k] * xhat[base + k];
                        }
                    }
                }
                if self.wants(*beta) {
                    self.accum(*beta, &sum_g);
                }
                if self.wants(*gamma) {
                    self.accum(*gamma, &sum_gx);
                }
                if self.wants(*x) {
                    let mut gx = vec![S::zero(); n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let coef = gv[ci] * inv_std[ci];
                            let mg = sum_g[ci] / m;
                            let mgx = sum_gx[ci] / m;
                            for k in 0..hw {
                                gx[base + k] =
                                    coef * (gout[base + k] - mg - xhat[base + k] * mgx);
                            }
                        }
                    }
                    self.accum(*x, &gx);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.nodes[*x].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gv = self.nodes[*gamma].value.data().to_vec();
                if self.wants(*x) {
                    let mut gx = vec![S::zero(); n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let coef = gv[ci] * inv_std[ci];
                            for k in 0..hw {
                                gx[base + k] = gout[base + k] * coef;
                            }
                        }
                    }
                    self.accum(*x, &gx);
                }
                if self.wants(*gamma) {
                    let mut gg = vec![S::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for k in 0..hw {
                                gg[ci] += gout[base + k] * xhat[base + k];
                            }
                        }
                    }
                    self.accum(*gamma, &gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![S::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for k in 0..hw {
                                gb[ci] += gout[base + k];
                            }
                        }
                    }
                    self.accum(*beta, &gb);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let mut gx = vec![S::zero(); self.nodes[*x].value.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += gout[o];
                    }
                    self.accum(*x, &gx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.wants(*x) {
                    let s = self.nodes[*x].value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let inv = S::from_f64(1.0 / hw as f64);
                    let mut gx = vec![S::zero(); n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = gout[ni * c + ci] * inv;
                            let base = (ni * c + ci) * hw;
                            for v in &mut gx[base..base + hw] {
                                *v = g;
                            }
                        }
                    }
                    self.accum(*x, &gx);
                }
            }
            Op::UpsampleNearest2 { x } => {
                if self.wants(*x) {
                    let s = self.nodes[*x].value.shape();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut gx = vec![S::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        let ibase = nc * h * w;
                        let obase = nc * oh * ow;
                        for y in 0..oh {
                            for xq in 0..ow {
                                gx[ibase + (y / 2) * w + xq / 2] += gout[obase + y * ow + xq];
                            }
                        }
                    }
                    self.accum(*x, &gx);
                }
            }
            Op::ConcatChannels { a, b } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                if self.wants(*a) {
                    let mut ga = vec![S::zero(); n * ca * hw];
                    for ni in 0..n {
                        let oa = ni * (ca + cb) * hw;
                        ga[ni * ca * hw..(ni + 1) * ca * hw]
                            .copy_from_slice(&gout[oa..oa + ca * hw]);
                    }
                    self.accum(*a, &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![S::zero(); n * cb * hw];
                    for ni in 0..n {
                        let oa = ni * (ca + cb) * hw;
                        gb[ni * cb * hw..(ni + 1) * cb * hw]
                            .copy_from_slice(&gout[oa + ca * hw..oa + (ca + cb) * hw]);
                    }
                    self.accum(*b, &gb);
                }
            }
            Op::SliceChannel { x, channel } => {
                if self.wants(*x) {
                    let s = self.nodes[*x].value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut gx = vec![S::zero(); n * c * hw];
                    for ni in 0..n {
                        let base = (ni * c + channel) * hw;
                        gx[base..base + hw].copy_from_slice(&gout[ni * hw..(ni + 1) * hw]);
                    }
                    self.accum(*x, &gx);
                }
            }
            Op::L2Normalize { x, inv_norm } => {
                if self.wants(*x) {
                    let xv = self.nodes[*x].value.data();
                    let mut dot = S::zero();
                    for (i, &g) in gout.iter().enumerate() {
                        dot += g * xv[i] * *inv_norm;
                    }
                    let gx: Vec<S> = xv
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| (g - v * *inv_norm * dot) * *inv_norm)
                        .collect();
                    self.accum(*x, &gx);
                }
            }
            Op::MaskedBceMean {
                p,
                targets,
                weights,
                norm,
            } => {
                if self.wants(*p) {
                    let g = gout[0];
                    let pv = self.nodes[*p].value.data();
                    let gx: Vec<S> = pv
                        .iter()
                        .enumerate()
                        .map(|(i, &pi)| {
                            if weights[i] > S::zero() {
                                let term = targets[i] / pi - (one - targets[i]) / (one - pi);
                                -g * weights[i] * term / *norm
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    self.accum(*p, &gx);
                }
            }
        }
    }

    fn check_same_shape(&self, context: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape_mismatch(
                context,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    fn check_bn_shapes(&self, context: &str, xs: &[usize], gamma: Var, beta: Var) -> Result<()> {
        let gs = self.shape(gamma);
        let bs = self.shape(beta);
        if xs.len() != 4 || gs.len() != 1 || bs.len() != 1 || gs[0] != xs[1] || bs[0] != xs[1] {
            return Err(Error::shape_mismatch(
                context,
                "x [N,C,H,W], gamma [C], beta [C]",
                format!("x {xs:?}, gamma {gs:?}, beta {bs:?}"),
            ));
        }
        Ok(())
    }
}

impl<S: Scalar> TensorData<S> {
    fn clone_map(&self, f: impl Fn(S) -> S) -> TensorData<S> {
        TensorData::new(
            self.shape().to_vec(),
            self.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("same shape")
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

// ---- inner kernels ---------------------------------------------------------

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_nn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize, out: &mut [S]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..ow {
                            col[row + oy * ow + ox] = S::zero();
                        }
                        continue;
                    }
                    let ybase = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        col[row + oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            x[ybase + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ybase = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[ybase + ix as usize] += col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
