use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const NORM_EPS: Real = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<Real>,
    },
    Pad2d {
        x: Var,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        mean: Vec<Real>,
        var: Vec<Real>,
    },
    RunningNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    GlobalAvgPool(Var),
    AvgPool {
        x: Var,
        k: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L2NormLast(Var),
    NormalizeLast {
        x: Var,
        norms: Vec<Real>,
    },
    CosineRows {
        a: Var,
        b: Var,
        na: Vec<Real>,
        nb: Vec<Real>,
    },
    Clamp {
        x: Var,
        lo: Real,
        hi: Real,
    },
    ConcatRows(Var, Var),
    GatherLast {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for one forward pass and differentiates them once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn ensure_finite(op: &'static str, data: &[Real]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn leading(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        vec![]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

/// `[B,C,H,W]` or `[B,C]` viewed as (batch, channels, spatial).
fn norm_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [b, c] => Some((b, c, 1)),
        [b, c, h, w] => Some((b, c, h * w)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(Real, Real) -> Real, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut c = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut c, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [m, n] = s[..] else {
            return Err(Error::shape("transpose", format!("{s:?} is not 2-D")));
        };
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    /// `x[B,in] * w[out,in]^T + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, fan_in, fan_out) = match (&sx[..], &sw[..]) {
            ([bt, i], [o, i2]) if i == i2 => (*bt, *i, *o),
            _ => return Err(Error::shape("linear", format!("x {sx:?}, w {sw:?}"))),
        };
        let mut out = vec![0.0; batch * fan_out];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [fan_out] {
                return Err(Error::shape("linear", format!("bias {:?}", bias.shape())));
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias.data());
            }
        }
        kernels::matmul_nt_acc(self.value(x).data(), self.value(w).data(), &mut out, batch, fan_in, fan_out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "linear",
            Tensor::new(vec![batch, fan_out], out)?,
            Op::Linear { x, w, b },
            &inputs,
        )
    }

    /// 3x3 convolution with zero padding 1 and the given stride.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, geom, out_ch) = match (&sx[..], &sw[..]) {
            ([b, c, h, wd], [o, c2, 3, 3]) if c == c2 && (stride == 1 || stride == 2) => (
                *b,
                ConvGeom {
                    channels: *c,
                    height: *h,
                    width: *wd,
                    stride,
                },
                *o,
            ),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("x {sx:?}, w {sw:?}, stride {stride}"),
                ))
            }
        };
        let (kp, pos) = (geom.patch_len(), geom.positions());
        let img_len = geom.channels * geom.height * geom.width;
        let mut cols = vec![0.0; batch * kp * pos];
        let mut out = vec![0.0; batch * out_ch * pos];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        for bi in 0..batch {
            let col = &mut cols[bi * kp * pos..(bi + 1) * kp * pos];
            kernels::im2col(&xs[bi * img_len..(bi + 1) * img_len], geom, col);
            kernels::matmul_acc(ws, col, &mut out[bi * out_ch * pos..(bi + 1) * out_ch * pos], out_ch, kp, pos);
        }
        let value = Tensor::new(vec![batch, out_ch, geom.out_height(), geom.out_width()], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, geom, cols }, &[x, w])
    }

    /// Zero padding of the two trailing (spatial) dimensions.
    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s[..] else {
            return Err(Error::shape("pad2d", format!("{s:?} is not 4-D")));
        };
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for y in 0..h {
                let dst = p * ho * wo + (y + pad) * wo + pad;
                out[dst..dst + w].copy_from_slice(&src[p * h * w + y * w..p * h * w + (y + 1) * w]);
            }
        }
        self.push("pad2d", Tensor::new(vec![b, c, ho, wo], out)?, Op::Pad2d { x, pad }, &[x])
    }

    fn check_norm_args(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        let (b, c, sp) = norm_layout(s)
            .ok_or_else(|| Error::shape("normalize", format!("{s:?} is not [B,C] or [B,C,H,W]")))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("normalize", format!("affine params must be [{c}]")));
        }
        Ok((b, c, sp))
    }

    /// Per-channel normalization with statistics of the current batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (b, c, sp) = self.check_norm_args(x, gamma, beta)?;
        let count = (b * sp) as Real;
        if b * sp < 2 {
            return Err(Error::shape("batch_norm", "needs at least two values per channel"));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * sp;
                s += xs[off..off + sp].iter().sum::<Real>();
            }
            let m = s / count;
            let mut v = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * sp;
                v += xs[off..off + sp].iter().map(|&e| (e - m) * (e - m)).sum::<Real>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * sp;
                for i in off..off + sp {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
            &[x, gamma, beta],
        )
    }

    /// Per-channel normalization with fixed (running) statistics.
    pub fn running_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[Real], var: &[Real]) -> Result<Var> {
        let (b, c, sp) = self.check_norm_args(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("running_norm", "statistics length"));
        }
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xs = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * sp;
                for i in off..off + sp {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "running_norm",
            value,
            Op::RunningNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch mean and (biased) variance computed by a [`Tape::batch_norm`] node.
    pub fn norm_stats(&self, v: Var) -> Option<(&[Real], &[Real])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(Real::exp);
        self.push("exp", out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(Real::ln);
        self.push("log", out, Op::Log(x), &[x])
    }

    /// Elementwise sign; never differentiated through.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        ensure_finite("sign", out.data())?;
        Ok(self.constant(out))
    }

    pub fn clamp(&mut self, x: Var, lo: Real, hi: Real) -> Result<Var> {
        if lo > hi {
            return Err(Error::shape("clamp", format!("lo {lo} > hi {hi}")));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// `[B,C,H,W] -> [B,C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s[..] else {
            return Err(Error::shape("global_avg_pool", format!("{s:?} is not 4-D")));
        };
        let sp = h * w;
        let out: Vec<Real> = self
            .value(x)
            .data()
            .chunks(sp)
            .map(|p| p.iter().sum::<Real>() / sp as Real)
            .collect();
        self.push("global_avg_pool", Tensor::new(vec![b, c], out)?, Op::GlobalAvgPool(x), &[x])
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s[..] else {
            return Err(Error::shape("avg_pool", format!("{s:?} is not 4-D")));
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let norm = (k * k) as Real;
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for y in 0..h {
                for xx in 0..w {
                    out[p * ho * wo + (y / k) * wo + xx / k] += src[p * h * w + y * w + xx] / norm;
                }
            }
        }
        self.push("avg_pool", Tensor::new(vec![b, c, ho, wo], out)?, Op::AvgPool { x, k }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Stable `log(sum(exp(x)))` over the last axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t.shape());
        if n == 0 {
            return Err(Error::shape("logsumexp", "empty rows"));
        }
        let out: Vec<Real> = t
            .data()
            .chunks(n)
            .map(|row| {
                let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<Real>().ln()
            })
            .collect();
        let value = Tensor::new(leading(t.shape()), out)?;
        self.push("logsumexp", value, Op::LogSumExp(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: Real = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: Real = t.data().iter().sum::<Real>() / t.numel() as Real;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t.shape());
        let out: Vec<Real> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(leading(t.shape()), out)?;
        self.push("sum_last", value, Op::SumLast(x), &[x])
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t.shape());
        let out: Vec<Real> = t.data().chunks(n).map(|r| kernels::dot(r, r).sqrt()).collect();
        let value = Tensor::new(leading(t.shape()), out)?;
        self.push("l2_norm", value, Op::L2NormLast(x), &[x])
    }

    /// Scale every last-axis row to unit length; zero rows are an error.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t.shape());
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_mut(n) {
            let nr = kernels::dot(row, row).sqrt();
            if nr == 0.0 {
                return Err(Error::ZeroNorm("normalize"));
            }
            row.iter_mut().for_each(|v| *v /= nr);
            norms.push(nr);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("normalize", value, Op::NormalizeLast { x, norms }, &[x])
    }

    /// Row-wise cosine similarity of two `[B,n]` tensors, giving `[B]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = last_dim(ta.shape());
        if n == 0 {
            return Err(Error::shape("cosine", "empty rows"));
        }
        let rows = ta.numel() / n;
        let mut out = Vec::with_capacity(rows);
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        for (ra, rb) in ta.data().chunks(n).zip(tb.data().chunks(n)) {
            let (x, y) = (kernels::dot(ra, ra).sqrt(), kernels::dot(rb, rb).sqrt());
            if x == 0.0 || y == 0.0 {
                return Err(Error::ZeroNorm("cosine"));
            }
            out.push((kernels::dot(ra, rb) / (x * y)).clamp(-1.0, 1.0));
            na.push(x);
            nb.push(y);
        }
        let value = Tensor::new(leading(ta.shape()), out)?;
        self.push("cosine", value, Op::CosineRows { a, b, na, nb }, &[a, b])
    }

    /// Cosine similarity of two vectors as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(a).first().copied().unwrap_or(0) == 0 {
            return Err(Error::shape("cosine_similarity", format!("{:?}", self.shape(a))));
        }
        let c = self.cosine_rows(a, b)?;
        self.reshape(c, vec![])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa[1..] != sb[1..] || sb.is_empty() {
            return Err(Error::shape("concat_rows", format!("{sa:?} + {sb:?}")));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push("concat_rows", Tensor::new(shape, data)?, Op::ConcatRows(a, b), &[a, b])
    }

    /// Pick one element per last-axis row: `out[i] = x[i, idx[i]]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t.shape());
        let rows = t.numel() / n.max(1);
        if idx.len() != rows || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_last", format!("{} indices for {rows}x{n}", idx.len())));
        }
        let out = idx.iter().enumerate().map(|(r, &i)| t.data()[r * n + i]).collect();
        let value = Tensor::new(leading(t.shape()), out)?;
        self.push(
            "gather_last",
            value,
            Op::GatherLast {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaf_grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.node_backward(id, &g, &mut grads)?;
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn node_backward(&self, id: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = nodes[id].value.data();

        let mut acc = |v: Var, contrib: Vec<Real>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, val(*b), &mut ga, m, n, k);
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_acc(val(*a), g, &mut gb, k, m, n);
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                acc(*a, ga);
            }
            Op::Linear { x, w, b } => {
                let sw = nodes[w.0].value.shape();
                let (fan_out, fan_in) = (sw[0], sw[1]);
                let batch = nodes[x.0].value.shape()[0];
                if wants(*x) {
                    let mut gx = vec![0.0; batch * fan_in];
                    kernels::matmul_acc(g, val(*w), &mut gx, batch, fan_out, fan_in);
                    acc(*x, gx);
                }
                if wants(*w) {
                    let mut gw = vec![0.0; fan_out * fan_in];
                    kernels::matmul_tn_acc(g, val(*x), &mut gw, fan_out, batch, fan_in);
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut gb = vec![0.0; fan_out];
                        for row in g.chunks(fan_out) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        acc(*b, gb);
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let out_ch = nodes[w.0].value.shape()[0];
                let batch = nodes[x.0].value.shape()[0];
                let (kp, pos) = (geom.patch_len(), geom.positions());
                let img_len = geom.channels * geom.height * geom.width;
                if wants(*w) {
                    let mut gw = vec![0.0; out_ch * kp];
                    for bi in 0..batch {
                        kernels::matmul_nt_acc(
                            &g[bi * out_ch * pos..(bi + 1) * out_ch * pos],
                            &cols[bi * kp * pos..(bi + 1) * kp * pos],
                            &mut gw,
                            out_ch,
                            pos,
                            kp,
                        );
                    }
                    acc(*w, gw);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; batch * img_len];
                    let mut gcol = vec![0.0; kp * pos];
                    for bi in 0..batch {
                        gcol.iter_mut().for_each(|v| *v = 0.0);
                        kernels::matmul_tn_acc(
                            val(*w),
                            &g[bi * out_ch * pos..(bi + 1) * out_ch * pos],
                            &mut gcol,
                            kp,
                            out_ch,
                            pos,
                        );
                        kernels::col2im_acc(&gcol, *geom, &mut gx[bi * img_len..(bi + 1) * img_len]);
                    }
                    acc(*x, gx);
                }
            }
            Op::Pad2d { x, pad } => {
                let s = nodes[x.0].value.shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..h {
                        let src = p * ho * wo + (y + pad) * wo + pad;
                        gx[p * h * w + y * w..p * h * w + (y + 1) * w].copy_from_slice(&g[src..src + w]);
                    }
                }
                acc(*x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let (b, c, sp) = norm_layout(nodes[x.0].value.shape()).expect("checked in forward");
                let count = (b * sp) as Real;
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * sp;
                        for i in off..off + sp {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / count;
                            let off = (bi * c + ch) * sp;
                            for i in off..off + sp {
                                gx[i] = k * (count * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    acc(*x, gx);
                }
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::RunningNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, sp) = norm_layout(nodes[x.0].value.shape()).expect("checked in forward");
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * sp;
                        for i in off..off + sp {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                            gx[i] = g[i] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                acc(*x, gx);
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::Relu(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
            ),
            Op::Exp(x) => acc(*x, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, v)| g / v).collect()),
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let sp = s[2] * s[3];
                let mut gx = Vec::with_capacity(g.len() * sp);
                for &gv in g {
                    gx.extend(std::iter::repeat(gv / sp as Real).take(sp));
                }
                acc(*x, gx);
            }
            Op::AvgPool { x, k } => {
                let s = nodes[x.0].value.shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let norm = (k * k) as Real;
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[p * h * w + y * w + xx] = g[p * ho * wo + (y / k) * wo + xx / k] / norm;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let n = last_dim(nodes[x.0].value.shape());
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - s);
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let n = last_dim(nodes[x.0].value.shape());
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: Real = gr.iter().sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * s;
                    }
                }
                acc(*x, gx);
            }
            Op::LogSumExp(x) => {
                let xs = val(*x);
                let n = last_dim(nodes[x.0].value.shape());
                let mut gx = vec![0.0; xs.len()];
                for (r, (xr, dr)) in xs.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                    for (d, v) in dr.iter_mut().zip(xr) {
                        *d = g[r] * (v - out[r]).exp();
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                acc(*x, vec![g[0] / n as Real; n]);
            }
            Op::SumLast(x) => {
                let n = last_dim(nodes[x.0].value.shape());
                acc(*x, g.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect());
            }
            Op::L2NormLast(x) => {
                let n = last_dim(nodes[x.0].value.shape());
                let mut gx = vec![0.0; nodes[x.0].value.numel()];
                for (r, (xr, dr)) in val(*x).chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                    if out[r] > 0.0 {
                        for (d, v) in dr.iter_mut().zip(xr) {
                            *d = g[r] * v / out[r];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::NormalizeLast { x, norms } => {
                let n = last_dim(nodes[x.0].value.shape());
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, yr), dr)) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let proj = kernels::dot(gr, yr);
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (gv - yv * proj) / norms[r];
                    }
                }
                acc(*x, gx);
            }
            Op::CosineRows { a, b, na, nb } => {
                let n = last_dim(nodes[a.0].value.shape());
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for r in 0..g.len() {
                    let (ra, rb) = (&va[r * n..(r + 1) * n], &vb[r * n..(r + 1) * n]);
                    let c = kernels::dot(ra, rb) / (na[r] * nb[r]);
                    let inv = 1.0 / (na[r] * nb[r]);
                    for i in 0..n {
                        ga[r * n + i] = g[r] * (rb[i] * inv - c * ra[i] / (na[r] * na[r]));
                        gb[r * n + i] = g[r] * (ra[i] * inv - c * rb[i] / (nb[r] * nb[r]));
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Clamp { x, lo, hi } => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::ConcatRows(a, b) => {
                let na = nodes[a.0].value.numel();
                acc(*a, g[..na].to_vec());
                acc(*b, g[na..].to_vec());
            }
            Op::GatherLast { x, idx } => {
                let n = last_dim(nodes[x.0].value.shape());
                let mut gx = vec![0.0; nodes[x.0].value.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * n + i] = g[r];
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
        }
        Ok(())
    }
}
