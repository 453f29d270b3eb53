//! Eager tape. Every operation evaluates immediately and appends a node;
//! `backward` walks the nodes in exact reverse recording order.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::kernels::{gelu, gelu_grad, gemm};
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding policy of [`Graph::depthwise_conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Left-pad with `k - 1` zeros; output at `t` reads `u[t-k+1..=t]`.
    Causal,
    /// Pad `(k - 1) / 2` on each side; `k` must be odd.
    Symmetric,
}

/// Boolean mask broadcast over the leading axes of the tensor it filters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    allowed: Arc<Vec<bool>>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, allowed: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != allowed.len() || shape.is_empty() {
            return Err(AutodiffError::InvalidArgument(format!(
                "mask shape {shape:?} does not match {} entries",
                allowed.len()
            )));
        }
        Ok(Self {
            shape,
            allowed: Arc::new(allowed),
        })
    }

    /// Lower-triangular `n x n` mask: entry `(t, s)` allowed iff `s <= t`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|i| i % n <= i / n).collect();
        Self {
            shape: vec![n, n],
            allowed: Arc::new(allowed),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Conv1d { u: Var, kernel: Var, offset: usize },
    Detach,
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    ConcatLast(Var, Var),
    ShiftSeq { x: Var, offset: usize },
    SliceSeq { x: Var, start: usize },
    ConcatSeq(Var, Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    PairwiseSqDist(Var),
    SelectRows { x: Var, positions: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaves keep
/// their gradient once the pass finishes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Splits `shape` into `(batch, seq, width)` for ops over `[..., S, d]`.
fn seq_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(AutodiffError::InvalidArgument(format!(
            "{op}: expected rank >= 2, got {shape:?}"
        )));
    }
    let d = shape[shape.len() - 1];
    let s = shape[shape.len() - 2];
    Ok((shape.iter().product::<usize>() / (s * d), s, d))
}

fn with_seq(shape: &[usize], s: usize, d: usize) -> Vec<usize> {
    let mut out = shape[..shape.len() - 2].to_vec();
    out.push(s);
    out.push(d);
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_broadcast",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let vb = self.value(b).data();
        let n = vb.len();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vb).map(|(p, q)| p + q))
            .collect();
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddBroadcast(x, b), rg))
    }

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let (k, n) = (sw[0], sw[1]);
        let vx = self.value(x);
        let m = vx.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, vx.data(), k, 1, self.value(w).data(), n, 1, &mut out, 0.0);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(x, w), rg))
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with
    /// `b[B, n, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || AutodiffError::ShapeMismatch {
            op: "bmm",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                k,
                1,
                &vb[i * k * n..],
                rsb,
                csb,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::Bmm { a, b, trans_b },
            rg,
        ))
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.is_finite() {
            return Err(AutodiffError::NonFinite { op: "softmax" });
        }
        let n = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Softmax restricted to allowed entries; masked entries are exactly 0.
    /// The mask shape must be a suffix of `x`'s shape.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let vx = self.value(x);
        let sx = vx.shape();
        let sm = mask.shape();
        if sm.len() > sx.len() || sx[sx.len() - sm.len()..] != *sm {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_softmax",
                left: sx.to_vec(),
                right: sm.to_vec(),
            });
        }
        let n = vx.last_dim();
        let allowed = mask.allowed();
        let period = allowed.len();
        let mut out = vec![0.0; vx.numel()];
        for (r, (row, dst)) in vx.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let off = (r * n) % period;
            let keep = &allowed[off..off + n];
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (&v, &k) in row.iter().zip(keep) {
                if k {
                    if !v.is_finite() {
                        return Err(AutodiffError::NonFinite { op: "masked_softmax" });
                    }
                    any = true;
                    max = max.max(v);
                }
            }
            if !any {
                return Err(AutodiffError::FullyMaskedRow { row: r });
            }
            let mut total = 0.0;
            for ((&v, &k), o) in row.iter().zip(keep).zip(dst.iter_mut()) {
                if k {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for (o, &k) in dst.iter_mut().zip(keep) {
                if k {
                    *o /= total;
                }
            }
        }
        let t = Tensor::from_parts(sx.to_vec(), out);
        let rg = self.rg(&[x]);
        // Backward is identical to the dense softmax because masked outputs are 0.
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Layer normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let vx = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Per-channel 1D convolution along the sequence axis of `u[..., S, d]`
    /// with `kernel[k, d]`. Channels never mix.
    pub fn depthwise_conv1d(&mut self, u: Var, kernel: Var, mode: ConvMode) -> Result<Var> {
        let (batch, s, d) = seq_dims("depthwise_conv1d", self.shape(u))?;
        let sk = self.shape(kernel);
        if sk.len() != 2 || sk[1] != d {
            return Err(AutodiffError::ShapeMismatch {
                op: "depthwise_conv1d",
                left: self.shape(u).to_vec(),
                right: sk.to_vec(),
            });
        }
        let k = sk[0];
        let offset = match mode {
            ConvMode::Causal => k - 1,
            ConvMode::Symmetric => {
                if k.is_multiple_of(2) {
                    return Err(AutodiffError::EvenSymmetricKernel(k));
                }
                (k - 1) / 2
            }
        };
        let (vu, vk) = (self.value(u).data(), self.value(kernel).data());
        let mut out = vec![0.0; vu.len()];
        for b in 0..batch {
            let base = b * s * d;
            for t in 0..s {
                let dst = &mut out[base + t * d..base + (t + 1) * d];
                for j in 0..k {
                    let src = t as isize - offset as isize + j as isize;
                    if src < 0 || src >= s as isize {
                        continue;
                    }
                    let src = base + src as usize * d;
                    let taps = &vk[j * d..(j + 1) * d];
                    for c in 0..d {
                        dst[c] += taps[c] * vu[src + c];
                    }
                }
            }
        }
        let t = Tensor::from_parts(self.shape(u).to_vec(), out);
        let rg = self.rg(&[u, kernel]);
        Ok(self.push(t, Op::Conv1d { u, kernel, offset }, rg))
    }

    /// Forward identity; blocks every gradient into `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Detach, false)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// with `logits` viewed as `[N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let v = vl.last_dim();
        let n = vl.rows();
        if targets.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(AutodiffError::TargetOutOfRange { target: bad, vocab: v });
        }
        if !vl.is_finite() {
            return Err(AutodiffError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for (row, &tgt) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[tgt];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let t = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row lookup `table[ids]`; output shape is `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding",
                left: st.to_vec(),
                right: ids_shape.to_vec(),
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::InvalidArgument(format!(
                "embedding: id {bad} out of range for table of {v} rows"
            )));
        }
        let vt = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&vt[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_last",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let (p, q) = (va.last_dim(), vb.last_dim());
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for (ra, rb) in va.data().chunks(p).zip(vb.data().chunks(q)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast(a, b), rg))
    }

    /// `y[t] = x[t - offset]` along the sequence axis, zero for `t < offset`.
    pub fn shift_seq(&mut self, x: Var, offset: usize) -> Result<Var> {
        let (batch, s, d) = seq_dims("shift_seq", self.shape(x))?;
        let vx = self.value(x).data();
        let mut out = vec![0.0; vx.len()];
        for b in 0..batch {
            let base = b * s * d;
            for t in offset..s {
                out[base + t * d..base + (t + 1) * d]
                    .copy_from_slice(&vx[base + (t - offset) * d..base + (t - offset + 1) * d]);
            }
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ShiftSeq { x, offset }, rg))
    }

    /// Sequence positions `start..start + len` of `x[..., S, d]`.
    pub fn slice_seq(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (batch, s, d) = seq_dims("slice_seq", self.shape(x))?;
        if len == 0 || start + len > s {
            return Err(AutodiffError::InvalidArgument(format!(
                "slice_seq: range {start}..{} outside sequence of {s}",
                start + len
            )));
        }
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(batch * len * d);
        for b in 0..batch {
            let base = b * s * d + start * d;
            out.extend_from_slice(&vx[base..base + len * d]);
        }
        let shape = with_seq(self.shape(x), len, d);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SliceSeq { x, start }, rg))
    }

    /// Concatenate along the sequence axis.
    pub fn concat_seq(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, sa, da) = seq_dims("concat_seq", self.shape(a))?;
        let (bb, sb, db) = seq_dims("concat_seq", self.shape(b))?;
        let shape_a = self.shape(a);
        if ba != bb || da != db || shape_a[..shape_a.len() - 2] != self.shape(b)[..shape_a.len() - 2] {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_seq",
                left: shape_a.to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for i in 0..ba {
            out.extend_from_slice(&va[i * sa * da..(i + 1) * sa * da]);
            out.extend_from_slice(&vb[i * sb * db..(i + 1) * sb * db]);
        }
        let shape = with_seq(shape_a, sa + sb, da);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatSeq(a, b), rg))
    }

    /// `[B, S, H*dh] -> [B*H, S, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || heads == 0 || !sx[2].is_multiple_of(heads) {
            return Err(AutodiffError::InvalidArgument(format!(
                "split_heads: cannot split {sx:?} into {heads} heads"
            )));
        }
        let (b, s, d) = (sx[0], sx[1], sx[2]);
        let dh = d / heads;
        let vx = self.value(x).data();
        let mut out = vec![0.0; vx.len()];
        for bi in 0..b {
            for t in 0..s {
                for h in 0..heads {
                    let src = (bi * s + t) * d + h * dh;
                    let dst = ((bi * heads + h) * s + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&vx[src..src + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![b * heads, s, dh], out),
            Op::SplitHeads { x, heads },
            rg,
        ))
    }

    /// `[B*H, S, dh] -> [B, S, H*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || heads == 0 || !sx[0].is_multiple_of(heads) {
            return Err(AutodiffError::InvalidArgument(format!(
                "merge_heads: cannot merge {sx:?} over {heads} heads"
            )));
        }
        let (b, s, dh) = (sx[0] / heads, sx[1], sx[2]);
        let d = dh * heads;
        let vx = self.value(x).data();
        let mut out = vec![0.0; vx.len()];
        for bi in 0..b {
            for t in 0..s {
                for h in 0..heads {
                    let dst = (bi * s + t) * d + h * dh;
                    let src = ((bi * heads + h) * s + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&vx[src..src + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![b, s, d], out),
            Op::MergeHeads { x, heads },
            rg,
        ))
    }

    /// Squared Euclidean distances between all sequence positions:
    /// `z[..., S, k] -> [..., S, S]`.
    pub fn pairwise_sq_dist(&mut self, z: Var) -> Result<Var> {
        let (batch, s, k) = seq_dims("pairwise_sq_dist", self.shape(z))?;
        let vz = self.value(z).data();
        let mut out = vec![0.0; batch * s * s];
        for b in 0..batch {
            let zb = &vz[b * s * k..(b + 1) * s * k];
            for t in 0..s {
                for u in 0..s {
                    let mut acc = 0.0;
                    for c in 0..k {
                        let diff = zb[t * k + c] - zb[u * k + c];
                        acc += diff * diff;
                    }
                    out[(b * s + t) * s + u] = acc;
                }
            }
        }
        let shape = with_seq(self.shape(z), s, s);
        let rg = self.rg(&[z]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::PairwiseSqDist(z), rg))
    }

    /// Gathers `positions.len() / B` sequence rows from each batch entry of
    /// `x[B, S, d]`, producing `[B, r, d]`.
    pub fn select_rows(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || positions.is_empty() || !positions.len().is_multiple_of(sx[0]) {
            return Err(AutodiffError::InvalidArgument(format!(
                "select_rows: {} positions do not fit {sx:?}",
                positions.len()
            )));
        }
        let (b, s, d) = (sx[0], sx[1], sx[2]);
        if let Some(&bad) = positions.iter().find(|&&p| p >= s) {
            return Err(AutodiffError::InvalidArgument(format!(
                "select_rows: position {bad} outside sequence of {s}"
            )));
        }
        let r = positions.len() / b;
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(b * r * d);
        for (i, &p) in positions.iter().enumerate() {
            let src = ((i / r) * s + p) * d;
            out.extend_from_slice(&vx[src..src + d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![b, r, d], out),
            Op::SelectRows {
                x,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean(x), rg)
    }

    /// Reverse pass seeded with ones at `output` (a scalar loss in practice).
    pub fn backward(&self, output: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.numel()]);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| matches!(node.op, Op::Leaf))
                    .map(|data| Tensor::from_parts(node.value.shape().to_vec(), data))
            })
            .collect();
        Gradients { grads, shapes }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(this) {
                        let o = val(other);
                        let gt = accumulate(&mut grads[this.0], g.len());
                        for i in 0..g.len() {
                            gt[i] += g[i] * o[i];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddBroadcast(x, b) => {
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if self.wants(*b) {
                    let nb = len(*b);
                    let gb = accumulate(&mut grads[b.0], nb);
                    for row in g.chunks(nb) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::MatMul(x, w) => {
                let sw = self.nodes[w.0].value.shape();
                let (k, n) = (sw[0], sw[1]);
                let m = g.len() / n;
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], m * k);
                    // gx += g · wᵀ
                    gemm(m, n, k, g, n, 1, val(*w), 1, n, gx, 1.0);
                }
                if self.wants(*w) {
                    let gw = accumulate(&mut grads[w.0], k * n);
                    // gw += xᵀ · g
                    gemm(k, m, n, val(*x), 1, k, g, n, 1, gw, 1.0);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], batch * m * k);
                    for i in 0..batch {
                        let gi = &g[i * m * n..];
                        let bi = &vb[i * k * n..];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // b is [n, k]: ga = g · b
                            gemm(m, n, k, gi, n, 1, bi, k, 1, dst, 1.0);
                        } else {
                            // b is [k, n]: ga = g · bᵀ
                            gemm(m, n, k, gi, n, 1, bi, 1, n, dst, 1.0);
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], batch * k * n);
                    for i in 0..batch {
                        let gi = &g[i * m * n..];
                        let ai = &va[i * m * k..];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // gb[n, k] = gᵀ · a
                            gemm(n, m, k, gi, 1, n, ai, k, 1, dst, 1.0);
                        } else {
                            // gb[k, n] = aᵀ · g
                            gemm(k, m, n, ai, 1, k, gi, n, 1, dst, 1.0);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gamma = val(*gain);
                if self.wants(*gain) {
                    let gg = accumulate(&mut grads[gain.0], d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], d);
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    let mut gh = vec![0.0; d];
                    for (r, ((gr, hr), dst)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut sum_gh = 0.0;
                        let mut sum_ghh = 0.0;
                        for j in 0..d {
                            gh[j] = gr[j] * gamma[j];
                            sum_gh += gh[j];
                            sum_ghh += gh[j] * hr[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dst[j] += scale * (d as f64 * gh[j] - sum_gh - hr[j] * sum_ghh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let vx = val(*x);
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(vx[i]);
                    }
                }
            }
            Op::Conv1d { u, kernel, offset } => {
                let shape = node.value.shape();
                let (batch, s, d) = (
                    node.value.numel() / (shape[shape.len() - 2] * shape[shape.len() - 1]),
                    shape[shape.len() - 2],
                    shape[shape.len() - 1],
                );
                let k = self.nodes[kernel.0].value.shape()[0];
                let (vu, vk) = (val(*u), val(*kernel));
                let want_u = self.wants(*u);
                let want_k = self.wants(*kernel);
                let mut gu = if want_u { grads[u.0].take().unwrap_or_else(|| vec![0.0; vu.len()]) } else { Vec::new() };
                let mut gk = if want_k { grads[kernel.0].take().unwrap_or_else(|| vec![0.0; vk.len()]) } else { Vec::new() };
                for b in 0..batch {
                    let base = b * s * d;
                    for t in 0..s {
                        let gt = &g[base + t * d..base + (t + 1) * d];
                        for j in 0..k {
                            let src = t as isize - *offset as isize + j as isize;
                            if src < 0 || src >= s as isize {
                                continue;
                            }
                            let src = base + src as usize * d;
                            for c in 0..d {
                                if want_u {
                                    gu[src + c] += vk[j * d + c] * gt[c];
                                }
                                if want_k {
                                    gk[j * d + c] += gt[c] * vu[src + c];
                                }
                            }
                        }
                    }
                }
                if want_u {
                    grads[u.0] = Some(gu);
                }
                if want_k {
                    grads[kernel.0] = Some(gk);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let v = self.nodes[logits.0].value.last_dim();
                    let n = targets.len() as f64;
                    let scale = g[0] / n;
                    let gl = accumulate(&mut grads[logits.0], probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = self.nodes[table.0].value.shape()[1];
                    let gt = accumulate(&mut grads[table.0], len(*table));
                    for (row, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[row * d + c];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
            Op::ConcatLast(a, b) => {
                let p = self.nodes[a.0].value.last_dim();
                let q = self.nodes[b.0].value.last_dim();
                for (v, off, w) in [(*a, 0, p), (*b, p, q)] {
                    if self.wants(v) {
                        let gv = accumulate(&mut grads[v.0], len(v));
                        for (dst, src) in gv.chunks_mut(w).zip(g.chunks(p + q)) {
                            for j in 0..w {
                                dst[j] += src[off + j];
                            }
                        }
                    }
                }
            }
            Op::ShiftSeq { x, offset } => {
                if self.wants(*x) {
                    let shape = node.value.shape();
                    let (s, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let batch = g.len() / (s * d);
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for b in 0..batch {
                        let base = b * s * d;
                        for t in *offset..s {
                            for c in 0..d {
                                gx[base + (t - offset) * d + c] += g[base + t * d + c];
                            }
                        }
                    }
                }
            }
            Op::SliceSeq { x, start } => {
                if self.wants(*x) {
                    let sx = self.nodes[x.0].value.shape();
                    let (s, d) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                    let out_s = node.value.shape()[sx.len() - 2];
                    let batch = g.len() / (out_s * d);
                    let gx = accumulate(&mut grads[x.0], len(*x));
                    for b in 0..batch {
                        let dst = b * s * d + start * d;
                        let src = b * out_s * d;
                        for i in 0..out_s * d {
                            gx[dst + i] += g[src + i];
                        }
                    }
                }
            }
            Op::ConcatSeq(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let d = sa[sa.len() - 1];
                let la = sa[sa.len() - 2] * d;
                let lb = sb[sb.len() - 2] * d;
                let batch = g.len() / (la + lb);
                for (v, off, l) in [(*a, 0, la), (*b, la, lb)] {
                    if self.wants(v) {
                        let gv = accumulate(&mut grads[v.0], batch * l);
                        for i in 0..batch {
                            let src = i * (la + lb) + off;
                            for j in 0..l {
                                gv[i * l + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if self.wants(*x) {
                    let sx = self.nodes[x.0].value.shape();
                    let (b, s, d) = (sx[0], sx[1], sx[2]);
                    let dh = d / heads;
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for bi in 0..b {
                        for t in 0..s {
                            for h in 0..*heads {
                                let dst = (bi * s + t) * d + h * dh;
                                let src = ((bi * heads + h) * s + t) * dh;
                                for j in 0..dh {
                                    gx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                if self.wants(*x) {
                    let so = node.value.shape();
                    let (b, s, d) = (so[0], so[1], so[2]);
                    let dh = d / heads;
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for bi in 0..b {
                        for t in 0..s {
                            for h in 0..*heads {
                                let src = (bi * s + t) * d + h * dh;
                                let dst = ((bi * heads + h) * s + t) * dh;
                                for j in 0..dh {
                                    gx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::PairwiseSqDist(z) => {
                if self.wants(*z) {
                    let sz = self.nodes[z.0].value.shape();
                    let (s, k) = (sz[sz.len() - 2], sz[sz.len() - 1]);
                    let batch = len(*z) / (s * k);
                    let vz = val(*z);
                    let gz = accumulate(&mut grads[z.0], vz.len());
                    for b in 0..batch {
                        let zb = &vz[b * s * k..(b + 1) * s * k];
                        let gb = &g[b * s * s..(b + 1) * s * s];
                        for t in 0..s {
                            for u in 0..s {
                                let w = 2.0 * (gb[t * s + u] + gb[u * s + t]);
                                if w == 0.0 {
                                    continue;
                                }
                                for c in 0..k {
                                    gz[b * s * k + t * k + c] += w * (zb[t * k + c] - zb[u * k + c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectRows { x, positions } => {
                if self.wants(*x) {
                    let sx = self.nodes[x.0].value.shape();
                    let (b, s, d) = (sx[0], sx[1], sx[2]);
                    let r = positions.len() / b;
                    let gx = accumulate(&mut grads[x.0], b * s * d);
                    for (i, &p) in positions.iter().enumerate() {
                        let dst = ((i / r) * s + p) * d;
                        for c in 0..d {
                            gx[dst + c] += g[i * d + c];
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.wants(*x) {
                    let n = len(*x);
                    let scale = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    let gx = accumulate(&mut grads[x.0], n);
                    gx.iter_mut().for_each(|p| *p += scale);
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
