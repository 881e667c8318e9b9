//! Recording tape for reverse-mode differentiation.
//!
//! Nodes are appended in topological order (an op can only reference earlier
//! ids), so one reverse sweep visits each node exactly once. Gradients
//! accumulate into leaf tensors / parameters; the caller zeroes them between
//! steps.

use super::conv::{self, ConvDims};
use super::gemm;
use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::{Tensor, TensorError, TensorResult};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

const PAR_ELEMWISE_THRESHOLD: usize = 1 << 16;
const PAR_CHUNK: usize = 1 << 14;

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        dims: ConvDims,
    },
    Relu {
        x: ValueId,
    },
    Dropout {
        x: ValueId,
        mask: Vec<S>,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    AddRow {
        x: ValueId,
        v: ValueId,
    },
    Scale {
        x: ValueId,
        c: S,
    },
    Sum {
        x: ValueId,
    },
    Softmax {
        x: ValueId,
    },
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: S,
    },
    InstanceNorm2d {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: S,
    },
    CrossEntropy {
        logits: ValueId,
        targets: Vec<usize>,
    },
    MatMulBatched {
        a: ValueId,
        b: ValueId,
        transpose_b: bool,
    },
    Reshape {
        x: ValueId,
    },
    Permute {
        x: ValueId,
        perm: Vec<usize>,
    },
    GlobalAvgPool {
        x: ValueId,
    },
    WeightedFuse {
        zv: ValueId,
        zt: ValueId,
        w: ValueId,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Q/K/V/O projection parameters of one attention block, already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub wq: ValueId,
    pub bq: ValueId,
    pub wk: ValueId,
    pub bk: ValueId,
    pub wv: ValueId,
    pub bv: ValueId,
    pub wo: ValueId,
    pub bo: ValueId,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    bindings: Vec<(ValueId, ParamId)>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Copy an external tensor onto the tape. Gradients flow back to it only
    /// through [`Tape::grad`] if `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<S>) -> ValueId {
        let needs = t.requires_grad;
        let mut value = t.clone();
        value.grad = None;
        self.push(Op::Leaf, value, needs)
    }

    /// Leaf bound to a store parameter; `accumulate_param_grads` routes the
    /// gradient back after `backward`.
    pub fn param(&mut self, store: &ParamStore<S>, pid: ParamId) -> ValueId {
        let mut value = store.get(pid).tensor.clone();
        value.grad = None;
        value.requires_grad = true;
        let id = self.push(Op::Leaf, value, true);
        self.bindings.push((id, pid));
        id
    }

    pub fn constant(&mut self, t: Tensor<S>) -> ValueId {
        let mut value = t;
        value.requires_grad = false;
        value.grad = None;
        self.push(Op::Leaf, value, false)
    }

    // ----- primitives -------------------------------------------------

    /// `y[r, j] = Σ_k x[r, k]·w[j, k] + b[j]` over the last axis of x.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> TensorResult<ValueId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                lhs: ws,
                rhs: bs,
            });
        }
        let (rows, n) = self.value(x).rows_cols();
        let m = ws[0];
        let wt = gemm::transpose(self.value(w).data(), m, n);
        let mut out = vec![S::zero(); rows * m];
        gemm::matmul_acc(self.value(x).data(), rows, n, &wt, m, &mut out);
        let bias = self.value(b).data();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, Tensor::new(shape, out)?, needs))
    }

    /// Zero-padded strided cross-correlation.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> TensorResult<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let dims = ConvDims::new(xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad)
            .ok_or(TensorError::ShapeMismatch {
                op: "conv2d kernel exceeds padded input",
                lhs: xs.clone(),
                rhs: ws.clone(),
            })?;
        if self.value(b).shape() != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: ws,
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let y = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
        );
        let shape = vec![dims.batch, dims.c_out, dims.h_out, dims.w_out];
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Op::Conv2d { x, w, b, dims },
            Tensor::new(shape, y)?,
            needs,
        ))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let src = self.value(x);
        let mut out = src.clone();
        map_elems(out.data_mut(), |v| if v > S::zero() { v } else { S::zero() });
        let needs = self.needs(x);
        self.push(Op::Relu { x }, out, needs)
    }

    /// Inverted dropout: survivors are rescaled by `1/(1−p)` at train time so
    /// eval mode is the identity (and records nothing).
    pub fn dropout(
        &mut self,
        x: ValueId,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<ValueId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() >= p {
                    scale
                } else {
                    S::zero()
                }
            })
            .collect();
        let src = self.value(x);
        let mut out = src.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Dropout { x, mask }, out, needs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> TensorResult<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let rhs = self.value(b).data();
        zip_elems(out.data_mut(), rhs, |o, r| *o += r);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    /// Broadcast-add a vector along the last axis.
    pub fn add_row(&mut self, x: ValueId, v: ValueId) -> TensorResult<ValueId> {
        let (_, cols) = self.value(x).rows_cols();
        if self.value(v).shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        let row = self.value(v).data();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, &r) in chunk.iter_mut().zip(row) {
                *o += r;
            }
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(Op::AddRow { x, v }, out, needs))
    }

    pub fn scale(&mut self, x: ValueId, c: S) -> ValueId {
        let mut out = self.value(x).clone();
        map_elems(out.data_mut(), |v| v * c);
        let needs = self.needs(x);
        self.push(Op::Scale { x, c }, out, needs)
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let total = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Op::Sum { x }, Tensor::scalar(total), needs)
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: ValueId) -> TensorResult<ValueId> {
        if !self.value(x).is_finite() {
            return Err(TensorError::Numeric(
                "softmax input contains non-finite values".into(),
            ));
        }
        let (_, cols) = self.value(x).rows_cols();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_row(row);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Softmax { x }, out, needs))
    }

    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: S,
    ) -> TensorResult<ValueId> {
        if eps <= S::zero() {
            return Err(TensorError::Config("layer_norm eps must be > 0".into()));
        }
        let (_, d) = self.value(x).rows_cols();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm affine",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        for row in out.data_mut().chunks_mut(d) {
            let (mean, inv) = moments(row, eps);
            for j in 0..d {
                row[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            out,
            needs,
        ))
    }

    /// Per-sample, per-channel normalization over the spatial axes with a
    /// per-channel affine. Stateless, so train and eval behave identically.
    pub fn instance_norm2d(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: S,
    ) -> TensorResult<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "instance_norm2d",
                lhs: xs,
                rhs: vec![],
            });
        }
        let c = xs[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "instance_norm2d affine",
                lhs: xs,
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(TensorError::Config("instance_norm2d eps must be > 0".into()));
        }
        let hw = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        out.data_mut()
            .par_chunks_mut(hw)
            .enumerate()
            .for_each(|(group, chunk)| {
                let ch = group % c;
                let (mean, inv) = moments(chunk, eps);
                for v in chunk.iter_mut() {
                    *v = (*v - mean) * inv * g[ch] + b[ch];
                }
            });
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::InstanceNorm2d { x, gamma, beta, eps },
            out,
            needs,
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[target]`, in
    /// log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> TensorResult<ValueId> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        if targets.len() != batch {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy targets",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::Index {
                index: bad,
                bound: classes,
            });
        }
        if !self.value(logits).is_finite() {
            return Err(TensorError::Numeric(
                "cross_entropy input contains non-finite values".into(),
            ));
        }
        let data = self.value(logits).data();
        let mut total = S::zero();
        for (row, &t) in data.chunks(classes).zip(targets) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let sum_exp: S = row.iter().map(|&z| (z - max).exp()).sum();
            total += max + sum_exp.ln() - row[t];
        }
        let loss = total / S::from_f64(batch as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Batched matmul over the two trailing axes; leading axes must agree.
    pub fn matmul_batched(
        &mut self,
        a: ValueId,
        b: ValueId,
        transpose_b: bool,
    ) -> TensorResult<ValueId> {
        let ashape = self.value(a).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul_batched",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if ashape.len() < 2 || ashape.len() != bshape.len() {
            return Err(mismatch());
        }
        let lead = ashape.len() - 2;
        if ashape[..lead] != bshape[..lead] {
            return Err(mismatch());
        }
        let (m, k) = (ashape[lead], ashape[lead + 1]);
        let (bk, n) = if transpose_b {
            (bshape[lead + 1], bshape[lead])
        } else {
            (bshape[lead], bshape[lead + 1])
        };
        if k != bk {
            return Err(mismatch());
        }
        let batches: usize = ashape[..lead].iter().product();
        let adata = self.value(a).data();
        let bdata = self.value(b).data();
        let mut out = vec![S::zero(); batches * m * n];
        for bi in 0..batches {
            let av = &adata[bi * m * k..(bi + 1) * m * k];
            let bv = &bdata[bi * n * k..(bi + 1) * n * k];
            let co = &mut out[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                // bv is [n, k]
                for i in 0..m {
                    for j in 0..n {
                        let mut s = S::zero();
                        for p in 0..k {
                            s += av[i * k + p] * bv[j * k + p];
                        }
                        co[i * n + j] = s;
                    }
                }
            } else {
                gemm::matmul_acc(av, m, k, bv, n, co);
            }
        }
        let mut shape = ashape[..lead].to_vec();
        shape.push(m);
        shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::MatMulBatched { a, b, transpose_b },
            Tensor::new(shape, out)?,
            needs,
        ))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> TensorResult<ValueId> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, value, needs))
    }

    pub fn permute(&mut self, x: ValueId, perm: Vec<usize>) -> TensorResult<ValueId> {
        let shape = self.value(x).shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Config(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(x).data(), &shape, &perm);
        let needs = self.needs(x);
        Ok(self.push(
            Op::Permute { x, perm },
            Tensor::new(out_shape, data)?,
            needs,
        ))
    }

    /// `[B, C, H, W] → [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: ValueId) -> TensorResult<ValueId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "global_avg_pool",
                lhs: shape,
                rhs: vec![],
            });
        }
        let hw = shape[2] * shape[3];
        let scale = S::from_f64(1.0 / hw as f64);
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|chunk| chunk.iter().copied().sum::<S>() * scale)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            Op::GlobalAvgPool { x },
            Tensor::new(vec![shape[0], shape[1]], out)?,
            needs,
        ))
    }

    /// Convex combination of two logit tensors with softmax-normalized
    /// two-way weights. The complement form guarantees the effective weights
    /// sum to exactly 1.
    pub fn weighted_fuse(
        &mut self,
        zv: ValueId,
        zt: ValueId,
        w: ValueId,
    ) -> TensorResult<ValueId> {
        if self.value(zv).shape() != self.value(zt).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_fuse",
                lhs: self.value(zv).shape().to_vec(),
                rhs: self.value(zt).shape().to_vec(),
            });
        }
        if self.value(w).numel() != 2 {
            return Err(TensorError::Config(format!(
                "fusion weights must have exactly 2 entries, got shape {:?}",
                self.value(w).shape()
            )));
        }
        let wd = self.value(w).data();
        let (a_v, a_t) = two_way_softmax(wd[0], wd[1]);
        let mut out = self.value(zv).clone();
        let zt_data = self.value(zt).data();
        zip_elems(out.data_mut(), zt_data, |o, t| *o = *o * a_v + t * a_t);
        let needs = self.needs(zv) || self.needs(zt) || self.needs(w);
        Ok(self.push(Op::WeightedFuse { zv, zt, w }, out, needs))
    }

    /// Standard scaled dot-product attention with `heads` heads, built from
    /// tape primitives so its backward comes from theirs.
    pub fn multi_head_attention(
        &mut self,
        x: ValueId,
        p: &MhaParams,
        heads: usize,
    ) -> TensorResult<ValueId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let q = self.linear(x, p.wq, p.bq)?;
        let k = self.linear(x, p.wk, p.bk)?;
        let v = self.linear(x, p.wv, p.bv)?;

        let split = |tape: &mut Self, t: ValueId| -> TensorResult<ValueId> {
            let r = tape.reshape(t, vec![b, l, heads, dh])?;
            tape.permute(r, vec![0, 2, 1, 3])
        };
        let qh = split(self, q)?;
        let kh = split(self, k)?;
        let vh = split(self, v)?;

        let scores = self.matmul_batched(qh, kh, true)?;
        let scaled = self.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = self.softmax(scaled)?;
        let ctx = self.matmul_batched(attn, vh, false)?;
        let merged = self.permute(ctx, vec![0, 2, 1, 3])?;
        let flat = self.reshape(merged, vec![b, l, d])?;
        self.linear(flat, p.wo, p.bo)
    }

    // ----- backward ----------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates tape-side gradients;
    /// combine with [`Tape::accumulate_param_grads`] or [`Tape::grad`].
    pub fn backward(&mut self, loss: ValueId) -> TensorResult<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage(
                "backward target is not on this tape".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward target w.r.t. a tape value, if it was
    /// reached by the sweep.
    pub fn grad(&self, id: ValueId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Add leaf gradients into their bound parameters (accumulates; callers
    /// zero grads between steps).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) {
        for &(vid, pid) in &self.bindings {
            if let Some(g) = self.grad(vid) {
                let param = store.get_mut(pid);
                let acc = param
                    .tensor
                    .grad
                    .get_or_insert_with(|| vec![S::zero(); g.len()]);
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: ValueId, delta: &[S]) {
        if !self.needs(id) {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![S::zero(); delta.len()]);
        if delta.len() > PAR_ELEMWISE_THRESHOLD {
            slot.par_chunks_mut(PAR_CHUNK)
                .zip(delta.par_chunks(PAR_CHUNK))
                .for_each(|(a, d)| {
                    for (av, &dv) in a.iter_mut().zip(d) {
                        *av += dv;
                    }
                });
        } else {
            for (a, &d) in slot.iter_mut().zip(delta) {
                *a += d;
            }
        }
    }

    fn backward_node(&self, idx: usize, gy: &[S], grads: &mut [Option<Vec<S>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, n) = self.value(*x).rows_cols();
                let m = self.value(*w).shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); rows * n];
                    gemm::matmul_acc(gy, rows, m, self.value(*w).data(), n, &mut dx);
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![S::zero(); m * n];
                    gemm::a_transpose_b_acc(gy, rows, m, self.value(*x).data(), n, &mut dw);
                    self.accumulate(grads, *w, &dw);
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); m];
                    for row in gy.chunks(m) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let need_dx = self.needs(*x);
                let g = conv::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dims,
                    gy,
                    need_dx,
                );
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*w) {
                    self.accumulate(grads, *w, &g.dw);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, &g.db);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx: Vec<S> = gy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<S> = gy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy);
                self.accumulate(grads, *b, gy);
            }
            Op::AddRow { x, v } => {
                self.accumulate(grads, *x, gy);
                if self.needs(*v) {
                    let cols = self.value(*v).numel();
                    let mut dv = vec![S::zero(); cols];
                    for row in gy.chunks(cols) {
                        for (acc, &g) in dv.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    self.accumulate(grads, *v, &dv);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<S> = gy.iter().map(|&g| g * *c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![gy[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, &dx);
            }
            Op::Softmax { x } => {
                let y = self.value(ValueId(idx)).data();
                let (_, cols) = self.value(*x).rows_cols();
                let mut dx = vec![S::zero(); y.len()];
                for ((dx_row, y_row), g_row) in
                    dx.chunks_mut(cols).zip(y.chunks(cols)).zip(gy.chunks(cols))
                {
                    let dot: S = g_row.iter().zip(y_row).map(|(&g, &yv)| g * yv).sum();
                    for j in 0..cols {
                        dx_row[j] = y_row[j] * (g_row[j] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x).data();
                let (rows, d) = self.value(*x).rows_cols();
                let g = self.value(*gamma).data();
                let mut dx = vec![S::zero(); xv.len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                let inv_d = S::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &gy[r * d..(r + 1) * d];
                    let (mean, inv) = moments(xr, *eps);
                    let mut sum_gg = S::zero();
                    let mut sum_ggx = S::zero();
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv;
                        let gg = gr[j] * g[j];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    let m_gg = sum_gg * inv_d;
                    let m_ggx = sum_ggx * inv_d;
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv;
                        dxr[j] = (gr[j] * g[j] - m_gg - xhat * m_ggx) * inv;
                    }
                }
                self.accumulate(grads, *x, &dx);
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &dbeta);
                }
            }
            Op::InstanceNorm2d { x, gamma, beta, eps } => {
                let xv = self.value(*x).data();
                let shape = self.value(*x).shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let g = self.value(*gamma).data();
                let mut dx = vec![S::zero(); xv.len()];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let inv_n = S::from_f64(1.0 / hw as f64);
                for (group, (x_chunk, g_chunk)) in
                    xv.chunks(hw).zip(gy.chunks(hw)).enumerate()
                {
                    let ch = group % c;
                    let (mean, inv) = moments(x_chunk, *eps);
                    let mut sum_gg = S::zero();
                    let mut sum_ggx = S::zero();
                    for j in 0..hw {
                        let xhat = (x_chunk[j] - mean) * inv;
                        let gg = g_chunk[j] * g[ch];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        dgamma[ch] += g_chunk[j] * xhat;
                        dbeta[ch] += g_chunk[j];
                    }
                    let m_gg = sum_gg * inv_n;
                    let m_ggx = sum_ggx * inv_n;
                    let dx_chunk = &mut dx[group * hw..(group + 1) * hw];
                    for j in 0..hw {
                        let xhat = (x_chunk[j] - mean) * inv;
                        dx_chunk[j] = (g_chunk[j] * g[ch] - m_gg - xhat * m_ggx) * inv;
                    }
                }
                self.accumulate(grads, *x, &dx);
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &dbeta);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let z = self.value(*logits).data();
                let classes = self.value(*logits).shape()[1];
                let scale = gy[0] / S::from_f64(targets.len() as f64);
                let mut dz = vec![S::zero(); z.len()];
                for ((dz_row, z_row), &t) in
                    dz.chunks_mut(classes).zip(z.chunks(classes)).zip(targets)
                {
                    dz_row.copy_from_slice(z_row);
                    softmax_row(dz_row);
                    dz_row[t] -= S::one();
                    for v in dz_row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, &dz);
            }
            Op::MatMulBatched { a, b, transpose_b } => {
                let ashape = self.value(*a).shape();
                let lead = ashape.len() - 2;
                let (m, k) = (ashape[lead], ashape[lead + 1]);
                let n = self.value(ValueId(idx)).shape()[lead + 1];
                let batches: usize = ashape[..lead].iter().product();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![S::zero(); av.len()];
                let mut db = vec![S::zero(); bv.len()];
                for bi in 0..batches {
                    let gys = &gy[bi * m * n..(bi + 1) * m * n];
                    let asl = &av[bi * m * k..(bi + 1) * m * k];
                    let bsl = &bv[bi * n * k..(bi + 1) * n * k];
                    let dasl = &mut da[bi * m * k..(bi + 1) * m * k];
                    let dbsl = &mut db[bi * n * k..(bi + 1) * n * k];
                    if *transpose_b {
                        // C = A·Bᵀ with B: [n, k]
                        gemm::matmul_acc(gys, m, n, bsl, k, dasl); // dA = dC·B
                        gemm::a_transpose_b_acc(gys, m, n, asl, k, dbsl); // dB = dCᵀ·A
                    } else {
                        // C = A·B with B: [k, n]
                        // dA = dC·Bᵀ
                        let bt = gemm::transpose(bsl, k, n);
                        gemm::matmul_acc(gys, m, n, &bt, k, dasl);
                        // dB = Aᵀ·dC
                        gemm::a_transpose_b_acc(asl, m, k, gys, n, dbsl);
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, gy);
            }
            Op::Permute { x, perm } => {
                let out_shape = self.value(ValueId(idx)).shape();
                let inverse = invert_perm(perm);
                let dx = permute_data(gy, out_shape, &inverse);
                self.accumulate(grads, *x, &dx);
            }
            Op::GlobalAvgPool { x } => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                let scale = S::from_f64(1.0 / hw as f64);
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for (chunk, &g) in dx.chunks_mut(hw).zip(gy) {
                    let v = g * scale;
                    for o in chunk.iter_mut() {
                        *o = v;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::WeightedFuse { zv, zt, w } => {
                let wd = self.value(*w).data();
                let (a_v, a_t) = two_way_softmax(wd[0], wd[1]);
                if self.needs(*zv) {
                    let d: Vec<S> = gy.iter().map(|&g| g * a_v).collect();
                    self.accumulate(grads, *zv, &d);
                }
                if self.needs(*zt) {
                    let d: Vec<S> = gy.iter().map(|&g| g * a_t).collect();
                    self.accumulate(grads, *zt, &d);
                }
                if self.needs(*w) {
                    let zvd = self.value(*zv).data();
                    let ztd = self.value(*zt).data();
                    let mut s = S::zero();
                    for ((&g, &v), &t) in gy.iter().zip(zvd).zip(ztd) {
                        s += g * (v - t);
                    }
                    let dw0 = a_v * a_t * s;
                    self.accumulate(grads, *w, &[dw0, -dw0]);
                }
            }
        }
    }
}

/// Softmax weights of a two-logit vector, summing to exactly 1.
pub fn two_way_softmax<S: Scalar>(w0: S, w1: S) -> (S, S) {
    let d = w0 - w1;
    let a0 = if d >= S::zero() {
        S::one() / (S::one() + (-d).exp())
    } else {
        let e = d.exp();
        e / (S::one() + e)
    };
    (a0, S::one() - a0)
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Population mean and `1/sqrt(var + eps)` of a slice.
fn moments<S: Scalar>(xs: &[S], eps: S) -> (S, S) {
    let n = S::from_f64(xs.len() as f64);
    let mean = xs.iter().copied().sum::<S>() / n;
    let var = xs
        .iter()
        .map(|&v| {
            let d = v - mean;
            d * d
        })
        .sum::<S>()
        / n;
    (mean, S::one() / (var + eps).sqrt())
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![S::zero(); data.len()];
    let mut coords = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for (axis, &extent) in out_shape.iter().enumerate().rev() {
            coords[axis] = rem % extent;
            rem /= extent;
        }
        let mut src = 0;
        for (axis, &p) in perm.iter().enumerate() {
            src += coords[axis] * in_strides[p];
        }
        *slot = data[src];
    }
    out
}

fn map_elems<S: Scalar>(data: &mut [S], f: impl Fn(S) -> S + Sync) {
    if data.len() > PAR_ELEMWISE_THRESHOLD {
        data.par_chunks_mut(PAR_CHUNK).for_each(|chunk| {
            for v in chunk.iter_mut() {
                *v = f(*v);
            }
        });
    } else {
        for v in data.iter_mut() {
            *v = f(*v);
        }
    }
}

fn zip_elems<S: Scalar>(dst: &mut [S], src: &[S], f: impl Fn(&mut S, S) + Sync) {
    if dst.len() > PAR_ELEMWISE_THRESHOLD {
        dst.par_chunks_mut(PAR_CHUNK)
            .zip(src.par_chunks(PAR_CHUNK))
            .for_each(|(d, s)| {
                for (dv, &sv) in d.iter_mut().zip(s) {
                    f(dv, sv);
                }
            });
    } else {
        for (dv, &sv) in dst.iter_mut().zip(src) {
            f(dv, sv);
        }
    }
}
