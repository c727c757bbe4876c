//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each operation executes eagerly, records itself as a node, and returns a
//! [`Var`] handle. The tape is topologically ordered by construction, so
//! `backward` is a single reverse sweep that visits every node exactly once
//! and accumulates gradients additively into per-node grad buffers.
//!
//! Storage is struct-of-arrays (values, ops, grads) so the backward sweep
//! can read values while writing gradients without copying tensors. All
//! kernels are sequential with a fixed accumulation order, so a given build
//! produces bit-identical results for identical inputs.

use std::rc::Rc;

use crate::error::{D2v2Error, Result};
use crate::tensor::{
    gelu, gelu_grad, matmul_at, matmul_nn, matmul_nt, row_stats, softmax_rows, Scalar, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-sample row indices shared between gather/scatter ops.
pub type RowIndex = Rc<Vec<Vec<usize>>>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    MatMul { a: Var, b: Var, trans_b: bool },
    MulHead { a: Var, s: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, eps: f64 },
    InstanceNorm { a: Var, eps: f64 },
    GatherRows { a: Var, idx: RowIndex },
    ScatterRows { src: Var, base: Var, idx: RowIndex },
    Embed { w: Var, ids: RowIndex },
    Concat1 { a: Var, b: Var },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Conv1dStrided { x: Var, w: Var, stride: usize },
    GroupedConv1d { x: Var, w: Var, groups: usize },
    GroupedConv2d { x: Var, w: Var, groups: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Rc<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::MulHead { .. } => "mul_head",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Embed { .. } => "embed",
            Op::Concat1 { .. } => "concat",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Conv1dStrided { .. } => "conv1d_strided",
            Op::GroupedConv1d { .. } => "grouped_conv1d",
            Op::GroupedConv2d { .. } => "grouped_conv2d",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

/// Eager tape of executed operations with saved inputs for backward.
pub struct Graph<E: Scalar> {
    values: Vec<Tensor<E>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<E>>>,
    flops: u64,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), ops: Vec::new(), requires: Vec::new(), grads: Vec::new(), flops: 0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Forward FLOPs executed so far (multiply-add counted as 2).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient accumulated for `v` by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()))
    }

    /// Error if `v` holds any non-finite value; names the context and the
    /// producing operation.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.values[v.0].is_all_finite() {
            Ok(())
        } else {
            Err(D2v2Error::numeric(format!(
                "non-finite value in {context} (op {})",
                self.ops[v.0].name()
            )))
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    // ── graph inputs ──────────────────────────────────────────────

    /// Insert a constant (no gradient).
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a leaf that accumulates gradient.
    pub fn param(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    // ── elementwise and broadcast ─────────────────────────────────

    /// `a + b`. `b`'s shape must equal `a`'s or be a trailing suffix of it
    /// (bias rows, position tables, shared attention bias, ...).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let bs = self.shape(b).to_vec();
        assert!(
            suffix_of(self.shape(a), &bs),
            "add: {:?} vs {:?}",
            self.shape(a),
            bs
        );
        let bn: usize = bs.iter().product();
        let mut out = self.value(a).data().to_vec();
        let bd = self.value(b).data();
        for chunk in out.chunks_exact_mut(bn) {
            for (o, &v) in chunk.iter_mut().zip(bd.iter()) {
                *o += v;
            }
        }
        self.flops += out.len() as u64;
        let t = Tensor::new(self.shape(a).to_vec(), out);
        let rg = self.req(a) || self.req(b);
        self.push(t, Op::Add { a, b }, rg)
    }

    /// `a - b`, same shapes.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        self.flops += out.len() as u64;
        let t = Tensor::new(self.shape(a).to_vec(), out);
        let rg = self.req(a) || self.req(b);
        self.push(t, Op::Sub { a, b }, rg)
    }

    /// Elementwise `a * b` with the same suffix-broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bs = self.shape(b).to_vec();
        assert!(
            suffix_of(self.shape(a), &bs),
            "mul: {:?} vs {:?}",
            self.shape(a),
            bs
        );
        let bn: usize = bs.iter().product();
        let mut out = self.value(a).data().to_vec();
        let bd = self.value(b).data();
        for chunk in out.chunks_exact_mut(bn) {
            for (o, &v) in chunk.iter_mut().zip(bd.iter()) {
                *o = *o * v;
            }
        }
        self.flops += out.len() as u64;
        let t = Tensor::new(self.shape(a).to_vec(), out);
        let rg = self.req(a) || self.req(b);
        self.push(t, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = E::from_f64(c);
        let out: Vec<E> = self.value(a).data().iter().map(|&x| x * k).collect();
        self.flops += out.len() as u64;
        let t = Tensor::new(self.shape(a).to_vec(), out);
        let rg = self.req(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    // ── linear algebra ────────────────────────────────────────────

    /// Batched matrix product. `a` is `[..., m, k]`; `b` is either 2-D
    /// (`[k, n]`, broadcast over the batch and computed as one flattened
    /// product) or has the same leading dims. With `trans_b`, `b`'s last
    /// two dims are `[n, k]` and `a · bᵀ` is computed.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        assert!(ashape.len() >= 2 && bshape.len() >= 2, "matmul ranks");
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (bk, n) = if trans_b {
            (bshape[bshape.len() - 1], bshape[bshape.len() - 2])
        } else {
            (bshape[bshape.len() - 2], bshape[bshape.len() - 1])
        };
        assert_eq!(k, bk, "matmul inner dims: {ashape:?} x {bshape:?} (trans_b={trans_b})");
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let b_batched = bshape.len() > 2;
        if b_batched {
            assert_eq!(
                &ashape[..ashape.len() - 2],
                &bshape[..bshape.len() - 2],
                "matmul batch dims"
            );
        }
        let mut out = vec![E::zero(); batch * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        if !b_batched {
            // one flattened product over the whole batch
            if trans_b {
                matmul_nt(ad, bd, batch * m, k, n, &mut out);
            } else {
                matmul_nn(ad, bd, batch * m, k, n, &mut out);
            }
        } else {
            for bi in 0..batch {
                let asl = &ad[bi * m * k..(bi + 1) * m * k];
                let bsl = &bd[bi * k * n..(bi + 1) * k * n];
                let osl = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    matmul_nt(asl, bsl, m, k, n, osl);
                } else {
                    matmul_nn(asl, bsl, m, k, n, osl);
                }
            }
        }
        self.flops += 2 * (batch * m * k * n) as u64;
        let mut oshape = ashape[..ashape.len() - 2].to_vec();
        oshape.push(m);
        oshape.push(n);
        let rg = self.req(a) || self.req(b);
        self.push(Tensor::new(oshape, out), Op::MatMul { a, b, trans_b }, rg)
    }

    /// Per-head scaling: `a` is `[batch, heads, ...]`, `s` is `[heads]`;
    /// `out[b, h, ..] = a[b, h, ..] * s[h]`.
    pub fn mul_head(&mut self, a: Var, s: Var) -> Var {
        let ashape = self.shape(a).to_vec();
        assert!(ashape.len() >= 2);
        let heads = ashape[1];
        assert_eq!(self.shape(s), &[heads], "mul_head scalars");
        let rest: usize = ashape[2..].iter().product();
        let sd = self.value(s).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for b0 in out.chunks_exact_mut(heads * rest) {
            for (h, chunk) in b0.chunks_exact_mut(rest).enumerate() {
                let sv = sd[h];
                for o in chunk.iter_mut() {
                    *o = *o * sv;
                }
            }
        }
        self.flops += out.len() as u64;
        let rg = self.req(a) || self.req(s);
        self.push(Tensor::new(ashape, out), Op::MulHead { a, s }, rg)
    }

    // ── activations and normalization ─────────────────────────────

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<E> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.flops += 15 * out.len() as u64;
        let t = Tensor::new(self.shape(a).to_vec(), out);
        let rg = self.req(a);
        self.push(t, Op::Gelu { a }, rg)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let row = *shape.last().expect("softmax rank");
        let mut out = self.value(a).data().to_vec();
        softmax_rows(&mut out, row);
        self.flops += 5 * out.len() as u64;
        let rg = self.req(a);
        self.push(Tensor::new(shape, out), Op::Softmax { a }, rg)
    }

    /// Layer normalization over the trailing axis with learned affine.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let row = *shape.last().expect("layer_norm rank");
        assert_eq!(self.shape(gamma), &[row], "layer_norm gamma");
        assert_eq!(self.shape(beta), &[row], "layer_norm beta");
        let epse = E::from_f64(eps);
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for r in out.chunks_exact_mut(row) {
            let (mean, rstd) = row_stats(r, epse);
            for (v, (&g, &b)) in r.iter_mut().zip(gd.iter().zip(bd.iter())) {
                *v = (*v - mean) * rstd * g + b;
            }
        }
        self.flops += 8 * out.len() as u64;
        let rg = self.req(a) || self.req(gamma) || self.req(beta);
        self.push(Tensor::new(shape, out), Op::LayerNorm { a, gamma, beta, eps }, rg)
    }

    /// Instance normalization: input `[batch, channels, positions]`, each
    /// (batch, channel) row normalized to zero mean / unit variance over
    /// positions. No affine parameters.
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(D2v2Error::config(format!(
                "instance_norm expects [batch, channels, positions], got {shape:?}"
            )));
        }
        let positions = shape[2];
        if positions == 0 {
            return Err(D2v2Error::config("instance_norm over empty positions axis"));
        }
        if eps <= 0.0 {
            return Err(D2v2Error::config("instance_norm eps must be > 0"));
        }
        let epse = E::from_f64(eps);
        let mut out = self.value(a).data().to_vec();
        for r in out.chunks_exact_mut(positions) {
            let (mean, rstd) = row_stats(r, epse);
            for v in r.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        self.flops += 8 * out.len() as u64;
        let rg = self.req(a);
        Ok(self.push(Tensor::new(shape, out), Op::InstanceNorm { a, eps }, rg))
    }

    // ── indexing and shaping ──────────────────────────────────────

    /// Select rows along axis 1, per batch element: `a` is
    /// `[batch, rows, rest...]`, `idx[b]` lists the rows kept for sample
    /// `b` (all samples must keep the same count).
    pub fn gather_rows(&mut self, a: Var, idx: RowIndex) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(shape.len() >= 3, "gather_rows rank");
        let (batch, rows) = (shape[0], shape[1]);
        let rest: usize = shape[2..].iter().product();
        assert_eq!(idx.len(), batch, "gather_rows batch");
        let n = idx[0].len();
        let ad = self.value(a).data();
        let mut out = vec![E::zero(); batch * n * rest];
        for (b, rows_b) in idx.iter().enumerate() {
            assert_eq!(rows_b.len(), n, "gather_rows ragged index");
            for (i, &r) in rows_b.iter().enumerate() {
                assert!(r < rows, "gather_rows row {r} out of {rows}");
                let src = &ad[(b * rows + r) * rest..(b * rows + r + 1) * rest];
                out[(b * n + i) * rest..(b * n + i + 1) * rest].copy_from_slice(src);
            }
        }
        let mut oshape = vec![batch, n];
        oshape.extend_from_slice(&shape[2..]);
        let rg = self.req(a);
        self.push(Tensor::new(oshape, out), Op::GatherRows { a, idx }, rg)
    }

    /// Write `src`'s rows into a copy of `base` at the given row positions:
    /// `base` is `[batch, rows, rest]`, `src` is `[batch, n, rest]`.
    /// Gradient flows to `src` at the written rows and to `base` everywhere
    /// else.
    pub fn scatter_rows(&mut self, src: Var, base: Var, idx: RowIndex) -> Var {
        let bshape = self.shape(base).to_vec();
        let sshape = self.shape(src).to_vec();
        assert!(bshape.len() >= 3 && sshape.len() >= 3, "scatter_rows rank");
        let (batch, rows) = (bshape[0], bshape[1]);
        let rest: usize = bshape[2..].iter().product();
        let n = sshape[1];
        assert_eq!(sshape[0], batch, "scatter_rows batch");
        assert_eq!(&sshape[2..], &bshape[2..], "scatter_rows row shape");
        assert_eq!(idx.len(), batch, "scatter_rows index batch");
        let mut out = self.value(base).data().to_vec();
        let sd = self.value(src).data();
        for (b, rows_b) in idx.iter().enumerate() {
            assert_eq!(rows_b.len(), n, "scatter_rows ragged index");
            for (i, &r) in rows_b.iter().enumerate() {
                assert!(r < rows, "scatter_rows row {r} out of {rows}");
                out[(b * rows + r) * rest..(b * rows + r + 1) * rest]
                    .copy_from_slice(&sd[(b * n + i) * rest..(b * n + i + 1) * rest]);
            }
        }
        let rg = self.req(src) || self.req(base);
        self.push(Tensor::new(bshape, out), Op::ScatterRows { src, base, idx }, rg)
    }

    /// Embedding lookup: `w` is `[vocab, width]`, `ids[b]` lists token ids;
    /// out is `[batch, seq, width]`.
    pub fn embed(&mut self, w: Var, ids: RowIndex) -> Var {
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 2, "embed weight rank");
        let (vocab, width) = (wshape[0], wshape[1]);
        let batch = ids.len();
        let seq = ids[0].len();
        let wd = self.value(w).data();
        let mut out = vec![E::zero(); batch * seq * width];
        for (b, row) in ids.iter().enumerate() {
            assert_eq!(row.len(), seq, "embed ragged ids");
            for (t, &id) in row.iter().enumerate() {
                assert!(id < vocab, "embed id {id} out of vocab {vocab}");
                out[(b * seq + t) * width..(b * seq + t + 1) * width]
                    .copy_from_slice(&wd[id * width..(id + 1) * width]);
            }
        }
        let rg = self.req(w);
        self.push(Tensor::new(vec![batch, seq, width], out), Op::Embed { w, ids }, rg)
    }

    /// Concatenate along axis 1.
    pub fn concat1(&mut self, a: Var, b: Var) -> Var {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        assert!(ashape.len() >= 2 && ashape.len() == bshape.len(), "concat ranks");
        assert_eq!(ashape[0], bshape[0], "concat batch");
        assert_eq!(&ashape[2..], &bshape[2..], "concat row shape");
        let rest: usize = ashape[2..].iter().product();
        let (batch, ta, tb) = (ashape[0], ashape[1], bshape[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![E::zero(); batch * (ta + tb) * rest];
        for bi in 0..batch {
            let o = &mut out[bi * (ta + tb) * rest..(bi + 1) * (ta + tb) * rest];
            o[..ta * rest].copy_from_slice(&ad[bi * ta * rest..(bi + 1) * ta * rest]);
            o[ta * rest..].copy_from_slice(&bd[bi * tb * rest..(bi + 1) * tb * rest]);
        }
        let mut oshape = ashape.clone();
        oshape[1] = ta + tb;
        let rg = self.req(a) || self.req(b);
        self.push(Tensor::new(oshape, out), Op::Concat1 { a, b }, rg)
    }

    /// Axis permutation (copying).
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        assert_eq!(perm.len(), nd, "permute rank");
        let mut seen = vec![false; nd];
        for &p in perm {
            assert!(p < nd && !seen[p], "permute axes");
            seen[p] = true;
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let ad = self.value(a).data();
        let mut out = vec![E::zero(); ad.len()];
        permute_into(ad, &shape, perm, &mut out);
        let rg = self.req(a);
        self.push(Tensor::new(oshape, out), Op::Permute { a, perm: perm.to_vec() }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.value(a).numel(), "reshape numel");
        let t = Tensor::new(shape, self.value(a).data().to_vec());
        let rg = self.req(a);
        self.push(t, Op::Reshape { a }, rg)
    }

    // ── convolutions ──────────────────────────────────────────────

    /// Valid (unpadded) strided 1-D convolution: `x` `[batch, c_in, len]`,
    /// `w` `[c_out, c_in, kernel]`. Output length is `(len - kernel)/stride + 1`.
    pub fn conv1d_strided(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv1d input rank");
        assert_eq!(ws.len(), 3, "conv1d weight rank");
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, wc_in, kernel) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in {
            return Err(D2v2Error::config(format!(
                "conv1d channels: input has {c_in}, weight expects {wc_in}"
            )));
        }
        if len < kernel {
            return Err(D2v2Error::data(format!(
                "conv1d input length {len} shorter than kernel {kernel}"
            )));
        }
        let out_len = (len - kernel) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![E::zero(); batch * c_out * out_len];
        for b in 0..batch {
            for co in 0..c_out {
                let orow = &mut out[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
                for ci in 0..c_in {
                    let xrow = &xd[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                    let wrow = &wd[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
                    for (lo, o) in orow.iter_mut().enumerate() {
                        let start = lo * stride;
                        let mut acc = E::zero();
                        for (t, &wv) in wrow.iter().enumerate() {
                            acc += xrow[start + t] * wv;
                        }
                        *o += acc;
                    }
                }
            }
        }
        self.flops += 2 * (batch * c_out * out_len * c_in * kernel) as u64;
        let rg = self.req(x) || self.req(w);
        Ok(self.push(
            Tensor::new(vec![batch, c_out, out_len], out),
            Op::Conv1dStrided { x, w, stride },
            rg,
        ))
    }

    /// Same-padded stride-1 grouped 1-D convolution: `x` `[batch, c, len]`,
    /// `w` `[c_out, c_in/groups, kernel]` with odd kernel.
    pub fn grouped_conv1d(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "grouped_conv1d input rank");
        assert_eq!(ws.len(), 3, "grouped_conv1d weight rank");
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, cpg_in, kernel) = (ws[0], ws[1], ws[2]);
        check_groups(c_in, c_out, cpg_in, groups)?;
        if kernel % 2 == 0 {
            return Err(D2v2Error::config(format!(
                "grouped_conv1d kernel {kernel} must be odd for same padding"
            )));
        }
        let pad = (kernel - 1) / 2;
        let cpg_out = c_out / groups;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![E::zero(); batch * c_out * len];
        for b in 0..batch {
            for co in 0..c_out {
                let g = co / cpg_out;
                let orow = &mut out[(b * c_out + co) * len..(b * c_out + co + 1) * len];
                for cil in 0..cpg_in {
                    let ci = g * cpg_in + cil;
                    let xrow = &xd[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                    let wrow = &wd[(co * cpg_in + cil) * kernel..(co * cpg_in + cil + 1) * kernel];
                    // per tap: one shifted axpy over the valid range
                    for (t, &wv) in wrow.iter().enumerate() {
                        let (dst_lo, src_lo, n) = tap_range(len, t, pad);
                        for (o, &xv) in orow[dst_lo..dst_lo + n].iter_mut().zip(xrow[src_lo..src_lo + n].iter()) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        self.flops += 2 * (batch * c_out * len * cpg_in * kernel) as u64;
        let rg = self.req(x) || self.req(w);
        Ok(self.push(
            Tensor::new(vec![batch, c_out, len], out),
            Op::GroupedConv1d { x, w, groups },
            rg,
        ))
    }

    /// Same-padded stride-1 grouped 2-D convolution: `x` `[batch, c, h, w]`,
    /// `weight` `[c_out, c_in/groups, kh, kw]` with odd kernel extents.
    pub fn grouped_conv2d(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "grouped_conv2d input rank");
        assert_eq!(ws.len(), 4, "grouped_conv2d weight rank");
        let (batch, c_in, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, cpg_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        check_groups(c_in, c_out, cpg_in, groups)?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(D2v2Error::config(format!(
                "grouped_conv2d kernel {kh}x{kw} must have odd extents"
            )));
        }
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let cpg_out = c_out / groups;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![E::zero(); batch * c_out * h * wdt];
        for b in 0..batch {
            for co in 0..c_out {
                let g = co / cpg_out;
                for cil in 0..cpg_in {
                    let ci = g * cpg_in + cil;
                    let xpl = &xd[(b * c_in + ci) * h * wdt..(b * c_in + ci + 1) * h * wdt];
                    let wpl = &wd[((co * cpg_in + cil) * kh * kw)..((co * cpg_in + cil + 1) * kh * kw)];
                    let opl = &mut out[(b * c_out + co) * h * wdt..(b * c_out + co + 1) * h * wdt];
                    // per tap: shifted row axpys over the valid window
                    for ty in 0..kh {
                        let (dy_lo, sy_lo, ny) = tap_range(h, ty, ph);
                        for tx in 0..kw {
                            let wv = wpl[ty * kw + tx];
                            let (dx_lo, sx_lo, nx) = tap_range(wdt, tx, pw);
                            for r in 0..ny {
                                let d = &mut opl[(dy_lo + r) * wdt + dx_lo..(dy_lo + r) * wdt + dx_lo + nx];
                                let s = &xpl[(sy_lo + r) * wdt + sx_lo..(sy_lo + r) * wdt + sx_lo + nx];
                                for (o, &xv) in d.iter_mut().zip(s.iter()) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.flops += 2 * (batch * c_out * h * wdt * cpg_in * kh * kw) as u64;
        let rg = self.req(x) || self.req(w);
        Ok(self.push(
            Tensor::new(vec![batch, c_out, h, wdt], out),
            Op::GroupedConv2d { x, w, groups },
            rg,
        ))
    }

    // ── reductions and losses ─────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = E::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        self.flops += self.value(a).numel() as u64;
        let rg = self.req(a);
        self.push(Tensor::scalar(acc), Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let mut acc = E::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        let t = Tensor::scalar(acc / E::from_f64(n as f64));
        self.flops += n as u64;
        let rg = self.req(a);
        self.push(t, Op::MeanAll { a }, rg)
    }

    /// Mean negative log-likelihood of `labels` under the softmax of
    /// `logits` (`[n, classes]`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2, "cross entropy logits rank");
        let (n, classes) = (shape[0], shape[1]);
        assert_eq!(labels.len(), n, "cross entropy labels");
        let ld = self.value(logits).data();
        let mut loss = E::zero();
        for (i, &lab) in labels.iter().enumerate() {
            assert!(lab < classes, "label {lab} out of {classes}");
            let row = &ld[i * classes..(i + 1) * classes];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max_val(v);
            }
            let mut lse = E::zero();
            for &v in row {
                lse += (v - mx).exp();
            }
            loss += mx + lse.ln() - row[lab];
        }
        let t = Tensor::scalar(loss / E::from_f64(n as f64));
        self.flops += 6 * (n * classes) as u64;
        let rg = self.req(logits);
        self.push(t, Op::SoftmaxCrossEntropy { logits, labels }, rg)
    }

    // ── backward ──────────────────────────────────────────────────

    /// Reverse sweep from a scalar `root`. Each node is visited once;
    /// gradients accumulate additively into every contributing input.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        if !self.value(root).item().is_finite() {
            return Err(D2v2Error::numeric(format!(
                "loss is non-finite (op {})",
                self.ops[root.0].name()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![E::one()]);
        for i in (0..=root.0).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            {
                let Graph { values, ops, requires, grads, .. } = self;
                backstep(values, requires, grads, &ops[i], &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Zero-initialized gradient slot for `v`.
fn slot<'a, E: Scalar>(
    grads: &'a mut [Option<Vec<E>>],
    values: &[Tensor<E>],
    v: Var,
) -> &'a mut [E] {
    let n = values[v.0].numel();
    grads[v.0].get_or_insert_with(|| vec![E::zero(); n]).as_mut_slice()
}

fn val<E: Scalar>(values: &[Tensor<E>], v: Var) -> &[E] {
    values[v.0].data()
}

/// One node's contribution to its inputs' gradients. `g` is the node's own
/// gradient.
fn backstep<E: Scalar>(
    values: &[Tensor<E>],
    requires: &[bool],
    grads: &mut [Option<Vec<E>>],
    op: &Op,
    g: &[E],
) {
    let req = |v: Var| requires[v.0];
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if req(*a) {
                for (o, &v) in slot(grads, values, *a).iter_mut().zip(g.iter()) {
                    *o += v;
                }
            }
            if req(*b) {
                let bn = values[b.0].numel();
                let gb = slot(grads, values, *b);
                for chunk in g.chunks_exact(bn) {
                    for (o, &v) in gb.iter_mut().zip(chunk.iter()) {
                        *o += v;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if req(*a) {
                for (o, &v) in slot(grads, values, *a).iter_mut().zip(g.iter()) {
                    *o += v;
                }
            }
            if req(*b) {
                for (o, &v) in slot(grads, values, *b).iter_mut().zip(g.iter()) {
                    *o -= v;
                }
            }
        }
        Op::Mul { a, b } => {
            let bn = values[b.0].numel();
            if req(*a) {
                // split the borrow: values read, grads written
                let (gslot, bd) = (slot(grads, values, *a), val(values, *b));
                for (chunk_g, chunk_o) in g.chunks_exact(bn).zip(gslot.chunks_exact_mut(bn)) {
                    for ((o, &gv), &bv) in chunk_o.iter_mut().zip(chunk_g.iter()).zip(bd.iter()) {
                        *o += gv * bv;
                    }
                }
            }
            if req(*b) {
                let (gslot, ad) = (slot(grads, values, *b), val(values, *a));
                for (chunk_g, chunk_a) in g.chunks_exact(bn).zip(ad.chunks_exact(bn)) {
                    for ((o, &gv), &av) in gslot.iter_mut().zip(chunk_g.iter()).zip(chunk_a.iter()) {
                        *o += gv * av;
                    }
                }
            }
        }
        Op::Scale { a, c } => {
            if req(*a) {
                let k = E::from_f64(*c);
                for (o, &v) in slot(grads, values, *a).iter_mut().zip(g.iter()) {
                    *o += v * k;
                }
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let ashape = values[a.0].shape();
            let bshape = values[b.0].shape();
            let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
            let n = if *trans_b { bshape[bshape.len() - 2] } else { bshape[bshape.len() - 1] };
            let batch: usize = ashape[..ashape.len() - 2].iter().product();
            let b_batched = bshape.len() > 2;
            if req(*a) {
                let (ga, bd) = (slot(grads, values, *a), val(values, *b));
                if !b_batched {
                    if *trans_b {
                        // C = A·Bᵀ  =>  dA = dC·B  (B stored [n, k])
                        matmul_nn(g, bd, batch * m, n, k, ga);
                    } else {
                        // C = A·B   =>  dA = dC·Bᵀ (B stored [k, n])
                        matmul_nt(g, bd, batch * m, n, k, ga);
                    }
                } else {
                    for bi in 0..batch {
                        let gsl = &g[bi * m * n..(bi + 1) * m * n];
                        let bsl = &bd[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            matmul_nn(gsl, bsl, m, n, k, out);
                        } else {
                            matmul_nt(gsl, bsl, m, n, k, out);
                        }
                    }
                }
            }
            if req(*b) {
                let (gb, ad) = (slot(grads, values, *b), val(values, *a));
                if !b_batched {
                    if *trans_b {
                        // dB = dCᵀ·A
                        matmul_at(g, ad, batch * m, n, k, gb);
                    } else {
                        // dB = Aᵀ·dC
                        matmul_at(ad, g, batch * m, k, n, gb);
                    }
                } else {
                    for bi in 0..batch {
                        let gsl = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &ad[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            matmul_at(gsl, asl, m, n, k, out);
                        } else {
                            matmul_at(asl, gsl, m, k, n, out);
                        }
                    }
                }
            }
        }
        Op::MulHead { a, s } => {
            let shape = values[a.0].shape();
            let (batch, heads) = (shape[0], shape[1]);
            let rest: usize = shape[2..].iter().product();
            if req(*a) {
                let (ga, sd) = (slot(grads, values, *a), val(values, *s));
                for b in 0..batch {
                    for h in 0..heads {
                        let off = (b * heads + h) * rest;
                        let sv = sd[h];
                        for (o, &gv) in ga[off..off + rest].iter_mut().zip(g[off..off + rest].iter()) {
                            *o += gv * sv;
                        }
                    }
                }
            }
            if req(*s) {
                let (gs, ad) = (slot(grads, values, *s), val(values, *a));
                for b in 0..batch {
                    for h in 0..heads {
                        let off = (b * heads + h) * rest;
                        let mut acc = E::zero();
                        for (&gv, &av) in g[off..off + rest].iter().zip(ad[off..off + rest].iter()) {
                            acc += gv * av;
                        }
                        gs[h] += acc;
                    }
                }
            }
        }
        Op::Gelu { a } => {
            if req(*a) {
                let (ga, ad) = (slot(grads, values, *a), val(values, *a));
                for ((o, &gv), &x) in ga.iter_mut().zip(g.iter()).zip(ad.iter()) {
                    *o += gv * gelu_grad(x);
                }
            }
        }
        Op::Softmax { a } => {
            if req(*a) {
                // the saved output IS this node's value; find it via the
                // grads slot shape: use the input's value for row size and
                // recompute y from the forward result stored in values of
                // the output node. The output node is not addressable here,
                // so recompute softmax from the input instead.
                let row = *values[a.0].shape().last().unwrap();
                let (ga, ad) = (slot(grads, values, *a), val(values, *a));
                let mut y = vec![E::zero(); row];
                for ((grow, xrow), orow) in g
                    .chunks_exact(row)
                    .zip(ad.chunks_exact(row))
                    .zip(ga.chunks_exact_mut(row))
                {
                    y.copy_from_slice(xrow);
                    softmax_rows(&mut y, row);
                    let mut dot = E::zero();
                    for (&gv, &yv) in grow.iter().zip(y.iter()) {
                        dot += gv * yv;
                    }
                    for ((o, &gv), &yv) in orow.iter_mut().zip(grow.iter()).zip(y.iter()) {
                        *o += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, gamma, beta, eps } => {
            let shape = values[a.0].shape();
            let row = *shape.last().unwrap();
            let rows = values[a.0].numel() / row;
            let epse = E::from_f64(*eps);
            if req(*gamma) {
                let (gg, xd) = (slot(grads, values, *gamma), val(values, *a));
                for r in 0..rows {
                    let x = &xd[r * row..(r + 1) * row];
                    let (mean, rstd) = row_stats(x, epse);
                    for j in 0..row {
                        gg[j] += g[r * row + j] * (x[j] - mean) * rstd;
                    }
                }
            }
            if req(*beta) {
                let gb = slot(grads, values, *beta);
                for r in 0..rows {
                    for j in 0..row {
                        gb[j] += g[r * row + j];
                    }
                }
            }
            if req(*a) {
                let inv_n = E::one() / E::from_f64(row as f64);
                let gd = val(values, *gamma).to_vec();
                let (ga, xd) = (slot(grads, values, *a), val(values, *a));
                let mut xh = vec![E::zero(); row];
                for r in 0..rows {
                    let x = &xd[r * row..(r + 1) * row];
                    let (mean, rstd) = row_stats(x, epse);
                    let grow = &g[r * row..(r + 1) * row];
                    let mut mean_dxhat = E::zero();
                    let mut mean_dxhat_xhat = E::zero();
                    for j in 0..row {
                        xh[j] = (x[j] - mean) * rstd;
                        let dxh = grow[j] * gd[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat = mean_dxhat * inv_n;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                    let orow = &mut ga[r * row..(r + 1) * row];
                    for j in 0..row {
                        let dxh = grow[j] * gd[j];
                        orow[j] += rstd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        }
        Op::InstanceNorm { a, eps } => {
            if req(*a) {
                let row = values[a.0].shape()[2];
                let epse = E::from_f64(*eps);
                let inv_n = E::one() / E::from_f64(row as f64);
                let (ga, xd) = (slot(grads, values, *a), val(values, *a));
                let mut xh = vec![E::zero(); row];
                for (r, (grow, xrow)) in g.chunks_exact(row).zip(xd.chunks_exact(row)).enumerate() {
                    let (mean, rstd) = row_stats(xrow, epse);
                    let mut mean_g = E::zero();
                    let mut mean_g_xhat = E::zero();
                    for j in 0..row {
                        xh[j] = (xrow[j] - mean) * rstd;
                        mean_g += grow[j];
                        mean_g_xhat += grow[j] * xh[j];
                    }
                    mean_g = mean_g * inv_n;
                    mean_g_xhat = mean_g_xhat * inv_n;
                    let orow = &mut ga[r * row..(r + 1) * row];
                    for j in 0..row {
                        orow[j] += rstd * (grow[j] - mean_g - xh[j] * mean_g_xhat);
                    }
                }
            }
        }
        Op::GatherRows { a, idx } => {
            if req(*a) {
                let rows = values[a.0].shape()[1];
                let rest: usize = values[a.0].shape()[2..].iter().product();
                let n = idx[0].len();
                let ga = slot(grads, values, *a);
                for (b, rows_b) in idx.iter().enumerate() {
                    for (j, &r) in rows_b.iter().enumerate() {
                        let src = &g[(b * n + j) * rest..(b * n + j + 1) * rest];
                        let dst = &mut ga[(b * rows + r) * rest..(b * rows + r + 1) * rest];
                        for (o, &v) in dst.iter_mut().zip(src.iter()) {
                            *o += v;
                        }
                    }
                }
            }
        }
        Op::ScatterRows { src, base, idx } => {
            let rows = values[base.0].shape()[1];
            let rest: usize = values[base.0].shape()[2..].iter().product();
            let n = idx[0].len();
            if req(*src) {
                let gs = slot(grads, values, *src);
                for (b, rows_b) in idx.iter().enumerate() {
                    for (j, &r) in rows_b.iter().enumerate() {
                        let src_g = &g[(b * rows + r) * rest..(b * rows + r + 1) * rest];
                        let dst = &mut gs[(b * n + j) * rest..(b * n + j + 1) * rest];
                        for (o, &v) in dst.iter_mut().zip(src_g.iter()) {
                            *o += v;
                        }
                    }
                }
            }
            if req(*base) {
                // overwritten rows receive no gradient
                let gb = slot(grads, values, *base);
                let batch = idx.len();
                for (b, rows_b) in idx.iter().enumerate() {
                    let mut skip = vec![false; rows];
                    for &r in rows_b.iter() {
                        skip[r] = true;
                    }
                    for r in 0..rows {
                        if skip[r] {
                            continue;
                        }
                        let off = (b * rows + r) * rest;
                        for (o, &v) in gb[off..off + rest].iter_mut().zip(g[off..off + rest].iter()) {
                            *o += v;
                        }
                    }
                }
                let _ = batch;
            }
        }
        Op::Embed { w, ids } => {
            if req(*w) {
                let width = values[w.0].shape()[1];
                let seq = ids[0].len();
                let gw = slot(grads, values, *w);
                for (b, row) in ids.iter().enumerate() {
                    for (t, &id) in row.iter().enumerate() {
                        let src = &g[(b * seq + t) * width..(b * seq + t + 1) * width];
                        let dst = &mut gw[id * width..(id + 1) * width];
                        for (o, &v) in dst.iter_mut().zip(src.iter()) {
                            *o += v;
                        }
                    }
                }
            }
        }
        Op::Concat1 { a, b } => {
            let ashape = values[a.0].shape().to_vec();
            let bshape = values[b.0].shape().to_vec();
            let rest: usize = ashape[2..].iter().product();
            let (batch, ta, tb) = (ashape[0], ashape[1], bshape[1]);
            if req(*a) {
                let ga = slot(grads, values, *a);
                for bi in 0..batch {
                    let gsl = &g[bi * (ta + tb) * rest..bi * (ta + tb) * rest + ta * rest];
                    for (o, &v) in ga[bi * ta * rest..(bi + 1) * ta * rest].iter_mut().zip(gsl.iter()) {
                        *o += v;
                    }
                }
            }
            if req(*b) {
                let gb = slot(grads, values, *b);
                for bi in 0..batch {
                    let gsl = &g[bi * (ta + tb) * rest + ta * rest..(bi + 1) * (ta + tb) * rest];
                    for (o, &v) in gb[bi * tb * rest..(bi + 1) * tb * rest].iter_mut().zip(gsl.iter()) {
                        *o += v;
                    }
                }
            }
        }
        Op::Permute { a, perm } => {
            if req(*a) {
                let in_shape = values[a.0].shape().to_vec();
                let ga = slot(grads, values, *a);
                permute_accumulate(g, &in_shape, perm, ga);
            }
        }
        Op::Reshape { a } => {
            if req(*a) {
                for (o, &v) in slot(grads, values, *a).iter_mut().zip(g.iter()) {
                    *o += v;
                }
            }
        }
        Op::Conv1dStrided { x, w, stride } => {
            let xs = values[x.0].shape().to_vec();
            let ws = values[w.0].shape().to_vec();
            let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
            let (c_out, _, kernel) = (ws[0], ws[1], ws[2]);
            let out_len = (len - kernel) / stride + 1;
            if req(*x) {
                let (gx, wd) = (slot(grads, values, *x), val(values, *w));
                for b in 0..batch {
                    for co in 0..c_out {
                        let grow = &g[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
                        for ci in 0..c_in {
                            let wrow = &wd[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
                            let xrow = &mut gx[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                            for (lo, &gv) in grow.iter().enumerate() {
                                let start = lo * stride;
                                for (t, &wv) in wrow.iter().enumerate() {
                                    xrow[start + t] += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
            if req(*w) {
                let (gw, xd) = (slot(grads, values, *w), val(values, *x));
                for b in 0..batch {
                    for co in 0..c_out {
                        let grow = &g[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
                        for ci in 0..c_in {
                            let xrow = &xd[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                            let wrow = &mut gw[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
                            for (lo, &gv) in grow.iter().enumerate() {
                                let start = lo * stride;
                                for (t, o) in wrow.iter_mut().enumerate() {
                                    *o += gv * xrow[start + t];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::GroupedConv1d { x, w, groups } => {
            let xs = values[x.0].shape().to_vec();
            let ws = values[w.0].shape().to_vec();
            let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
            let (c_out, cpg_in, kernel) = (ws[0], ws[1], ws[2]);
            let pad = (kernel - 1) / 2;
            let cpg_out = c_out / groups;
            if req(*x) {
                let (gx, wd) = (slot(grads, values, *x), val(values, *w));
                for b in 0..batch {
                    for co in 0..c_out {
                        let grp = co / cpg_out;
                        let grow = &g[(b * c_out + co) * len..(b * c_out + co + 1) * len];
                        for cil in 0..cpg_in {
                            let ci = grp * cpg_in + cil;
                            let wrow = &wd[(co * cpg_in + cil) * kernel..(co * cpg_in + cil + 1) * kernel];
                            let xrow = &mut gx[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                            for (t, &wv) in wrow.iter().enumerate() {
                                let (dst_lo, src_lo, n) = tap_range(len, t, pad);
                                for (o, &gv) in xrow[src_lo..src_lo + n].iter_mut().zip(grow[dst_lo..dst_lo + n].iter()) {
                                    *o += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
            if req(*w) {
                let (gw, xd) = (slot(grads, values, *w), val(values, *x));
                for b in 0..batch {
                    for co in 0..c_out {
                        let grp = co / cpg_out;
                        let grow = &g[(b * c_out + co) * len..(b * c_out + co + 1) * len];
                        for cil in 0..cpg_in {
                            let ci = grp * cpg_in + cil;
                            let xrow = &xd[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                            let wrow = &mut gw[(co * cpg_in + cil) * kernel..(co * cpg_in + cil + 1) * kernel];
                            for (t, o) in wrow.iter_mut().enumerate() {
                                let (dst_lo, src_lo, n) = tap_range(len, t, pad);
                                let mut acc = E::zero();
                                for (&gv, &xv) in grow[dst_lo..dst_lo + n].iter().zip(xrow[src_lo..src_lo + n].iter()) {
                                    acc += gv * xv;
                                }
                                *o += acc;
                            }
                        }
                    }
                }
            }
        }
        Op::GroupedConv2d { x, w, groups } => {
            let xs = values[x.0].shape().to_vec();
            let ws = values[w.0].shape().to_vec();
            let (batch, c_in, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
            let (c_out, cpg_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
            let cpg_out = c_out / groups;
            if req(*x) {
                let (gx, wd) = (slot(grads, values, *x), val(values, *w));
                for b in 0..batch {
                    for co in 0..c_out {
                        let grp = co / cpg_out;
                        let gpl = &g[(b * c_out + co) * h * wdt..(b * c_out + co + 1) * h * wdt];
                        for cil in 0..cpg_in {
                            let ci = grp * cpg_in + cil;
                            let wpl = &wd[(co * cpg_in + cil) * kh * kw..(co * cpg_in + cil + 1) * kh * kw];
                            let xpl = &mut gx[(b * c_in + ci) * h * wdt..(b * c_in + ci + 1) * h * wdt];
                            for ty in 0..kh {
                                let (dy_lo, sy_lo, ny) = tap_range(h, ty, ph);
                                for tx in 0..kw {
                                    let wv = wpl[ty * kw + tx];
                                    let (dx_lo, sx_lo, nx) = tap_range(wdt, tx, pw);
                                    for r in 0..ny {
                                        let d = &mut xpl[(sy_lo + r) * wdt + sx_lo..(sy_lo + r) * wdt + sx_lo + nx];
                                        let s = &gpl[(dy_lo + r) * wdt + dx_lo..(dy_lo + r) * wdt + dx_lo + nx];
                                        for (o, &gv) in d.iter_mut().zip(s.iter()) {
                                            *o += gv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if req(*w) {
                let (gw, xd) = (slot(grads, values, *w), val(values, *x));
                for b in 0..batch {
                    for co in 0..c_out {
                        let grp = co / cpg_out;
                        let gpl = &g[(b * c_out + co) * h * wdt..(b * c_out + co + 1) * h * wdt];
                        for cil in 0..cpg_in {
                            let ci = grp * cpg_in + cil;
                            let xpl = &xd[(b * c_in + ci) * h * wdt..(b * c_in + ci + 1) * h * wdt];
                            let wpl = &mut gw[(co * cpg_in + cil) * kh * kw..(co * cpg_in + cil + 1) * kh * kw];
                            for ty in 0..kh {
                                let (dy_lo, sy_lo, ny) = tap_range(h, ty, ph);
                                for tx in 0..kw {
                                    let (dx_lo, sx_lo, nx) = tap_range(wdt, tx, pw);
                                    let mut acc = E::zero();
                                    for r in 0..ny {
                                        let d = &gpl[(dy_lo + r) * wdt + dx_lo..(dy_lo + r) * wdt + dx_lo + nx];
                                        let s = &xpl[(sy_lo + r) * wdt + sx_lo..(sy_lo + r) * wdt + sx_lo + nx];
                                        for (&gv, &xv) in d.iter().zip(s.iter()) {
                                            acc += gv * xv;
                                        }
                                    }
                                    wpl[ty * kw + tx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if req(*a) {
                let gv = g[0];
                for o in slot(grads, values, *a).iter_mut() {
                    *o += gv;
                }
            }
        }
        Op::MeanAll { a } => {
            if req(*a) {
                let n = values[a.0].numel();
                let gv = g[0] / E::from_f64(n as f64);
                for o in slot(grads, values, *a).iter_mut() {
                    *o += gv;
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            if req(*logits) {
                let shape = values[logits.0].shape();
                let (n, classes) = (shape[0], shape[1]);
                let inv_n = E::one() / E::from_f64(n as f64);
                let gv = g[0];
                let (gl, ld) = (slot(grads, values, *logits), val(values, *logits));
                for (r, &lab) in labels.iter().enumerate() {
                    let row = &ld[r * classes..(r + 1) * classes];
                    let mut mx = row[0];
                    for &v in row {
                        mx = mx.max_val(v);
                    }
                    let mut lse = E::zero();
                    for &v in row {
                        lse += (v - mx).exp();
                    }
                    let orow = &mut gl[r * classes..(r + 1) * classes];
                    for (j, o) in orow.iter_mut().enumerate() {
                        let p = (row[j] - mx).exp() / lse;
                        let onehot = if j == lab { E::one() } else { E::zero() };
                        *o += gv * inv_n * (p - onehot);
                    }
                }
            }
        }
    }
}

/// Compute backprop gradients of a scalar `loss` for every named parameter
/// leaf, erroring with the offending op name if anything non-finite shows
/// up.
pub fn grad_of<E: Scalar>(
    g: &mut Graph<E>,
    loss: Var,
    params: &[(String, Var)],
) -> Result<Vec<(String, Tensor<E>)>> {
    g.backward(loss)?;
    let mut out = Vec::with_capacity(params.len());
    for (name, var) in params {
        let grad = g
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(g.value(*var).shape().to_vec()));
        if !grad.is_all_finite() {
            return Err(D2v2Error::numeric(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        out.push((name.clone(), grad));
    }
    Ok(out)
}

fn suffix_of(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Valid window for one same-padding kernel tap: returns
/// (dst_start, src_start, count) such that dst[i] pairs with
/// src[i + tap - pad] over in-bounds indices only.
#[inline]
fn tap_range(len: usize, tap: usize, pad: usize) -> (usize, usize, usize) {
    let shift = tap as isize - pad as isize;
    let dst_lo = (-shift).max(0) as usize;
    let dst_hi = (len as isize - shift).clamp(0, len as isize) as usize;
    let n = dst_hi.saturating_sub(dst_lo);
    (dst_lo, (dst_lo as isize + shift) as usize, n)
}

fn check_groups(c_in: usize, c_out: usize, cpg_in: usize, groups: usize) -> Result<()> {
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(D2v2Error::config(format!(
            "channels in={c_in} out={c_out} not divisible by groups={groups}"
        )));
    }
    if cpg_in != c_in / groups {
        return Err(D2v2Error::config(format!(
            "weight expects {cpg_in} channels per group, input gives {}",
            c_in / groups
        )));
    }
    Ok(())
}

fn permute_into<E: Scalar>(src: &[E], in_shape: &[usize], perm: &[usize], out: &mut [E]) {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut counter = vec![0usize; nd];
    let mut src_idx = 0usize;
    for o in out.iter_mut() {
        *o = src[src_idx];
        // odometer over out_shape, tracking src_idx incrementally
        for d in (0..nd).rev() {
            counter[d] += 1;
            src_idx += in_strides[perm[d]];
            if counter[d] < out_shape[d] {
                break;
            }
            src_idx -= in_strides[perm[d]] * out_shape[d];
            counter[d] = 0;
        }
    }
}

fn permute_accumulate<E: Scalar>(g_out: &[E], in_shape: &[usize], perm: &[usize], g_in: &mut [E]) {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut counter = vec![0usize; nd];
    let mut src_idx = 0usize;
    for &gv in g_out.iter() {
        g_in[src_idx] += gv;
        for d in (0..nd).rev() {
            counter[d] += 1;
            src_idx += in_strides[perm[d]];
            if counter[d] < out_shape[d] {
                break;
            }
            src_idx -= in_strides[perm[d]] * out_shape[d];
            counter[d] = 0;
        }
    }
}
