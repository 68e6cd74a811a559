use std::borrow::Cow;

use rand::Rng;

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Dropout { x: Var, mask: Vec<T> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv1d { x: Var, w: Var, bias: Var, kernel: usize },
    Glu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, probs: Vec<T>, count: usize },
    L2Normalize { x: Var, norms: Vec<T>, eps: T },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
}

struct Node<'p, T: Real> {
    value: Cow<'p, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of executed operations.
///
/// Parameters are bound by reference (`param`), so a tape borrows the model
/// for its lifetime; gradients are read back after [`Tape::backward`] and
/// applied once the tape is dropped.
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    grads: Vec<Option<Vec<T>>>,
    training: bool,
    rng: Option<StreamRng>,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// An evaluation-mode tape (dropout is the identity).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: false,
            rng: None,
        }
    }

    /// A training-mode tape drawing dropout masks from `rng`.
    pub fn training(rng: StreamRng) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: true,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.to_vec()).expect("recorded shapes are valid")
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Cow<'p, [T]>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), shape, op, needs_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    /// An owned leaf; receives a gradient when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let rg = t.requires_grad();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, rg)
    }

    /// A borrowed parameter leaf; receives a gradient when `t.requires_grad()`.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dims("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, self.value(a), self.value(b), T::zero(), &mut out);
        Ok(self.derived(out, vec![m, n], Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a (m×k) · bᵀ` where `b` is `n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dims("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, true, m, k, n, self.value(a), self.value(b), T::zero(), &mut out);
        Ok(self.derived(out, vec![m, n], Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.derived(out, vec![c, r], Op::Transpose(a), &[a]))
    }

    // ---------------------------------------------------------------- elementwise

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).len() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::dims(op, sa, sb))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() == y.len() {
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
        } else if y.len() == 1 {
            x.iter().map(|&p| f(p, y[0])).collect()
        } else {
            y.iter().map(|&q| f(x[0], q)).collect()
        }
    }

    /// Elementwise sum; same shape or scalar broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_check("add", a, b)?;
        let out = self.zip_broadcast(a, b, |p, q| p + q);
        Ok(self.derived(out, shape, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_check("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |p, q| p - q);
        Ok(self.derived(out, shape, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_check("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |p, q| p * q);
        Ok(self.derived(out, shape, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).iter().map(|&v| v * c).collect();
        let shape = self.shape(a).to_vec();
        self.derived(out, shape, Op::Scale(a, c), &[a])
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(a).last().expect("non-empty shape");
        if self.value(bias).len() != d {
            return Err(Error::dims("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(a).to_vec();
        self.derived(out, shape, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.derived(out, shape, Op::Relu(a), &[a])
    }

    /// Natural log; every element must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&v| v <= T::zero()) {
            return Err(Error::InvalidInput("log of a non-positive value".into()));
        }
        let out = self.value(a).iter().map(|&v| v.ln()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Log(a), &[a]))
    }

    /// Inverted dropout. Identity on an evaluation tape or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let rng = self.rng.as_mut().expect("training tape has an rng");
        let mask: Vec<T> = (0..self.nodes[a.0].value.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Dropout { x: a, mask }, &[a]))
    }

    /// Applies a precomputed dropout mask (already scaled by `1/(1-p)`).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::dims("dropout", self.shape(a), &[mask.len()]));
        }
        let out = self.value(a).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Dropout { x: a, mask }, &[a]))
    }

    // ---------------------------------------------------------------- normalisation

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} invalid for shape {shape:?}")));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.derived(out, shape, Op::Softmax { x: a, outer, len, inner }, &[a]))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let out = self
            .value(a)
            .chunks(d)
            .flat_map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(move |&v| v - lse)
            })
            .collect();
        self.derived(out, shape, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalisation over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dims("layer_norm", &shape, self.shape(gain)));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(shape.iter().product());
        let mut xhat = Vec::with_capacity(out.capacity());
        let mut rstd = Vec::new();
        for row in self.value(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.derived(out, shape, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Row-wise l2 normalisation `x / (‖x‖ + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let eps = T::of(eps);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            out.extend(row.iter().map(|&v| v / (n + eps)));
        }
        self.derived(out, shape, Op::L2Normalize { x, norms, eps }, &[x])
    }

    // ---------------------------------------------------------------- convolution

    /// Same-length 1-D cross-correlation over the rows of `x (len×d_in)`.
    ///
    /// `w` is `kernel×d_in×d_out`, `bias` has `d_out` entries and the
    /// sequence is zero-padded by `(kernel-1)/2` on both sides.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, kernel: usize) -> Result<Var> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {kernel}")));
        }
        let (len, d_in) = self.dims2(x, "conv1d")?;
        let (wk, wi, d_out) = match self.shape(w) {
            [k, i, o] => (*k, *i, *o),
            s => return Err(Error::shape("conv1d", format!("kernels must be rank 3, got {s:?}"))),
        };
        if wk != kernel || wi != d_in || self.value(bias).len() != d_out {
            return Err(Error::dims("conv1d", self.shape(x), self.shape(w)));
        }
        let pad = (kernel - 1) / 2;
        let mut out: Vec<T> = self.value(bias).iter().copied().cycle().take(len * d_out).collect();
        let (xv, wv) = (self.value(x), self.value(w));
        for tap in 0..kernel {
            let (dst, src, rows) = match shifted_rows(len, tap, pad) {
                Some(r) => r,
                None => continue,
            };
            gemm(
                false,
                false,
                rows,
                d_in,
                d_out,
                &xv[src * d_in..(src + rows) * d_in],
                &wv[tap * d_in * d_out..(tap + 1) * d_in * d_out],
                T::one(),
                &mut out[dst * d_out..(dst + rows) * d_out],
            );
        }
        Ok(self.derived(out, vec![len, d_out], Op::Conv1d { x, w, bias, kernel }, &[x, w, bias]))
    }

    /// Gated linear unit: first half of the last axis gated by the sigmoid
    /// of the second half.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d2 = *shape.last().expect("non-empty shape");
        if d2 % 2 != 0 {
            return Err(Error::shape("glu", format!("last dimension {d2} is odd")));
        }
        let d = d2 / 2;
        let out = self
            .value(x)
            .chunks(d2)
            .flat_map(|row| (0..d).map(move |j| row[j] * sigmoid(row[d + j])))
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d;
        Ok(self.derived(out, out_shape, Op::Glu(x), &[x]))
    }

    // ---------------------------------------------------------------- lookup & loss

    /// Gathers rows of `table (V×d)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                size: v,
            });
        }
        let t = self.value(table);
        let out = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(self.derived(
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean token-level negative log-likelihood, skipping `pad` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dims("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "target vocabulary",
                index: bad,
                size: v,
            });
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("every target position is padding".into()));
        }
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for (r, row) in self.value(logits).chunks(v).enumerate() {
            let lse = log_sum_exp(row);
            for (j, &x) in row.iter().enumerate() {
                probs[r * v + j] = (x - lse).exp();
            }
            if targets[r] != pad {
                total += lse - row[targets[r]];
            }
        }
        let loss = total / T::of(count as f64);
        Ok(self.derived(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.derived(vec![s], vec![1], Op::Sum(a), &[a])
    }

    // ---------------------------------------------------------------- slicing

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {c} columns", start + width)));
        }
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        Ok(self.derived(out, vec![r, width], Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dims("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.derived(out, vec![rows, total], Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if count == 0 || start + count > r {
            return Err(Error::shape("slice_rows", format!("[{start}, {}) of {r} rows", start + count)));
        }
        let out = self.value(x)[start * c..(start + count) * c].to_vec();
        Ok(self.derived(out, vec![count, c], Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::dims("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.derived(out, vec![rows, cols], Op::ConcatRows(parts.to_vec()), parts))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a single-element `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", format!("root must be a scalar, got {:?}", self.shape(root))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn acc_broadcast(&mut self, v: Var, g: &[T], factor: impl Fn(usize) -> T) {
        let n = self.nodes[v.0].value.len();
        if n == g.len() {
            self.acc(v, |d| d.iter_mut().enumerate().for_each(|(i, d)| *d += g[i] * factor(i)));
        } else {
            let s: T = g.iter().enumerate().map(|(i, &gi)| gi * factor(i)).sum();
            self.acc(v, |d| d[0] += s);
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // The op is moved out so inputs can be borrowed alongside it.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.nodes[i].shape[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC · B  (trans_b)  or  dC · Bᵀ
                    gemm(false, !trans_b, m, n, k, g, self.value(b), T::zero(), &mut da);
                    self.acc(a, |d| add_into(d, &da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    if trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(true, false, n, m, k, g, self.value(a), T::zero(), &mut db);
                    } else {
                        gemm(true, false, k, m, n, self.value(a), g, T::zero(), &mut db);
                    }
                    self.acc(b, |d| add_into(d, &db));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                self.acc(a, |d| {
                    for x in 0..r {
                        for y in 0..c {
                            d[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc_broadcast(a, g, |_| T::one());
                self.acc_broadcast(b, g, |_| T::one());
            }
            &Op::Sub(a, b) => {
                self.acc_broadcast(a, g, |_| T::one());
                self.acc_broadcast(b, g, |_| -T::one());
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).to_vec();
                let bv = self.value(b).to_vec();
                let pick = |v: &[T], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                self.acc_broadcast(a, g, |i| pick(&bv, i));
                self.acc_broadcast(b, g, |i| pick(&av, i));
            }
            &Op::Scale(a, c) => self.acc(a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c)),
            &Op::AddBias(a, bias) => {
                self.acc(a, |d| add_into(d, g));
                let w = self.value(bias).len();
                self.acc(bias, |d| {
                    for row in g.chunks(w) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let dy: Vec<T> = g.iter().zip(y.iter()).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.acc(a, |d| add_into(d, &dy));
            }
            &Op::Relu(a) => {
                let x = self.value(a);
                let dx: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(a, |d| add_into(d, &dx));
            }
            &Op::Log(a) => {
                let dx: Vec<T> = g.iter().zip(self.value(a)).map(|(&g, &x)| g / x).collect();
                self.acc(a, |d| add_into(d, &dx));
            }
            Op::Dropout { x, mask } => {
                self.acc(*x, |d| d.iter_mut().zip(g).zip(mask).for_each(|((d, &g), &m)| *d += g * m));
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[i].value.to_vec();
                self.acc(x, |d| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + k;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax(x) => {
                let d = *self.nodes[i].shape.last().unwrap();
                let y = self.nodes[i].value.to_vec();
                self.acc(x, |dx| {
                    for (r, (gr, yr)) in g.chunks(d).zip(y.chunks(d)).enumerate() {
                        let s: T = gr.iter().copied().sum();
                        for j in 0..d {
                            dx[r * d + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).len();
                let dn = T::of(d as f64);
                let gv = self.value(*gain).to_vec();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let dxh: Vec<T> = g[row.clone()].iter().zip(&gv).map(|(&g, &w)| g * w).collect();
                        let m1 = dxh.iter().copied().sum::<T>() / dn;
                        let m2 = dxh.iter().zip(&xhat[row.clone()]).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            dx[r * d + j] = rs * (dxh[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    self.acc(*x, |acc| add_into(acc, &dx));
                }
                self.acc(*gain, |acc| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        acc.iter_mut().zip(gr.iter().zip(hr)).for_each(|(a, (&g, &h))| *a += g * h);
                    }
                });
                self.acc(*bias, |acc| {
                    for gr in g.chunks(d) {
                        add_into(acc, gr);
                    }
                });
            }
            &Op::Conv1d { x, w, bias, kernel } => {
                let (len, d_in) = (self.shape(x)[0], self.shape(x)[1]);
                let d_out = self.shape(w)[2];
                let pad = (kernel - 1) / 2;
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); len * d_in];
                    let wv = self.value(w);
                    for tap in 0..kernel {
                        if let Some((dst, src, rows)) = shifted_rows(len, tap, pad) {
                            gemm(
                                false,
                                true,
                                rows,
                                d_out,
                                d_in,
                                &g[dst * d_out..(dst + rows) * d_out],
                                &wv[tap * d_in * d_out..(tap + 1) * d_in * d_out],
                                T::one(),
                                &mut dx[src * d_in..(src + rows) * d_in],
                            );
                        }
                    }
                    self.acc(x, |acc| add_into(acc, &dx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); kernel * d_in * d_out];
                    let xv = self.value(x);
                    for tap in 0..kernel {
                        if let Some((dst, src, rows)) = shifted_rows(len, tap, pad) {
                            gemm(
                                true,
                                false,
                                d_in,
                                rows,
                                d_out,
                                &xv[src * d_in..(src + rows) * d_in],
                                &g[dst * d_out..(dst + rows) * d_out],
                                T::one(),
                                &mut dw[tap * d_in * d_out..(tap + 1) * d_in * d_out],
                            );
                        }
                    }
                    self.acc(w, |acc| add_into(acc, &dw));
                }
                self.acc(bias, |acc| {
                    for row in g.chunks(d_out) {
                        add_into(acc, row);
                    }
                });
            }
            &Op::Glu(x) => {
                let d2 = *self.shape(x).last().unwrap();
                let d = d2 / 2;
                let xv = self.value(x);
                let mut dx = vec![T::zero(); xv.len()];
                for (r, row) in xv.chunks(d2).enumerate() {
                    for j in 0..d {
                        let s = sigmoid(row[d + j]);
                        let go = g[r * d + j];
                        dx[r * d2 + j] = go * s;
                        dx[r * d2 + d + j] = go * row[j] * s * (T::one() - s);
                    }
                }
                self.acc(x, |acc| add_into(acc, &dx));
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.acc(*table, |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut acc[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / T::of(*count as f64);
                self.acc(*logits, |acc| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for j in 0..v {
                            acc[r * v + j] += probs[r * v + j] * scale;
                        }
                        acc[r * v + t] -= scale;
                    }
                });
            }
            Op::L2Normalize { x, norms, eps } => {
                let d = *self.shape(*x).last().unwrap();
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let s = n + *eps;
                    let dot: T = g[row.clone()].iter().zip(&xv[row.clone()]).map(|(&a, &b)| a * b).sum();
                    let k = if n > T::zero() { dot / (s * s * n) } else { T::zero() };
                    for j in row {
                        dx[j] = g[j] / s - xv[j] * k;
                    }
                }
                self.acc(*x, |acc| add_into(acc, &dx));
            }
            &Op::SliceCols { x, start } => {
                let c = self.shape(x)[1];
                let w = self.nodes[i].shape[1];
                self.acc(x, |acc| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut acc[r * c + start..r * c + start + w], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc(p, |acc| {
                        for (r, row) in acc.chunks_mut(w).enumerate() {
                            add_into(row, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = self.shape(x)[1];
                self.acc(x, |acc| add_into(&mut acc[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(p, |acc| add_into(acc, &g[offset..offset + n]));
                    offset += n;
                }
            }
            &Op::Sum(a) => self.acc(a, |d| d.iter_mut().for_each(|d| *d += g[0])),
        }
        self.nodes[i].op = op;
    }
}

/// Rows `(dst, src, count)` that a convolution tap reads, or `None` when the
/// tap lies entirely in the zero padding.
fn shifted_rows(len: usize, tap: usize, pad: usize) -> Option<(usize, usize, usize)> {
    // output row t reads input row t + tap - pad
    let dst = pad.saturating_sub(tap);
    let end = (len + pad).saturating_sub(tap).min(len);
    if end <= dst {
        return None;
    }
    Some((dst, dst + tap - pad, end - dst))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[vec![1.0, 2.0]]));
        let b = tape.constant(t(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(z, 0).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(Tensor::from_f64(&[3], &[1000.0, 0.0, 0.0]).unwrap());
        let s = tape.softmax(big, 0).unwrap();
        assert!((tape.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(s).iter().all(|v| v.is_finite()));
        assert!(tape.softmax(big, 1).is_err());
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![0.0, 1.0], vec![0.0, 3.0]]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[2] - 0.5).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_and_standardised_rows() {
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(Tensor::full(&[3], 1.0));
        let bias = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(t(&[vec![5.0, 5.0, 5.0]]));
        let y = tape.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

        let x = tape.constant(t(&[vec![1.0, 2.0, 3.0]]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = tape.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 3.0;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn conv1d_identity_tap_and_zero_kernels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let mut w = vec![0.0; 3 * 2 * 2];
        // centre tap = identity
        w[2 * 2] = 1.0;
        w[2 * 2 + 3] = 1.0;
        let w = tape.constant(Tensor::from_f64(&[3, 2, 2], &w).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv1d(x, w, b, 3).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let wz = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let y = tape.conv1d(x, wz, b, 3).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let w2 = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(matches!(tape.conv1d(x, w2, b, 2), Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_longer_kernel_than_sequence() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![2.0]]));
        let w = tape.constant(Tensor::full(&[5, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, b, 5).unwrap();
        assert_eq!(tape.value(y), &[2.0]);
    }

    #[test]
    fn glu_gates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![2.0, 4.0, 0.0, 0.0]]));
        let y = tape.glu(x).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0]);
        let x = tape.constant(t(&[vec![0.0, 0.0, 3.0, -1.0]]));
        let y = tape.glu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        let odd = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.glu(odd).is_err());
    }

    #[test]
    fn add_zero_and_scale() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![1.0, -2.0]]));
        let z = tape.constant(Tensor::scalar(0.0));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.scale(x, 0.5f64.sqrt());
        assert!((tape.value(s)[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn dropout_eval_is_identity_and_training_scales() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[100], 1.0));
        assert_eq!(tape.dropout(x, 0.25).unwrap(), x);

        let mut tape = Tape::<f64>::training(SeedTree::new(3).stream("dropout"));
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let y = tape.dropout(x, 0.25).unwrap();
        let v = tape.value(y);
        assert!(v.iter().all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-12));
        let dropped = v.iter().filter(|&&e| e == 0.0).count();
        assert!((150..350).contains(&dropped), "{dropped}");
    }

    #[test]
    fn embedding_repeated_ids_accumulate() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]).with_grad());
        let e = tape.embedding(table, &[0, 0]).unwrap();
        assert_eq!(tape.value(e), &[1.0, 2.0, 1.0, 2.0]);
        let s = tape.sum(e);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[2.0, 2.0, 0.0, 0.0]);
        assert!(matches!(tape.embedding(table, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        let l = tape.cross_entropy(logits, &[2], 0).unwrap();
        assert!((tape.value(l)[0] - 4f64.ln()).abs() < 1e-12);

        let logits = tape.constant(t(&[vec![0.0, 0.0, 100.0]]));
        let l = tape.cross_entropy(logits, &[2], 0).unwrap();
        assert!(tape.value(l)[0] < 1e-40);

        let logits = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 0], 0),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn shifted_rows_cover_padding() {
        assert_eq!(shifted_rows(4, 0, 1), Some((1, 0, 3)));
        assert_eq!(shifted_rows(4, 1, 1), Some((0, 0, 4)));
        assert_eq!(shifted_rows(4, 2, 1), Some((0, 1, 3)));
        assert_eq!(shifted_rows(1, 0, 2), None);
        assert_eq!(shifted_rows(1, 2, 2), Some((0, 0, 1)));
    }
}
