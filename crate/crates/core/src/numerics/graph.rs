//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] owns every intermediate value. Operations append a node whose
//! inputs always precede it, so the node order is already a topological
//! order and the backward pass is a single reverse sweep. Nodes whose inputs
//! do not require gradients are stored as plain values and skipped.

use rand::Rng;

use super::{kernels, NumericsError, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Value assigned to masked attention logits. Finite, and `exp` of it
/// underflows to exactly zero in both precisions.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Average over supervised (non-pad) positions.
    Mean,
    Sum,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var, cols: usize },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    SliceCols { x: Var, start: usize, width: usize, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)> },
    ConcatRows { parts: Vec<Var> },
    Reshape { x: Var },
    MaskFill { x: Var, mask: Vec<bool> },
    Dropout { x: Var, scale: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, cols: usize, weight: T, smoothing: T },
    Sum { x: Var },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a copy of a trainable tensor.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut v = t.clone();
        v.zero_grad();
        self.push(v.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), NumericsError> {
        self.nodes[v.0].value.dims2()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims2(x)?;
        let data = kernels::transpose(self.value(x).data(), rows, cols);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![cols, rows], data)?, Op::Transpose { x, rows, cols }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    /// Adds a length-`cols` vector to every row of a `rows × cols` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims2(x)?;
        if self.value(bias).numel() != cols {
            return Err(self.mismatch("add_row", x, bias));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            add_into(&mut data[r * cols..(r + 1) * cols], b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::AddRow { x, bias, cols }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let value = self.value(x).softmax(axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims2(x)?;
        if self.value(gain).numel() != cols {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).numel() != cols {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::from_f64(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::LayerNorm { x, gain, bias, cols, xhat, rstd },
            rg,
        ))
    }

    /// Gathers rows of a `vocab × dim` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, NumericsError> {
        let (vocab, dim) = self.dims2(table)?;
        let mut data = Vec::with_capacity(ids.len() * dim);
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(NumericsError::Index { index: id, bound: vocab });
            }
            data.extend_from_slice(self.value(table).row(id));
            idx.push(id);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], data)?,
            Op::Embedding { table, ids: idx, dim },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims2(x)?;
        if start + width > cols {
            return Err(NumericsError::Index {
                index: start + width,
                bound: cols,
            });
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xs[r * cols + start..r * cols + start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, width], data)?,
            Op::SliceCols { x, start, width, cols },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols { parts }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = self.dims2(parts[0])?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Replaces elements where `mask` is true with [`MASK_VALUE`].
    pub fn mask_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        if mask.len() != self.value(x).numel() {
            return Err(NumericsError::DataLength {
                shape: self.shape(x).to_vec(),
                len: mask.len(),
            });
        }
        let fill = T::from_f64(MASK_VALUE);
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::MaskFill { x, mask: mask.to_vec() },
            rg,
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let scale: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&scale)
            .map(|(&v, &s)| v * s)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let value = Tensor::new(shape, data).expect("same shape");
        self.push(value, Op::Dropout { x, scale }, rg)
    }

    /// Token-level cross-entropy of `logits[T×V]` against `targets[T]`.
    ///
    /// Positions whose target equals `pad_id` are excluded. With
    /// `smoothing > 0` the target distribution is `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        pad_id: u32,
        reduction: Reduction,
        smoothing: f64,
    ) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims2(logits)?;
        if targets.len() != rows {
            return Err(NumericsError::DataLength {
                shape: self.shape(logits).to_vec(),
                len: targets.len(),
            });
        }
        let mut tg = Vec::with_capacity(rows);
        for &t in targets {
            if t == pad_id {
                tg.push(None);
            } else if (t as usize) >= cols {
                return Err(NumericsError::Index {
                    index: t as usize,
                    bound: cols,
                });
            } else {
                tg.push(Some(t as usize));
            }
        }
        let supervised = tg.iter().filter(|t| t.is_some()).count();
        if supervised == 0 {
            return Err(NumericsError::NoSupervisedPositions);
        }
        let weight = match reduction {
            Reduction::Mean => T::one() / T::from_f64(supervised as f64),
            Reduction::Sum => T::one(),
        };
        let eps = T::from_f64(smoothing);
        let uniform = eps / T::from_f64(cols as f64);
        let logp = kernels::log_softmax_rows(self.value(logits).data(), rows, cols);
        let mut loss = T::zero();
        for (r, t) in tg.iter().enumerate() {
            if let Some(t) = *t {
                let row = &logp[r * cols..(r + 1) * cols];
                let mut l = -(T::one() - eps) * row[t];
                if smoothing > 0.0 {
                    l -= uniform * row.iter().copied().sum::<T>();
                }
                loss += l;
            }
        }
        let rg = self.rg(logits);
        let probs = if rg {
            logp.iter().map(|v| v.exp()).collect()
        } else {
            Vec::new()
        };
        Ok(self.push(
            Tensor::scalar(loss * weight),
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                cols,
                weight,
                smoothing: eps,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::AlreadyBackpropagated);
        }
        if self.value(root).numel() != 1 {
            return Err(NumericsError::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, &mut grads, node, &g);
        }
        // keep only leaf gradients
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `target.grad` (zeros if none flowed).
    pub fn write_grad(&self, v: Var, target: &mut Tensor<T>) -> Result<(), NumericsError> {
        let g = match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); target.numel()],
        };
        target.set_grad(g)
    }
}

fn acc_slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn propagate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(ga) = acc_slot(nodes, grads, *a) {
                let bv = val(*b);
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] += kernels::dot(g_row, &bv[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(gb) = acc_slot(nodes, grads, *b) {
                kernels::accumulate_tn(gb, val(*a), g, m, k, n);
            }
        }
        Op::MatMulNt { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(ga) = acc_slot(nodes, grads, *a) {
                let bv = val(*b);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == T::zero() {
                            continue;
                        }
                        for (x, &y) in ga[i * k..(i + 1) * k].iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                            *x += gij * y;
                        }
                    }
                }
            }
            if let Some(gb) = acc_slot(nodes, grads, *b) {
                let av = val(*a);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == T::zero() {
                            continue;
                        }
                        for (x, &y) in gb[j * k..(j + 1) * k].iter_mut().zip(&av[i * k..(i + 1) * k]) {
                            *x += gij * y;
                        }
                    }
                }
            }
        }
        Op::Transpose { x, rows, cols } => {
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                add_into(gx, &kernels::transpose(g, *cols, *rows));
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = acc_slot(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc_slot(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::AddRow { x, bias, cols } => {
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = acc_slot(nodes, grads, *bias) {
                for row in g.chunks(*cols) {
                    add_into(gb, row);
                }
            }
        }
        Op::Mul { a, b } => {
            if let Some(ga) = acc_slot(nodes, grads, *a) {
                for ((x, &gv), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *x += gv * bv;
                }
            }
            if let Some(gb) = acc_slot(nodes, grads, *b) {
                for ((x, &gv), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *x += gv * av;
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d += gv * *factor;
                }
            }
        }
        Op::Relu { x } => {
            let y = node.value.data();
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = kernels::axis_strides(node.value.shape(), *axis);
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            gx[idx] += y[idx] * (g[idx] - s);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
            let cols = *cols;
            let rows = g.len() / cols;
            let gv = val(*gain);
            if let Some(gg) = acc_slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] += g[r * cols + c] * xhat[r * cols + c];
                    }
                }
            }
            if let Some(gb) = acc_slot(nodes, grads, *bias) {
                for row in g.chunks(cols) {
                    add_into(gb, row);
                }
            }
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                let n = T::from_f64(cols as f64);
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..cols {
                        let d = g[r * cols + c] * gv[c];
                        mean_d += d;
                        mean_dx += d * xhat[r * cols + c];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for c in 0..cols {
                        let d = g[r * cols + c] * gv[c];
                        gx[r * cols + c] += rstd[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
                    }
                }
            }
        }
        Op::Embedding { table, ids, dim } => {
            if let Some(gt) = acc_slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
        }
        Op::SliceCols { x, start, width, cols } => {
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                for (r, row) in g.chunks(*width).enumerate() {
                    add_into(&mut gx[r * cols + start..r * cols + start + width], row);
                }
            }
        }
        Op::ConcatCols { parts } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for &(p, w) in parts {
                if let Some(gp) = acc_slot(nodes, grads, p) {
                    for r in 0..rows {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.numel();
                if let Some(gp) = acc_slot(nodes, grads, p) {
                    add_into(gp, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                add_into(gx, g);
            }
        }
        Op::MaskFill { x, mask } => {
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                for ((d, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += gv;
                    }
                }
            }
        }
        Op::Dropout { x, scale } => {
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                for ((d, &gv), &s) in gx.iter_mut().zip(g).zip(scale) {
                    *d += gv * s;
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs, cols, weight, smoothing } => {
            let cols = *cols;
            let upstream = g[0] * *weight;
            let uniform = *smoothing / T::from_f64(cols as f64);
            if let Some(gl) = acc_slot(nodes, grads, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..cols {
                        let mut q = uniform;
                        if c == t {
                            q += T::one() - *smoothing;
                        }
                        gl[r * cols + c] += upstream * (probs[r * cols + c] - q);
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = acc_slot(nodes, grads, *x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}
