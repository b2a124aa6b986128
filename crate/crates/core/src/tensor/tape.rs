use super::kernels::{axis_extents, gemm, swap_axes, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum MatMulMode {
    /// `[.., k] x [k, n]`: leading dims of the left operand are flattened.
    Flat { rows: usize, k: usize, n: usize },
    /// Equal leading dims on both sides, one product per batch entry.
    Batched {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, mode: MatMulMode },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Silu { a: usize },
    Transpose { a: usize, d0: usize, d1: usize },
    Reshape { a: usize },
    Slice { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Mean { a: usize },
    Sum { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Mse { target: usize, pred: usize },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Embedding { table: usize, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in execution order so that gradients can be
/// replayed in exact reverse order.
///
/// A tape supports one backward pass; build a fresh tape for every step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// True when `suffix` equals the trailing dims of `shape`.
fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
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

    /// Registers an input tensor; its `requires_grad` flag decides whether a
    /// gradient is produced for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Takes the leaf tensor (with its gradient) out of the tape.
    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "{name} produced a non-finite value (tape position {})",
                self.nodes.len()
            )));
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        // Nothing upstream wants a gradient: keep the value, drop the record.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::dim("matmul", &sa, &sb));
            }
            let n = sb[1];
            let rows = self.value(a).numel() / k;
            let mut out = vec![0.0; rows * n];
            gemm(
                View::new(self.value(a).data(), rows, k),
                View::new(self.value(b).data(), k, n),
                &mut out,
                0.0,
            );
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            let value = Tensor::new(&shape, out)?;
            let mode = MatMulMode::Flat { rows, k, n };
            return self.push("matmul", value, Op::MatMul { a: a.0, b: b.0, mode }, &[a.0, b.0]);
        }
        let r = sa.len();
        if sb.len() != r || sa[..r - 2] != sb[..r - 2] || sb[r - 2] != k {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let m = sa[r - 2];
        let n = sb[r - 1];
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..batch {
                gemm(
                    View::new(&da[i * m * k..(i + 1) * m * k], m, k),
                    View::new(&db[i * k * n..(i + 1) * k * n], k, n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = sa[..r - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(&shape, out)?;
        let mode = MatMulMode::Batched { batch, m, k, n };
        self.push("matmul", value, Op::MatMul { a: a.0, b: b.0, mode }, &[a.0, b.0])
    }

    /// Elementwise sum. `b` may also match only the trailing dims of `a`, in
    /// which case it is repeated over the leading ones (bias addition).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::dim("add", sa, sb));
        }
        let bd = self.value(b).data();
        let chunk = bd.len();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(chunk) {
            for (o, x) in row.iter_mut().zip(bd) {
                *o += x;
            }
        }
        let value = Tensor::new(self.shape(a), out)?;
        self.push("add", value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Elementwise product, with the same trailing-dim broadcast as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::dim("mul", sa, sb));
        }
        let bd = self.value(b).data();
        let chunk = bd.len();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(chunk) {
            for (o, x) in row.iter_mut().zip(bd) {
                *o *= x;
            }
        }
        let value = Tensor::new(self.shape(a), out)?;
        self.push("mul", value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.shape(a), out)?;
        self.push("scale", value, Op::Scale { a: a.0, factor }, &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        self.push("silu", value, Op::Silu { a: a.0 }, &[a.0])
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(Error::Contract(format!(
                "transpose axes ({d0}, {d1}) invalid for shape {shape:?}"
            )));
        }
        let out = swap_axes(self.value(a).data(), &shape, d0, d1);
        let mut out_shape = shape;
        out_shape.swap(d0, d1);
        let value = Tensor::new(&out_shape, out)?;
        self.push("transpose", value, Op::Transpose { a: a.0, d0, d1 }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?.with_requires_grad(false);
        self.push("reshape", value, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{end} on axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let width = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let value = Tensor::new(&out_shape, out)?;
        self.push("slice", value, Op::Slice { a: a.0, axis, start }, &[a.0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} invalid for shape {base_shape:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let d = self.value(*p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let value = Tensor::new(&out_shape, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", value, Op::Concat { parts: idx.clone(), axis }, &idx)
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).data();
        let value = Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64);
        self.push("mean", value, Op::Mean { a: a.0 }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", value, Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push("softmax", value, Op::Softmax { a: a.0, axis }, &[a.0])
    }

    /// Normalises each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            rstd,
        };
        self.push("layer_norm", value, op, &[x.0, gamma.0, beta.0])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, target: Var, pred: Var) -> Result<Var> {
        let (st, sp) = (self.shape(target), self.shape(pred));
        if st != sp {
            return Err(Error::dim("reconstruction_loss", st, sp));
        }
        let t = self.value(target).data();
        let p = self.value(pred).data();
        let total: f64 = t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(total / t.len() as f64);
        let op = Op::Mse {
            target: target.0,
            pred: pred.0,
        };
        self.push("reconstruction_loss", value, op, &[target.0, pred.0])
    }

    /// Mean next-token cross-entropy of `logits[.., V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape
            .last()
            .ok_or_else(|| Error::Contract("cross_entropy on a scalar".into()))?;
        let src = self.value(logits).data();
        let rows = src.len() / v;
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Vocabulary { id: t, vocab: v });
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - row[t];
            for j in 0..v {
                probs[r * v + j] = (row[j] - log_z).exp();
            }
        }
        let value = Tensor::scalar(total / rows as f64);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", value, op, &[logits.0])
    }

    /// Gathers rows of `table[V, d]`, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("embedding", &shape, &[ids.len()]));
        }
        let (vocab, d) = (shape[0], shape[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, vocab });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        let op = Op::Embedding {
            table: table.0,
            ids: ids.to_vec(),
        };
        self.push("embedding", value, op, &[table.0])
    }

    /// Replays the tape in reverse from a scalar `loss`, leaving gradients on
    /// every leaf that requires one. Leaves the loss does not depend on get a
    /// zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Op::Leaf = node.op {
                if node.value.requires_grad() {
                    let n = node.value.numel();
                    node.value.set_grad(g.unwrap_or_else(|| vec![0.0; n]))?;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].needs_grad;
        let val = |j: usize| self.nodes[j].value.data();
        let mut emit = |j: usize, contrib: Vec<f64>| accumulate(grads, j, contrib);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, mode } => match *mode {
                MatMulMode::Flat { rows, k, n } => {
                    if needs(*a) {
                        let mut da = vec![0.0; rows * k];
                        gemm(View::new(g, rows, n), View::transposed(val(*b), k, n), &mut da, 0.0);
                        emit(*a, da);
                    }
                    if needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(View::transposed(val(*a), rows, k), View::new(g, rows, n), &mut db, 0.0);
                        emit(*b, db);
                    }
                }
                MatMulMode::Batched { batch, m, k, n } => {
                    if needs(*a) {
                        let bv = val(*b);
                        let mut da = vec![0.0; batch * m * k];
                        for t in 0..batch {
                            gemm(
                                View::new(&g[t * m * n..(t + 1) * m * n], m, n),
                                View::transposed(&bv[t * k * n..(t + 1) * k * n], k, n),
                                &mut da[t * m * k..(t + 1) * m * k],
                                0.0,
                            );
                        }
                        emit(*a, da);
                    }
                    if needs(*b) {
                        let av = val(*a);
                        let mut db = vec![0.0; batch * k * n];
                        for t in 0..batch {
                            gemm(
                                View::transposed(&av[t * m * k..(t + 1) * m * k], m, k),
                                View::new(&g[t * m * n..(t + 1) * m * n], m, n),
                                &mut db[t * k * n..(t + 1) * k * n],
                                0.0,
                            );
                        }
                        emit(*b, db);
                    }
                }
            },
            Op::Add { a, b } => {
                if needs(*b) {
                    let chunk = self.nodes[*b].value.numel();
                    let mut db = vec![0.0; chunk];
                    for row in g.chunks(chunk) {
                        for (o, x) in db.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    emit(*b, db);
                }
                if needs(*a) {
                    emit(*a, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let chunk = bv.len();
                if needs(*b) {
                    let mut db = vec![0.0; chunk];
                    for (grow, arow) in g.chunks(chunk).zip(av.chunks(chunk)) {
                        for ((o, gx), ax) in db.iter_mut().zip(grow).zip(arow) {
                            *o += gx * ax;
                        }
                    }
                    emit(*b, db);
                }
                if needs(*a) {
                    let mut da = g.to_vec();
                    for row in da.chunks_mut(chunk) {
                        for (o, bx) in row.iter_mut().zip(bv) {
                            *o *= bx;
                        }
                    }
                    emit(*a, da);
                }
            }
            Op::Scale { a, factor } => {
                emit(*a, g.iter().map(|x| x * factor).collect());
            }
            Op::Silu { a } => {
                let da = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gx, &x)| {
                        let s = sigmoid(x);
                        gx * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                emit(*a, da);
            }
            Op::Transpose { a, d0, d1 } => {
                emit(*a, swap_axes(g, node.value.shape(), *d0, *d1));
            }
            Op::Reshape { a } => emit(*a, g.to_vec()),
            Op::Slice { a, axis, start } => {
                let in_shape = self.nodes[*a].value.shape();
                let (outer, len, inner) = axis_extents(in_shape, *axis);
                let width = node.value.shape()[*axis];
                let mut da = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    da[dst..dst + width * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                emit(*a, da);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis];
                    if needs(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            dp.extend_from_slice(&g[src..src + len * inner]);
                        }
                        emit(p, dp);
                    }
                    offset += len;
                }
            }
            Op::Mean { a } => {
                let n = self.nodes[*a].value.numel();
                emit(*a, vec![g[0] / n as f64; n]);
            }
            Op::Sum { a } => {
                let n = self.nodes[*a].value.numel();
                emit(*a, vec![g[0]; n]);
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                emit(*a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.nodes[*gamma].value.numel();
                let gm = val(*gamma);
                if needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    emit(*gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; d];
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                    emit(*beta, db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = grow[j] * gm[j];
                            dx[r * d + j] = rs * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    emit(*x, dx);
                }
            }
            Op::Mse { target, pred } => {
                let (t, p) = (val(*target), val(*pred));
                let scale = 2.0 * g[0] / t.len() as f64;
                let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                if needs(*target) {
                    emit(*target, dp.iter().map(|x| -x).collect());
                }
                if needs(*pred) {
                    emit(*pred, dp);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * v + t] -= scale;
                }
                emit(*logits, dl);
            }
            Op::Embedding { table, ids } => {
                let shape = self.nodes[*table].value.shape();
                let d = shape[1];
                let mut dt = vec![0.0; shape[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                emit(*table, dt);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], j: usize, contrib: Vec<f64>) {
    match &mut grads[j] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}
