use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "hadamard",
            BinKind::Div => "div",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    SoftmaxRows(Var),
    L2NormRows(Var),
    Sum(Var),
    SumRows(Var),
    FrobeniusSq(Var),
    Reshape(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaxPoolRows { src: Var, argmax: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. A graph belongs to a single forward pass
/// and is dropped after its gradients have been read.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not reach
    /// the loss through differentiable inputs.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
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

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(strip(t), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(strip(t), Op::Leaf, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, k) = shape2(self.value(a));
        let (k2, c) = shape2(self.value(b));
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: vec![r, k],
                rhs: vec![k2, c],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, data), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = shape2(self.value(a));
        let data = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(a);
        self.push(Tensor::matrix(c, r, data), Op::Transpose(a), rg)
    }

    fn broadcast_kind(&self, kind: BinKind, a: Var, b: Var) -> Result<Broadcast, TensorError> {
        let (ra, ca) = shape2(self.value(a));
        let (rb, cb) = shape2(self.value(b));
        match (rb, cb) {
            _ if (rb, cb) == (ra, ca) => Ok(Broadcast::Same),
            (1, 1) => Ok(Broadcast::Scalar),
            (1, c) if c == ca => Ok(Broadcast::Row),
            (r, 1) if r == ra => Ok(Broadcast::Col),
            _ => Err(TensorError::Dimension {
                op: kind.name(),
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            }),
        }
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let bcast = self.broadcast_kind(kind, a, b)?;
        let (r, c) = shape2(self.value(a));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let x = av[i * c + j];
                let y = bv[b_index(bcast, i, j, c)];
                out[i * c + j] = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                };
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, out), Op::Binary { kind, a, b, bcast }, rg))
    }

    /// `a + b`, where `b` is same-shape, a `1×c` row, an `r×1` column or `1×1`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    /// Element-wise product with the same broadcasting rules as [`Graph::add`].
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * k).collect();
        let (r, c) = shape2(t);
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data), Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v + k).collect();
        let (r, c) = shape2(t);
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data), Op::AddScalar(a), rg)
    }

    /// `k - a`.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, k)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let (r, c) = shape2(t);
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data), op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid_scalar)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = shape2(t);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, out), Op::SoftmaxRows(a), rg)
    }

    /// Euclidean norm of each row, as an `r×1` column.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, _) = shape2(t);
        let c = t.cols();
        let data = t
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, 1, data), Op::L2NormRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum of each row, as an `r×1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = shape2(t);
        let data = t.data().chunks(c).map(|row| row.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, 1, data), Op::SumRows(a), rg)
    }

    /// Squared Frobenius norm, as a `1×1` scalar.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).frobenius_sq();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::FrobeniusSq(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if rows * cols != t.len() || rows == 0 || cols == 0 {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let data = t.data().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::Reshape(a), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = shape2(t);
        if start >= end || end > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                detail: format!("range {start}..{end} out of {c} columns"),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, w, data), Op::SliceCols { src: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let r = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_rows",
            detail: "no inputs".into(),
        })?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(TensorError::Dimension {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let r = data.len() / c;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, c, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Column-wise maximum over rows (`r×c → 1×c`). Ties go to the first row.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = shape2(t);
        let mut best = t.row(0).to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..r {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(1, c, best), Op::MaxPoolRows { src: a, argmax }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = shape2(self.value(*a));
                let c = self.value(*b).cols();
                if self.rg(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, c);
                    accumulate(grads, *a, &matmul_raw(g, &bt, r, c, k));
                }
                if self.rg(*b) {
                    let at = transpose_raw(self.value(*a).data(), r, k);
                    accumulate(grads, *b, &matmul_raw(&at, g, k, r, c));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = shape2(out);
                accumulate(grads, *a, &transpose_raw(g, r, c));
            }
            Op::Binary { kind, a, b, bcast } => {
                let (r, c) = shape2(out);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let ga: Vec<f64> = (0..r * c)
                        .map(|idx| {
                            let y = bv[b_index(*bcast, idx / c, idx % c, c)];
                            match kind {
                                BinKind::Add | BinKind::Sub => g[idx],
                                BinKind::Mul => g[idx] * y,
                                BinKind::Div => g[idx] / y,
                            }
                        })
                        .collect();
                    accumulate(grads, *a, &ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; self.value(*b).len()];
                    for idx in 0..r * c {
                        let bi = b_index(*bcast, idx / c, idx % c, c);
                        let y = bv[bi];
                        gb[bi] += match kind {
                            BinKind::Add => g[idx],
                            BinKind::Sub => -g[idx],
                            BinKind::Mul => g[idx] * av[idx],
                            BinKind::Div => -g[idx] * av[idx] / (y * y),
                        };
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|v| v * k).collect();
                accumulate(grads, *a, &ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv).collect();
                accumulate(grads, *a, &ga);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; g.len()];
                for ((grow, srow), garow) in g
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(ga.chunks_mut(c))
                {
                    let dot: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                    for ((o, gv), s) in garow.iter_mut().zip(grow).zip(srow) {
                        *o = s * (gv - dot);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::L2NormRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = vec![0.0; x.len()];
                for (i, (xrow, garow)) in x.data().chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                    let norm = out.data()[i];
                    if norm == 0.0 {
                        continue;
                    }
                    for (o, xv) in garow.iter_mut().zip(xrow) {
                        *o = g[i] * xv / norm;
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let ga: Vec<f64> = (0..x.len()).map(|idx| g[idx / c]).collect();
                accumulate(grads, *a, &ga);
            }
            Op::FrobeniusSq(a) => {
                let ga: Vec<f64> = self.value(*a).data().iter().map(|v| 2.0 * g[0] * v).collect();
                accumulate(grads, *a, &ga);
            }
            Op::SliceCols { src, start } => {
                let s = self.value(*src);
                let (r, c) = shape2(s);
                let w = out.cols();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *src, &ga);
            }
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        accumulate(grads, p, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::MaxPoolRows { src, argmax } => {
                let s = self.value(*src);
                let c = s.cols();
                let mut ga = vec![0.0; s.len()];
                for (j, &i) in argmax.iter().enumerate() {
                    ga[i * c + j] = g[j];
                }
                accumulate(grads, *src, &ga);
            }
        }
    }
}

fn strip(t: &Tensor) -> Tensor {
    Tensor::matrix(t.rows(), t.cols(), t.data().to_vec())
}

fn b_index(bcast: Broadcast, i: usize, j: usize, c: usize) -> usize {
    match bcast {
        Broadcast::Same => i * c + j,
        Broadcast::Row => j,
        Broadcast::Col => i,
        Broadcast::Scalar => 0,
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// In-place stabilized softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
