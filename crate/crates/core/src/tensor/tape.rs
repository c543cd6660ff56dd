//! Linear tape of operation records. Each forward call appends a node; the
//! backward pass walks the nodes in reverse and accumulates adjoints.

use std::collections::HashMap;

use super::{layer_norm_parts, masked_softmax_rows, matmul, shape_err, Rng, Tensor, TensorError};

#[cfg(test)]
thread_local! {
    /// Mutation hook for the gradient checker's own tests.
    pub(crate) static BREAK_SOFTMAX_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Rounds every value through `f32`, as a checkpoint round trip would.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamStore) -> ParamGrads {
        ParamGrads {
            grads: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MeanRows { x: usize, rows: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, idx: Vec<usize> },
    Reshape(usize),
    Sum(usize),
    SquaredError { pred: usize, target: Vec<f64>, scale: f64 },
    BceLogits { logits: usize, target: Vec<f64>, scale: f64 },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation. Parameters are borrowed, never copied.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Tape<'p> {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn val(&self, i: usize) -> &Tensor {
        self.value(Var(i))
    }

    fn push(&mut self, t: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() || x.cols() != y.cols() {
            return Err(shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, TensorError> {
        let out = matmul(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let x = self.value(a);
        let data = x.data().iter().zip(self.value(b).data()).map(|(p, q)| p + q).collect();
        let out = Tensor::matrix(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a `[1×c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (x, r) = (self.value(a), self.value(row));
        if r.len() != x.cols() {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", x.shape(), r.shape())));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r.data()[i % c])
            .collect();
        let out = Tensor::matrix(x.rows(), c, data)?;
        Ok(self.push(out, Op::AddRow(a.0, row.0), &[a.0, row.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let x = self.value(a);
        let data = x.data().iter().zip(self.value(b).data()).map(|(p, q)| p * q).collect();
        let out = Tensor::matrix(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: vec![x.rows(), x.cols()],
            data: x.data().iter().map(|v| v * s).collect(),
        };
        self.push(out, Op::Scale(a.0, s), &[a.0])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: vec![x.rows(), x.cols()],
            data: x.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(out, op, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a.0, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let out = masked_softmax_rows(self.value(a), mask)?;
        Ok(self.push(out, Op::Softmax(a.0), &[a.0]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (out, xhat, inv_std) = layer_norm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. Identity when
    /// `rng` is `None` or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var, TensorError> {
        let Some(rng) = rng else { return Ok(a) };
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(Tensor::matrix(r, c, mask)?);
        self.mul(a, m)
    }

    /// Mean over the listed rows, as a `[1×c]` row.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let c = t.cols();
        if rows.is_empty() || rows.iter().any(|&r| r >= t.rows()) {
            return Err(shape_err("mean_rows", format!("rows {rows:?} of {:?}", t.shape())));
        }
        let mut out = vec![0.0; c];
        for &r in rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let n = rows.len() as f64;
        for o in &mut out {
            *o /= n;
        }
        let out = Tensor::matrix(1, c, out)?;
        Ok(self.push(out, Op::MeanRows { x: x.0, rows: rows.to_vec() }, &[x.0]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, out)?;
        Ok(self.push(out, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if idx.iter().any(|&i| i >= t.rows()) {
            return Err(shape_err("gather_rows", format!("index out of {} rows", t.rows())));
        }
        let mut out = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), t.cols(), out)?;
        Ok(self.push(out, Op::GatherRows { x: x.0, idx: idx.to_vec() }, &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let out = Tensor::matrix(rows, cols, t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(x.0), &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// `scale · Σ (pred − target)²`.
    pub fn squared_error(&mut self, pred: Var, target: &[f64], scale: f64) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(shape_err("squared_error", format!("{} predictions, {} targets", p.len(), target.len())));
        }
        let s: f64 = p.data().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(self.push(
            Tensor::scalar(scale * s),
            Op::SquaredError { pred: pred.0, target: target.to_vec(), scale },
            &[pred.0],
        ))
    }

    /// `scale · Σ BCE(σ(logit), target)` in the overflow-free form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64], scale: f64) -> Result<Var, TensorError> {
        let p = self.value(logits);
        if p.len() != target.len() {
            return Err(shape_err("bce_with_logits", format!("{} logits, {} targets", p.len(), target.len())));
        }
        let s: f64 = p.data().iter().zip(target).map(|(&x, &y)| bce_logit(x, y)).sum();
        Ok(self.push(
            Tensor::scalar(scale * s),
            Op::BceLogits { logits: logits.0, target: target.to_vec(), scale },
            &[logits.0],
        ))
    }

    /// Reverse pass from a `[1×1]` output.
    pub fn backward(&self, output: Var) -> Result<Gradients, TensorError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            let y = self.val(i);
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.val(a), self.val(b));
                    let gy = Tensor::matrix(y.rows(), y.cols(), g.clone())?;
                    if self.nodes[a].needs_grad {
                        // C = op(A)op(B): dA = dC·op(B)ᵀ, or its transpose when A is transposed.
                        let da = if ta {
                            matmul(bv, tb, &gy, true)?
                        } else {
                            matmul(&gy, false, bv, !tb)?
                        };
                        accumulate(&mut grads, a, da.data());
                    }
                    if self.nodes[b].needs_grad {
                        let db = if tb {
                            matmul(&gy, true, av, ta)?
                        } else {
                            matmul(av, !ta, &gy, false)?
                        };
                        accumulate(&mut grads, b, db.data());
                    }
                }
                &Op::Add(a, b) => {
                    accumulate(&mut grads, a, &g);
                    accumulate(&mut grads, b, &g);
                }
                &Op::AddRow(a, row) => {
                    accumulate(&mut grads, a, &g);
                    if self.nodes[row].needs_grad {
                        let c = y.cols();
                        let mut gr = vec![0.0; c];
                        for (k, v) in g.iter().enumerate() {
                            gr[k % c] += v;
                        }
                        accumulate(&mut grads, row, &gr);
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (self.val(a).data(), self.val(b).data());
                    if self.nodes[a].needs_grad {
                        let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, a, &ga);
                    }
                    if self.nodes[b].needs_grad {
                        let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, b, &gb);
                    }
                }
                &Op::Scale(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, a, &ga);
                }
                &Op::Relu(a) => {
                    let x = self.val(a).data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect();
                    accumulate(&mut grads, a, &ga);
                }
                &Op::LeakyRelu(a, slope) => {
                    let x = self.val(a).data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(d, &v)| if v > 0.0 { *d } else { slope * d }).collect();
                    accumulate(&mut grads, a, &ga);
                }
                &Op::Tanh(a) => {
                    let ga: Vec<f64> = g.iter().zip(y.data()).map(|(d, t)| d * (1.0 - t * t)).collect();
                    accumulate(&mut grads, a, &ga);
                }
                &Op::Sigmoid(a) => {
                    let ga: Vec<f64> = g.iter().zip(y.data()).map(|(d, s)| d * s * (1.0 - s)).collect();
                    accumulate(&mut grads, a, &ga);
                }
                &Op::Softmax(a) => {
                    let (r, c) = (y.rows(), y.cols());
                    let yd = y.data();
                    let mut ga = vec![0.0; r * c];
                    for row in 0..r {
                        let ys = &yd[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        #[cfg(test)]
                        let dot = if BREAK_SOFTMAX_BACKWARD.with(|b| b.get()) { 0.0 } else { dot };
                        for j in 0..c {
                            ga[row * c + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (r, d) = (y.rows(), y.cols());
                    let gam = self.val(*gamma).data();
                    if self.nodes[*x].needs_grad {
                        let mut gx = vec![0.0; r * d];
                        for row in 0..r {
                            let gs = &g[row * d..(row + 1) * d];
                            let hs = &xhat[row * d..(row + 1) * d];
                            let dh: Vec<f64> = gs.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hs).map(|(a, b)| a * b).sum();
                            let k = inv_std[row] / d as f64;
                            for j in 0..d {
                                gx[row * d + j] = k * (d as f64 * dh[j] - sum_dh - hs[j] * sum_dh_h);
                            }
                        }
                        accumulate(&mut grads, *x, &gx);
                    }
                    if self.nodes[*gamma].needs_grad {
                        let mut gg = vec![0.0; d];
                        for (k, v) in g.iter().enumerate() {
                            gg[k % d] += v * xhat[k];
                        }
                        accumulate(&mut grads, *gamma, &gg);
                    }
                    if self.nodes[*beta].needs_grad {
                        let mut gb = vec![0.0; d];
                        for (k, v) in g.iter().enumerate() {
                            gb[k % d] += v;
                        }
                        accumulate(&mut grads, *beta, &gb);
                    }
                }
                Op::MeanRows { x, rows } => {
                    let t = self.val(*x);
                    let c = t.cols();
                    let mut gx = vec![0.0; t.len()];
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for j in 0..c {
                            gx[r * c + j] += g[j] * inv;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                &Op::SliceCols { x, start } => {
                    let t = self.val(x);
                    let (c, len) = (t.cols(), y.cols());
                    let mut gx = vec![0.0; t.len()];
                    for row in 0..t.rows() {
                        gx[row * c + start..row * c + start + len].copy_from_slice(&g[row * len..(row + 1) * len]);
                    }
                    accumulate(&mut grads, x, &gx);
                }
                Op::ConcatCols(parts) => {
                    let (r, c) = (y.rows(), y.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.val(p).cols();
                        if self.nodes[p].needs_grad {
                            let mut gp = Vec::with_capacity(r * pc);
                            for row in 0..r {
                                gp.extend_from_slice(&g[row * c + offset..row * c + offset + pc]);
                            }
                            accumulate(&mut grads, p, &gp);
                        }
                        offset += pc;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let t = self.val(*x);
                    let c = t.cols();
                    let mut gx = vec![0.0; t.len()];
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[k * c + j];
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                &Op::Reshape(x) => accumulate(&mut grads, x, &g),
                &Op::Sum(x) => {
                    let gx = vec![g[0]; self.val(x).len()];
                    accumulate(&mut grads, x, &gx);
                }
                Op::SquaredError { pred, target, scale } => {
                    let p = self.val(*pred).data();
                    let gx: Vec<f64> = p.iter().zip(target).map(|(a, b)| 2.0 * scale * (a - b) * g[0]).collect();
                    accumulate(&mut grads, *pred, &gx);
                }
                Op::BceLogits { logits, target, scale } => {
                    let p = self.val(*logits).data();
                    let gx: Vec<f64> = p.iter().zip(target).map(|(&x, &t)| scale * (sigmoid(x) - t) * g[0]).collect();
                    accumulate(&mut grads, *logits, &gx);
                }
            }
            grads[i] = Some(g);
        }

        let mut params = ParamGrads::zeros_like(self.params);
        for (&id, v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                params.grads[id.0].copy_from_slice(g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x,0) − x·y + ln(1 + e^{−|x|})`.
pub(crate) fn bce_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// Adjoints from one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to an intermediate value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}
