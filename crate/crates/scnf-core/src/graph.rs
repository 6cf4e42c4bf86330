//! Tape-based reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Ctx`] records every primitive applied during a forward evaluation
//! into a [`Graph`] (values are computed eagerly). [`Graph::backward`]
//! walks the tape in reverse and accumulates parameter gradients into a
//! [`ParamStore`]. The primitive set is deliberately small — add, sub,
//! elementwise mul, matmul, exp, log, tanh, sum/mean reductions,
//! broadcast, concat, slice, reshape and gather — so that every adjoint
//! rule is individually auditable and checkable by finite differences.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_to, matmul_nn, matmul_nt, matmul_tn, reduce_broadcast, Tensor};

/// A named trainable tensor with a gradient accumulator of the same shape.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat arena of parameters. Layers hold [`ParamId`]s; a single store is
/// owned by the model, which keeps concurrent read-only inference safe and
/// training single-writer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Argument(format!("duplicate param name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.as_mut_slice().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    fn add_grad(&mut self, id: ParamId, g: &Tensor) {
        let dst = self.params[id.0].grad.as_mut_slice();
        for (d, s) in dst.iter_mut().zip(g.as_slice()) {
            *d += s;
        }
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Const,
    Param(ParamId),
    Add,
    Sub,
    Mul,
    MatMul,
    Exp,
    Log,
    Tanh,
    SumAll,
    MeanAll,
    /// (rows, cols) -> (rows,)
    SumRows,
    Broadcast(Vec<usize>),
    ConcatCols,
    SliceCols { start: usize, end: usize },
    SliceRows { start: usize, end: usize },
    Reshape(Vec<usize>),
    /// out[r, j] = in[r, idx[j]] (or out[j] = in[idx[j]] for 1-D input).
    GatherCols(Arc<Vec<usize>>),
}

#[derive(Debug, Clone)]
struct Record {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

trait Values {
    fn val(&self, i: usize) -> &Tensor;
}

impl Values for [Record] {
    fn val(&self, i: usize) -> &Tensor {
        &self[i].value
    }
}

impl Values for [Tensor] {
    fn val(&self, i: usize) -> &Tensor {
        &self[i]
    }
}

fn eval_op<V: Values + ?Sized>(op: &Op, inputs: &[usize], vals: &V) -> Result<Tensor> {
    let v = |i: usize| vals.val(inputs[i]);
    Ok(match op {
        Op::Input | Op::Const | Op::Param(_) => unreachable!("leaf ops are not re-evaluated"),
        Op::Add => zip_same("add", v(0), v(1), |a, b| a + b)?,
        Op::Sub => zip_same("sub", v(0), v(1), |a, b| a - b)?,
        Op::Mul => zip_same("mul", v(0), v(1), |a, b| a * b)?,
        Op::MatMul => {
            let (a, b) = (v(0), v(1));
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut out = Tensor::zeros(vec![m, n]);
            matmul_nn(a.as_slice(), m, k, b.as_slice(), n, out.as_mut_slice());
            out
        }
        Op::Exp => v(0).map(f64::exp),
        Op::Log => {
            let a = v(0);
            if a.as_slice().iter().any(|&x| x <= 0.0) {
                return Err(Error::Domain("log of non-positive value".into()));
            }
            a.map(f64::ln)
        }
        Op::Tanh => v(0).map(f64::tanh),
        Op::SumAll => Tensor::scalar(v(0).as_slice().iter().sum()),
        Op::MeanAll => {
            let a = v(0);
            Tensor::scalar(a.as_slice().iter().sum::<f64>() / a.len() as f64)
        }
        Op::SumRows => {
            let a = v(0);
            let c = a.cols();
            Tensor::from_vec(a.as_slice().chunks(c).map(|r| r.iter().sum()).collect())
        }
        Op::Broadcast(target) => broadcast_to(v(0), target)?,
        Op::ConcatCols => {
            let parts: Vec<&Tensor> = inputs.iter().map(|&i| vals.val(i)).collect();
            concat_cols_values(&parts)?
        }
        Op::SliceCols { start, end } => {
            let a = v(0);
            let (r, c) = (a.rows(), a.cols());
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&a.as_slice()[i * c + start..i * c + end]);
            }
            Tensor::new(vec![r, end - start], data)?
        }
        Op::SliceRows { start, end } => {
            let a = v(0);
            let c = a.cols();
            Tensor::new(vec![end - start, c], a.as_slice()[start * c..end * c].to_vec())?
        }
        Op::Reshape(shape) => v(0).reshaped(shape.clone())?,
        Op::GatherCols(idx) => gather_cols_values(v(0), idx),
    })
}

fn zip_same(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    for (o, s) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o = f(*o, *s);
    }
    Ok(out)
}

fn concat_cols_values(parts: &[&Tensor]) -> Result<Tensor> {
    let r = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            let c = p.cols();
            data.extend_from_slice(&p.as_slice()[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(vec![r, total], data)
}

fn gather_cols_values(a: &Tensor, idx: &[usize]) -> Tensor {
    if a.ndim() == 1 {
        Tensor::from_vec(idx.iter().map(|&j| a.as_slice()[j]).collect())
    } else {
        let c = a.cols();
        let mut data = Vec::with_capacity(a.rows() * idx.len());
        for i in 0..a.rows() {
            let row = &a.as_slice()[i * c..(i + 1) * c];
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Tensor::new(vec![a.rows(), idx.len()], data).expect("gather shape")
    }
}

/// Recorded forward computation: a topologically ordered list of primitive
/// records that can be replayed or differentiated.
#[derive(Debug)]
pub struct Graph {
    records: Vec<Record>,
    outputs: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn outputs(&self) -> &[Node] {
        &self.outputs
    }

    pub fn value(&self, n: Node) -> &Tensor {
        &self.records[n.0].value
    }

    /// Recompute every non-leaf record in order and return the outputs.
    /// Inputs and constants come from the recorded values; parameters are
    /// re-read from `store`.
    pub fn replay(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            let v = match &rec.op {
                Op::Input | Op::Const => rec.value.clone(),
                Op::Param(id) => store.value(*id).clone(),
                op => eval_op(op, &rec.inputs, vals.as_slice())?,
            };
            vals.push(v);
        }
        Ok(self.outputs.iter().map(|n| vals[n.0].clone()).collect())
    }

    /// Accumulate `d(seed · output)/d(param)` into every parameter gradient.
    /// Inputs and constants receive nothing. A graph can be walked once.
    pub fn backward(&mut self, output: Node, seed: &Tensor, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward on an already-consumed graph".into()));
        }
        self.consumed = true;
        let out_shape = self.records[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: seed.shape().to_vec(),
                rhs: out_shape.to_vec(),
            });
        }
        if !seed.all_finite() {
            return Err(Error::Numeric("backward: non-finite seed".into()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.records.len()];
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let rec = &self.records[i];
            match &rec.op {
                Op::Input | Op::Const => {}
                Op::Param(id) => store.add_grad(*id, &g),
                Op::Add => {
                    accum(&mut grads, rec.inputs[0], &g);
                    accum(&mut grads, rec.inputs[1], &g);
                }
                Op::Sub => {
                    accum(&mut grads, rec.inputs[0], &g);
                    accum_neg(&mut grads, rec.inputs[1], &g);
                }
                Op::Mul => {
                    let a = &self.records[rec.inputs[0]].value;
                    let b = &self.records[rec.inputs[1]].value;
                    accum_owned(&mut grads, rec.inputs[0], ew_mul(&g, b));
                    accum_owned(&mut grads, rec.inputs[1], ew_mul(&g, a));
                }
                Op::MatMul => {
                    let a = &self.records[rec.inputs[0]].value;
                    let b = &self.records[rec.inputs[1]].value;
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let n = b.shape()[1];
                    let mut da = Tensor::zeros(vec![m, k]);
                    matmul_nt(g.as_slice(), m, n, b.as_slice(), k, da.as_mut_slice());
                    let mut db = Tensor::zeros(vec![k, n]);
                    matmul_tn(a.as_slice(), m, k, g.as_slice(), n, db.as_mut_slice());
                    accum_owned(&mut grads, rec.inputs[0], da);
                    accum_owned(&mut grads, rec.inputs[1], db);
                }
                Op::Exp => accum_owned(&mut grads, rec.inputs[0], ew_mul(&g, &rec.value)),
                Op::Log => {
                    let a = &self.records[rec.inputs[0]].value;
                    let mut d = g.clone();
                    for (dv, av) in d.as_mut_slice().iter_mut().zip(a.as_slice()) {
                        *dv /= av;
                    }
                    accum_owned(&mut grads, rec.inputs[0], d);
                }
                Op::Tanh => {
                    let mut d = g.clone();
                    for (dv, yv) in d.as_mut_slice().iter_mut().zip(rec.value.as_slice()) {
                        *dv *= 1.0 - yv * yv;
                    }
                    accum_owned(&mut grads, rec.inputs[0], d);
                }
                Op::SumAll => {
                    let a_shape = self.records[rec.inputs[0]].value.shape().to_vec();
                    accum_owned(&mut grads, rec.inputs[0], Tensor::full(a_shape, g.item()));
                }
                Op::MeanAll => {
                    let a_shape = self.records[rec.inputs[0]].value.shape().to_vec();
                    let n: usize = a_shape.iter().product();
                    accum_owned(
                        &mut grads,
                        rec.inputs[0],
                        Tensor::full(a_shape, g.item() / n as f64),
                    );
                }
                Op::SumRows => {
                    let a_shape = self.records[rec.inputs[0]].value.shape().to_vec();
                    let (r, c) = (a_shape[0], a_shape[1]);
                    let mut d = Tensor::zeros(vec![r, c]);
                    for (i, row) in d.as_mut_slice().chunks_mut(c).enumerate() {
                        row.fill(g.as_slice()[i]);
                    }
                    accum_owned(&mut grads, rec.inputs[0], d);
                }
                Op::Broadcast(_) => {
                    let a_shape = self.records[rec.inputs[0]].value.shape();
                    accum_owned(&mut grads, rec.inputs[0], reduce_broadcast(&g, a_shape));
                }
                Op::ConcatCols => {
                    let r = rec.value.rows();
                    let total = rec.value.cols();
                    let mut start = 0usize;
                    for &inp in &rec.inputs {
                        let c = self.records[inp].value.cols();
                        let mut d = Tensor::zeros(vec![r, c]);
                        for i in 0..r {
                            d.as_mut_slice()[i * c..(i + 1) * c].copy_from_slice(
                                &g.as_slice()[i * total + start..i * total + start + c],
                            );
                        }
                        accum_owned(&mut grads, inp, d);
                        start += c;
                    }
                }
                Op::SliceCols { start, end } => {
                    let a_shape = self.records[rec.inputs[0]].value.shape().to_vec();
                    let (r, c) = (a_shape[0], a_shape[1]);
                    let w = end - start;
                    let mut d = Tensor::zeros(vec![r, c]);
                    for i in 0..r {
                        d.as_mut_slice()[i * c + start..i * c + end]
                            .copy_from_slice(&g.as_slice()[i * w..(i + 1) * w]);
                    }
                    accum_owned(&mut grads, rec.inputs[0], d);
                }
                Op::SliceRows { start, end } => {
                    let a_shape = self.records[rec.inputs[0]].value.shape().to_vec();
                    let c = a_shape[1];
                    let mut d = Tensor::zeros(a_shape);
                    d.as_mut_slice()[start * c..end * c].copy_from_slice(g.as_slice());
                    accum_owned(&mut grads, rec.inputs[0], d);
                }
                Op::Reshape(_) => {
                    let a_shape = self.records[rec.inputs[0]].value.shape().to_vec();
                    let d = g.reshaped(a_shape).expect("reshape adjoint");
                    accum_owned(&mut grads, rec.inputs[0], d);
                }
                Op::GatherCols(idx) => {
                    let a = &self.records[rec.inputs[0]].value;
                    let mut d = Tensor::zeros(a.shape().to_vec());
                    if a.ndim() == 1 {
                        for (j, &src) in idx.iter().enumerate() {
                            d.as_mut_slice()[src] += g.as_slice()[j];
                        }
                    } else {
                        let c = a.cols();
                        let w = idx.len();
                        for i in 0..a.rows() {
                            let grow = &g.as_slice()[i * w..(i + 1) * w];
                            let drow = &mut d.as_mut_slice()[i * c..(i + 1) * c];
                            for (j, &src) in idx.iter().enumerate() {
                                drow[src] += grow[j];
                            }
                        }
                    }
                    accum_owned(&mut grads, rec.inputs[0], d);
                }
            }
        }
        Ok(())
    }
}

fn accum(grads: &mut [Option<Tensor>], i: usize, g: &Tensor) {
    match &mut grads[i] {
        Some(t) => {
            for (d, s) in t.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *d += s;
            }
        }
        slot => *slot = Some(g.clone()),
    }
}

fn accum_neg(grads: &mut [Option<Tensor>], i: usize, g: &Tensor) {
    match &mut grads[i] {
        Some(t) => {
            for (d, s) in t.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *d -= s;
            }
        }
        slot => *slot = Some(g.map(|v| -v)),
    }
}

fn accum_owned(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(t) => {
            for (d, s) in t.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *d += s;
            }
        }
        slot => *slot = Some(g),
    }
}

fn ew_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, s) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o *= s;
    }
    out
}

/// Recording context for one forward evaluation.
pub struct Ctx<'s> {
    pub store: &'s ParamStore,
    records: Vec<Record>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Ctx {
            store,
            records: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Node {
        self.records.push(Record { op, inputs, value });
        Node(self.records.len() - 1)
    }

    fn apply(&mut self, op: Op, inputs: Vec<usize>) -> Result<Node> {
        let value = eval_op(&op, &inputs, self.records.as_slice())?;
        Ok(self.push(op, inputs, value))
    }

    pub fn input(&mut self, t: Tensor) -> Node {
        self.push(Op::Input, vec![], t)
    }

    pub fn constant(&mut self, t: Tensor) -> Node {
        self.push(Op::Const, vec![], t)
    }

    pub fn scalar(&mut self, v: f64) -> Node {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, id: ParamId) -> Node {
        let v = self.store.value(id).clone();
        self.push(Op::Param(id), vec![], v)
    }

    pub fn value(&self, n: Node) -> &Tensor {
        &self.records[n.0].value
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.apply(Op::Add, vec![a.0, b.0])
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.apply(Op::Sub, vec![a.0, b.0])
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.apply(Op::Mul, vec![a.0, b.0])
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        self.apply(Op::MatMul, vec![a.0, b.0])
    }

    pub fn exp(&mut self, a: Node) -> Node {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a.0], v)
    }

    pub fn log(&mut self, a: Node) -> Result<Node> {
        self.apply(Op::Log, vec![a.0])
    }

    pub fn tanh(&mut self, a: Node) -> Node {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh, vec![a.0], v)
    }

    pub fn sum_all(&mut self, a: Node) -> Node {
        let v = Tensor::scalar(self.value(a).as_slice().iter().sum());
        self.push(Op::SumAll, vec![a.0], v)
    }

    pub fn mean_all(&mut self, a: Node) -> Node {
        let t = self.value(a);
        let v = Tensor::scalar(t.as_slice().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::MeanAll, vec![a.0], v)
    }

    /// Sum a (rows, cols) node along its last axis into (rows,).
    pub fn sum_rows(&mut self, a: Node) -> Result<Node> {
        if self.value(a).ndim() != 2 {
            return Err(Error::Argument(format!(
                "sum_rows wants a 2-D node, got shape {:?}",
                self.value(a).shape()
            )));
        }
        self.apply(Op::SumRows, vec![a.0])
    }

    pub fn broadcast(&mut self, a: Node, target: &[usize]) -> Result<Node> {
        self.apply(Op::Broadcast(target.to_vec()), vec![a.0])
    }

    pub fn concat_cols(&mut self, parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let r = self.value(parts[0]).rows();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.rows() != r {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        self.apply(Op::ConcatCols, parts.iter().map(|n| n.0).collect())
    }

    pub fn slice_cols(&mut self, a: Node, start: usize, end: usize) -> Result<Node> {
        let t = self.value(a);
        if t.ndim() != 2 || end > t.cols() || start > end {
            return Err(Error::Argument(format!(
                "slice_cols {start}..{end} out of range for shape {:?}",
                t.shape()
            )));
        }
        self.apply(Op::SliceCols { start, end }, vec![a.0])
    }

    pub fn slice_rows(&mut self, a: Node, start: usize, end: usize) -> Result<Node> {
        let t = self.value(a);
        if t.ndim() != 2 || end > t.rows() || start > end {
            return Err(Error::Argument(format!(
                "slice_rows {start}..{end} out of range for shape {:?}",
                t.shape()
            )));
        }
        self.apply(Op::SliceRows { start, end }, vec![a.0])
    }

    pub fn reshape(&mut self, a: Node, shape: &[usize]) -> Result<Node> {
        self.apply(Op::Reshape(shape.to_vec()), vec![a.0])
    }

    pub fn gather_cols(&mut self, a: Node, idx: Arc<Vec<usize>>) -> Result<Node> {
        let c = self.value(a).cols();
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Argument(format!(
                "gather index {bad} out of range for {c} columns"
            )));
        }
        self.apply(Op::GatherCols(idx), vec![a.0])
    }

    // --- composites built from the primitives above ---

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: Node, c: f64) -> Result<Node> {
        let shape = self.value(a).shape().to_vec();
        let k = self.scalar(c);
        let k = self.broadcast(k, &shape)?;
        self.mul(a, k)
    }

    /// Add a scalar constant.
    pub fn add_scalar(&mut self, a: Node, c: f64) -> Result<Node> {
        let shape = self.value(a).shape().to_vec();
        let k = self.scalar(c);
        let k = self.broadcast(k, &shape)?;
        self.add(a, k)
    }

    /// Transpose a 2-D node (reshape + gather + reshape).
    pub fn transpose2(&mut self, a: Node) -> Result<Node> {
        let (r, c) = {
            let t = self.value(a);
            (t.rows(), t.cols())
        };
        let flat = self.reshape(a, &[1, r * c])?;
        let mut idx = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                idx.push(i * c + j);
            }
        }
        let g = self.gather_cols(flat, Arc::new(idx))?;
        self.reshape(g, &[c, r])
    }

    /// Add a (cols,) bias row to every row of a (rows, cols) node.
    pub fn add_row(&mut self, a: Node, bias: Node) -> Result<Node> {
        let (r, c) = {
            let t = self.value(a);
            (t.rows(), t.cols())
        };
        let b2 = self.reshape(bias, &[1, c])?;
        let b2 = self.broadcast(b2, &[r, c])?;
        self.add(a, b2)
    }

    /// Finish recording. The given nodes become the graph outputs.
    pub fn finish(self, outputs: Vec<Node>) -> Graph {
        Graph {
            records: self.records,
            outputs,
            consumed: false,
        }
    }
}

/// Evaluate `build` over `inputs`, recording the computation. Returns the
/// output values together with the replayable graph.
pub fn forward_eval<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    build: F,
) -> Result<(Vec<Tensor>, Graph)>
where
    F: FnOnce(&mut Ctx, &[Node]) -> Result<Vec<Node>>,
{
    for (i, t) in inputs.iter().enumerate() {
        if !t.all_finite() {
            return Err(Error::Numeric(format!("forward_eval: input {i} not finite")));
        }
    }
    let mut ctx = Ctx::new(store);
    let nodes: Vec<Node> = inputs.iter().map(|t| ctx.input(t.clone())).collect();
    let outs = build(&mut ctx, &nodes)?;
    let values = outs.iter().map(|&n| ctx.value(n).clone()).collect();
    Ok((values, ctx.finish(outs)))
}

/// Max relative error between tape gradients and central differences over
/// every entry of every parameter in the store:
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Ctx) -> Result<Node>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!(
            "gradcheck eps {eps} outside [1e-7, 1e-3]"
        )));
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::new(store);
        let out = f(&mut ctx)?;
        let v = ctx.value(out);
        if v.len() != 1 {
            return Err(Error::Argument("gradcheck: fn must be scalar-valued".into()));
        }
        let x = v.item();
        if !x.is_finite() {
            return Err(Error::Domain("gradcheck: non-finite fn value".into()));
        }
        Ok(x)
    };

    // Analytic pass.
    store.zero_grads();
    let (out, mut graph) = {
        let mut ctx = Ctx::new(store);
        let out = f(&mut ctx)?;
        if ctx.value(out).len() != 1 {
            return Err(Error::Argument("gradcheck: fn must be scalar-valued".into()));
        }
        if !ctx.value(out).item().is_finite() {
            return Err(Error::Domain("gradcheck: non-finite fn value".into()));
        }
        (out, ctx.finish(vec![out]))
    };
    graph.backward(out, &Tensor::scalar(1.0), store)?;

    // Central differences.
    let ids: Vec<ParamId> = store.ids().collect();
    let mut max_err = 0.0f64;
    for id in ids {
        let n = store.value(id).len();
        for j in 0..n {
            let orig = store.value(id).as_slice()[j];
            store.value_mut(id).as_mut_slice()[j] = orig + eps;
            let fp = eval(store)?;
            store.value_mut(id).as_mut_slice()[j] = orig - eps;
            let fm = eval(store)?;
            store.value_mut(id).as_mut_slice()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = store.grad(id).as_slice()[j];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
