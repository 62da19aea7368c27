//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends one node. Nodes only refer to
//! earlier nodes, so the list order is a topological order and the backward
//! pass is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{HglError, Result};
use crate::params::{Gradients, ParamId, ParameterStore};
use crate::tensor::{self, Activation, SoftmaxMode, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScalarMul(Var, Var),
    ScaleRows(Var, Var),
    Act(Var, Activation),
    Softmax(Var, SoftmaxMode),
    LogSoftmaxRows(Var),
    Concat(Var, Var),
    Transpose(Var),
    MeanRows(Var),
    Sum(Var),
    PairwiseAdd(Var, Var),
    Reshape(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, usize),
    Diagonal(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<ParamId, Var>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HglError::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let v = |x: &Var| &nodes[x.0].value;
    Ok(match op {
        Op::Input | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => tensor::matmul(v(a), v(b))?,
        Op::Add(a, b) => {
            same_shape("add", v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape("sub", v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x * y)
        }
        Op::AddRow(a, bias) => {
            let (x, b) = (v(a), v(bias));
            if b.rows() != 1 || b.cols() != x.cols() {
                return Err(HglError::dim("add_row", x.shape(), b.shape()));
            }
            let c = x.cols();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(c) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        }
        Op::Scale(a, c) => v(a).map(|x| x * c),
        Op::ScalarMul(a, s) => {
            let s = v(s).item()?;
            v(a).map(|x| x * s)
        }
        Op::ScaleRows(a, s) => {
            let (x, s) = (v(a), v(s));
            if s.len() != x.rows() || s.cols() != 1 {
                return Err(HglError::dim("scale_rows", x.shape(), s.shape()));
            }
            let c = x.cols();
            let mut out = x.clone();
            for (row, sv) in out.data_mut().chunks_mut(c).zip(s.data()) {
                row.iter_mut().for_each(|o| *o *= sv);
            }
            out
        }
        Op::Act(a, kind) => tensor::activate(v(a), *kind),
        Op::Softmax(a, mode) => tensor::softmax(v(a), *mode)?,
        Op::LogSoftmaxRows(a) => tensor::log_softmax_rows(v(a))?,
        Op::Concat(a, b) => tensor::concat_cols(v(a), v(b))?,
        Op::Transpose(a) => tensor::transpose(v(a))?,
        Op::MeanRows(a) => tensor::mean_rows(v(a))?,
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::PairwiseAdd(a, b) => tensor::pairwise_add(v(a), v(b))?,
        Op::Reshape(a, shape) => v(a).reshape(shape)?,
        Op::GatherRows(table, idx) => {
            let t = v(table);
            let c = t.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= t.rows() {
                    return Err(HglError::Domain {
                        op: "gather_rows",
                        reason: format!("row {i} out of range for {} rows", t.rows()),
                    });
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(idx.len(), c, data)?
        }
        Op::Pick(a, i) => {
            let t = v(a);
            if *i >= t.len() {
                return Err(HglError::Domain {
                    op: "pick",
                    reason: format!("index {i} out of range for {} entries", t.len()),
                });
            }
            Tensor::scalar(t.data()[*i])
        }
        Op::Diagonal(a) => {
            let t = v(a);
            if t.shape().len() != 2 || t.rows() != t.cols() {
                return Err(HglError::dim("diagonal", t.shape(), &[t.rows(), t.rows()]));
            }
            let n = t.rows();
            Tensor::matrix(n, 1, (0..n).map(|i| t.get(i, i)).collect())?
        }
    })
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// Binds a parameter snapshot to this tape. Repeated calls for the same
    /// parameter return the same node so its gradient is accumulated once.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: store.value(id).clone(),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// The parameter a leaf node was bound from, if any.
    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the `1×1` value `s`.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::ScalarMul(a, s))
    }

    /// Scales row `r` of `a` by `s[r]`, with `s: R×1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::ScaleRows(a, s))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(a);
        }
        self.push(Op::Act(a, kind))
    }

    pub fn softmax(&mut self, a: Var, mode: SoftmaxMode) -> Result<Var> {
        self.push(Op::Softmax(a, mode))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmaxRows(a))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Concat(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn pairwise_add(&mut self, u: Var, v: Var) -> Result<Var> {
        self.push(Op::PairwiseAdd(u, v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        self.push(Op::GatherRows(table, rows.to_vec()))
    }

    /// Extracts entry `index` (row-major) as a `1×1` value.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        self.push(Op::Pick(a, index))
    }

    /// Diagonal of a square matrix as an `N×1` column.
    pub fn diagonal(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Diagonal(a))
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut replayed: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Input | Op::Param(_) => node.value.clone(),
                ref op => eval(op, &replayed)?,
            };
            replayed.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(replayed.into_iter().map(|n| n.value).collect())
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per parameter
    /// bound to this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(HglError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                op => self.propagate(op, &node.value, &g, &mut grads)?,
            }
        }

        let mut out = Gradients::default();
        for (&id, &var) in &self.bound {
            let g = grads
                .get_mut(var.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(var).shape()));
            out.by_param.insert(id, g);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |x: &Var| &self.nodes[x.0].value;
        let mut acc = |x: Var, delta: Tensor| {
            match &mut grads[x.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                acc(*a, tensor::matmul_nt(g, val(b))?);
                acc(*b, tensor::matmul_tn(val(a), g)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(g, val(b), |x, y| x * y));
                acc(*b, zip_map(g, val(a), |x, y| x * y));
            }
            Op::AddRow(a, bias) => {
                let c = g.cols();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(*a, g.clone());
                acc(*bias, Tensor::new(val(bias).shape().to_vec(), db)?);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::ScalarMul(a, s) => {
                let sv = val(s).item()?;
                let ds: f64 = g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                acc(*a, g.map(|x| x * sv));
                acc(*s, Tensor::new(val(s).shape().to_vec(), vec![ds])?);
            }
            Op::ScaleRows(a, s) => {
                let (x, sv) = (val(a), val(s));
                let c = x.cols();
                let mut da = g.clone();
                let mut ds = vec![0.0; sv.len()];
                for (r, (grow, xrow)) in g.data().chunks(c).zip(x.data().chunks(c)).enumerate() {
                    ds[r] = grow.iter().zip(xrow).map(|(p, q)| p * q).sum();
                }
                for (row, s) in da.data_mut().chunks_mut(c).zip(sv.data()) {
                    row.iter_mut().for_each(|o| *o *= s);
                }
                acc(*a, da);
                acc(*s, Tensor::new(sv.shape().to_vec(), ds)?);
            }
            Op::Act(a, kind) => {
                acc(
                    *a,
                    zip_map(g, out, |gv, y| gv * kind.derivative_from_output(y)),
                );
            }
            Op::Softmax(a, mode) => {
                let group = match mode {
                    SoftmaxMode::Global => out.len(),
                    SoftmaxMode::PerRow => out.cols(),
                };
                let mut dx = vec![0.0; out.len()];
                for ((gy, y), d) in g
                    .data()
                    .chunks(group)
                    .zip(out.data().chunks(group))
                    .zip(dx.chunks_mut(group))
                {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for ((dv, gv), yv) in d.iter_mut().zip(gy).zip(y) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*a, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut dx = vec![0.0; out.len()];
                for ((gy, y), d) in g.data().chunks(c).zip(out.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let total: f64 = gy.iter().sum();
                    for ((dv, gv), yv) in d.iter_mut().zip(gy).zip(y) {
                        *dv = gv - yv.exp() * total;
                    }
                }
                acc(*a, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (val(a).cols(), val(b).cols());
                let r = g.rows();
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::matrix(r, ca, da)?);
                acc(*b, Tensor::matrix(r, cb, db)?);
            }
            Op::Transpose(a) => acc(*a, tensor::transpose(g)?),
            Op::MeanRows(a) => {
                let x = val(a);
                let inv = 1.0 / x.rows() as f64;
                let mut d = Vec::with_capacity(x.len());
                for _ in 0..x.rows() {
                    d.extend(g.data().iter().map(|v| v * inv));
                }
                acc(*a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                acc(*a, Tensor::filled(val(a).shape(), gv));
            }
            Op::PairwiseAdd(u, v) => {
                let (p, q, c) = (val(u).rows(), val(v).rows(), val(u).cols());
                let mut du = vec![0.0; p * c];
                let mut dv = vec![0.0; q * c];
                for i in 0..p {
                    for j in 0..q {
                        let row = &g.data()[(i * q + j) * c..(i * q + j + 1) * c];
                        for k in 0..c {
                            du[i * c + k] += row[k];
                            dv[j * c + k] += row[k];
                        }
                    }
                }
                acc(*u, Tensor::matrix(p, c, du)?);
                acc(*v, Tensor::matrix(q, c, dv)?);
            }
            Op::Reshape(a, _) => acc(*a, g.reshape(val(a).shape())?),
            Op::GatherRows(table, idx) => {
                let t = val(table);
                let c = t.cols();
                let mut d = Tensor::zeros(t.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    for (o, s) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                acc(*table, d);
            }
            Op::Pick(a, i) => {
                let mut d = Tensor::zeros(val(a).shape());
                d.data_mut()[*i] = g.item()?;
                acc(*a, d);
            }
            Op::Diagonal(a) => {
                let n = val(a).rows();
                let mut d = Tensor::zeros(val(a).shape());
                for i in 0..n {
                    d.data_mut()[i * n + i] = g.data()[i];
                }
                acc(*a, d);
            }
        }
        Ok(())
    }
}
