//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Every forward call appends one node holding its value; `backward` walks the
//! record in reverse and applies each primitive's adjoint rule. Shapes are
//! treated as 2-D views (`rows × cols`) except where an op says otherwise.
//! Shape mismatches are programming errors and panic.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use super::{NumericsError, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse node-mixing operator: `out[i] = Σ w · in[j]` within each block of `n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MixMatrix {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl MixMatrix {
    /// Collects the nonzero entries of a dense `n × n` matrix.
    pub fn from_dense(m: &Tensor) -> Self {
        let n = m.rows();
        assert_eq!(n, m.cols(), "mix matrix must be square");
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = m.at(i, j);
                if w != 0.0 {
                    entries.push((i, j, w));
                }
            }
        }
        MixMatrix { n, entries }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], out: &mut [f64], cols: usize, transpose: bool) {
        let block = self.n * cols;
        for (xb, ob) in x.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
            for &(i, j, w) in &self.entries {
                let (dst, src) = if transpose { (j, i) } else { (i, j) };
                let s = &xb[src * cols..(src + 1) * cols];
                let d = &mut ob[dst * cols..(dst + 1) * cols];
                for (o, &v) in d.iter_mut().zip(s) {
                    *o += w * v;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize),
    Sum(Var),
    Pick(Var, Arc<Vec<usize>>),
    GatherRows(Var, Arc<Vec<usize>>),
    NodeMix(Var, Arc<MixMatrix>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Pow(..) => "pow",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Sum(..) => "sum",
            Op::Pick(..) => "pick",
            Op::GatherRows(..) => "gather_rows",
            Op::NodeMix(..) => "node_mix",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Variables bound to the named entries of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Bindings restricted to names starting with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Bindings {
        Bindings {
            vars: self
                .vars
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for `var`, zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }

    /// Per-parameter gradients for every bound name.
    pub fn for_params(&self, bindings: &Bindings) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in bindings.iter() {
            out.insert(name.clone(), self.wrt(v));
        }
        out
    }
}

/// Record of primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Adds every parameter of `store` as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore) -> Bindings {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            vars.insert(name.clone(), self.leaf(t.clone()));
        }
        Bindings { vars }
    }

    /// Adds every parameter of `store` as a constant (frozen weights).
    pub fn bind_frozen(&mut self, store: &ParamStore) -> Bindings {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            vars.insert(name.clone(), self.constant(t.clone()));
        }
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul: {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        matmul_nn(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{}: shape mismatch", op.name());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `b` (length `cols`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        assert_eq!(bv.len(), c, "add_row: bias length {} vs {c} columns", bv.len());
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (o, &v) in row.iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, b]);
        self.push(value, Op::AddRow(x, b), rg)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Pow(x, p), |v| v.powf(p))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows: column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= c && len > 0, "slice_cols out of range");
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::matrix(xv.rows(), len, data);
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceCols(x, start, len), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= xv.rows() && len > 0, "slice_rows out of range");
        let value = Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceRows(x, start), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Selects `x[i, index[i]]` from every row, giving a vector of length `rows`.
    pub fn pick(&mut self, x: Var, index: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        assert_eq!(index.len(), xv.rows(), "pick: one index per row");
        let data = index.iter().enumerate().map(|(r, &k)| xv.at(r, k)).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(data), Op::Pick(x, index), rg)
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &r in index.iter() {
            data.extend_from_slice(xv.row(r));
        }
        let value = Tensor::matrix(index.len(), c, data);
        let rg = self.rg(&[x]);
        self.push(value, Op::GatherRows(x, index), rg)
    }

    /// Applies `mix` along blocks of `mix.size()` consecutive rows.
    pub fn node_mix(&mut self, x: Var, mix: Arc<MixMatrix>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows() % mix.size(), 0, "node_mix: rows not a multiple of node count");
        let mut out = vec![0.0; xv.len()];
        mix.apply(xv.data(), &mut out, xv.cols(), false);
        let value = Tensor::new(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(value, Op::NodeMix(x, mix), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericsError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        if let Some(idx) = (0..=output.0).find(|&i| !self.nodes[i].value.is_finite()) {
            return Err(NumericsError::NumericalFailure { node: idx, op: self.nodes[idx].op.name() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0]));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                let op = self.nodes[idx].op.name();
                return Err(NumericsError::NumericalFailure { node: idx, op });
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        let emap = |x: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            // f(input, output, upstream)
            let xv = self.value(x);
            let data = xv
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&a, &b), &c)| f(a, b, c))
                .collect();
            like(x, data)
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt(g.data(), bv.data(), &mut ga, m, n, k);
                    send(*a, like(*a, ga), grads);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn(av.data(), g.data(), &mut gb, m, k, n);
                    send(*b, like(*b, gb), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, like(*a, g.data().to_vec()), grads);
                send(*b, like(*b, g.data().to_vec()), grads);
            }
            Op::Sub(a, b) => {
                send(*a, like(*a, g.data().to_vec()), grads);
                send(*b, like(*b, g.data().iter().map(|v| -v).collect()), grads);
            }
            Op::AddRow(x, b) => {
                send(*x, like(*x, g.data().to_vec()), grads);
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                send(*b, like(*b, gb), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    send(*a, like(*a, d), grads);
                }
                if self.nodes[b.0].requires_grad {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    send(*b, like(*b, d), grads);
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                send(*x, emap(*x, &|_, _, g| s * g), grads);
            }
            Op::Tanh(x) => send(*x, emap(*x, &|_, y, g| g * (1.0 - y * y)), grads),
            Op::Sigmoid(x) => send(*x, emap(*x, &|_, y, g| g * y * (1.0 - y)), grads),
            Op::Relu(x) => send(*x, emap(*x, &|a, _, g| if a > 0.0 { g } else { 0.0 }), grads),
            Op::Exp(x) => send(*x, emap(*x, &|_, y, g| g * y), grads),
            Op::Log(x) => send(*x, emap(*x, &|a, _, g| g / a), grads),
            Op::Pow(x, p) => {
                let p = *p;
                // d/dx x^p at x = 0 is taken as 0 for p != 1 so the record stays finite.
                send(
                    *x,
                    emap(*x, &|a, _, g| {
                        if p == 0.0 {
                            0.0
                        } else if a == 0.0 {
                            if p == 1.0 { g } else { 0.0 }
                        } else {
                            g * p * a.powf(p - 1.0)
                        }
                    }),
                    grads,
                );
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(*x, emap(*x, &|a, _, g| if a >= lo && a <= hi { g } else { 0.0 }), grads);
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(d.chunks_exact_mut(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*x, like(*x, d), grads);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for row in g.data().chunks_exact(total) {
                            d.extend_from_slice(&row[offset..offset + w]);
                        }
                        send(p, like(p, d), grads);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.nodes[p.0].requires_grad {
                        send(p, like(p, g.data()[offset..offset + n].to_vec()), grads);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(x, start, len) => {
                let c = self.value(*x).cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (dr, gr) in d.chunks_exact_mut(c).zip(g.data().chunks_exact(*len)) {
                    dr[*start..start + len].copy_from_slice(gr);
                }
                send(*x, like(*x, d), grads);
            }
            Op::SliceRows(x, start) => {
                let c = self.value(*x).cols();
                let mut d = vec![0.0; self.value(*x).len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*x, like(*x, d), grads);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                send(*x, like(*x, vec![g.item(); n]), grads);
            }
            Op::Pick(x, index) => {
                let c = self.value(*x).cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, &k) in index.iter().enumerate() {
                    d[r * c + k] += g.data()[r];
                }
                send(*x, like(*x, d), grads);
            }
            Op::GatherRows(x, index) => {
                let c = self.value(*x).cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (gr, &r) in g.data().chunks_exact(c).zip(index.iter()) {
                    for (o, &v) in d[r * c..(r + 1) * c].iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                send(*x, like(*x, d), grads);
            }
            Op::NodeMix(x, mix) => {
                let mut d = vec![0.0; g.len()];
                mix.apply(g.data(), &mut d, g.cols(), true);
                send(*x, like(*x, d), grads);
            }
            Op::Reshape(x) => send(*x, like(*x, g.data().to_vec()), grads),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

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
