//! Reverse-mode differentiation over dense rank-1/rank-2 tensors.
//!
//! A [`Graph`] is an eager tape: every primitive computes its value
//! immediately and appends a node recording its parents. Nodes are stored in
//! creation order, which is a valid topological ordering, so [`Graph::backward`]
//! is a single reverse sweep. Vectors are column tensors of shape `n x 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with rank at most two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("tensor", format!("dims must be >= 1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{} values cannot fill a {rows}x{cols} tensor", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dims must be >= 1");
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut t = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                t.data[r * cols + c] = f(r, c);
            }
        }
        t
    }

    /// Column vector. Panics on an empty slice.
    pub fn vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "vector must be non-empty");
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn fmt_shape(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

// a (m x k) * b (k x n)
fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let src = &b.data[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(src) {
                *d += av * bv;
            }
        }
    }
    Tensor { rows: m, cols: n, data: out }
}

// g (m x n) * b^T, b is (k x n) -> (m x k)
fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.rows, g.cols, b.rows);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gi = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b.data[p * n..(p + 1) * n];
            out[i * k + p] = gi.iter().zip(bp).map(|(x, y)| x * y).sum();
        }
    }
    Tensor { rows: m, cols: k, data: out }
}

// a^T * g, a is (m x k), g is (m x n) -> (k x n)
fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, g.cols);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gi = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dst = &mut out[p * n..(p + 1) * n];
            for (d, &gv) in dst.iter_mut().zip(gi) {
                *d += av * gv;
            }
        }
    }
    Tensor { rows: k, cols: n, data: out }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds recorded on the tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `w * x + b`, with `b` (rows x 1) broadcast across the columns of `w * x`.
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eager tape for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to the leaves of a graph.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current tape length, usable with [`Graph::rewind`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node created after `mark`. Vars issued after the mark become invalid.
    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of `v`; intended for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{} vs {}", ta.fmt_shape(), tb.fmt_shape())));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(Error::shape(
                "matmul",
                format!("{} cannot multiply {}", ta.fmt_shape(), tb.fmt_shape()),
            ));
        }
        let value = matmul(ta, tb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `w * x + b` with the bias column broadcast over columns.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (tw, tx, tb) = (self.value(w), self.value(x), self.value(b));
        if tw.cols != tx.rows || tb.rows != tw.rows || tb.cols != 1 {
            return Err(Error::shape(
                "affine",
                format!(
                    "w {} x {} b {}",
                    tw.fmt_shape(),
                    tx.fmt_shape(),
                    tb.fmt_shape()
                ),
            ));
        }
        let mut value = matmul(tw, tx);
        let n = value.cols;
        for r in 0..value.rows {
            let bias = tb.data[r];
            for v in &mut value.data[r * n..(r + 1) * n] {
                *v += bias;
            }
        }
        let rg = self.rg(&[w, x, b]);
        Ok(self.push(value, Op::Affine(w, x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds the constant `c` to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Stacks tensors with equal column counts along rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let cols = self.value(*first).cols;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.cols != cols {
                return Err(Error::shape(
                    "concat",
                    format!("column count {} vs {}", cols, t.cols),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols;
        let rg = self.rg(parts);
        Ok(self.push(Tensor { rows, cols, data }, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.rows {
            return Err(Error::shape(
                "slice",
                format!("rows {}..{} of {}", start, start + len, t.fmt_shape()),
            ));
        }
        let cols = t.cols;
        let data = t.data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                rows: len,
                cols,
                data,
            },
            Op::Slice { src: a, start },
            rg,
        ))
    }

    /// Gradients of the scalar `output` with respect to every trainable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got {}",
                out.fmt_shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    g
                } else {
                    None
                }
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_bt(g, val(*b)));
                acc(*b, matmul_at(val(*a), g));
            }
            Op::Affine(w, x, b) => {
                acc(*w, matmul_bt(g, val(*x)));
                acc(*x, matmul_at(val(*w), g));
                let cols = g.cols;
                let db = (0..g.rows)
                    .map(|r| g.data[r * cols..(r + 1) * cols].iter().sum())
                    .collect::<Vec<_>>();
                acc(*b, Tensor::vector(&db));
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
                acc(*a, g.zip(val(*b), |gv, bv| gv * bv));
                acc(*b, g.zip(val(*a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, g.zip(tb, |gv, bv| gv / bv));
                let mut db = g.zip(ta, |gv, av| -gv * av);
                for (d, bv) in db.data.iter_mut().zip(&tb.data) {
                    *d /= bv * bv;
                }
                acc(*b, db);
            }
            Op::Neg(a) => acc(*a, g.map(|x| -x)),
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => acc(*a, g.zip(y, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, g.zip(y, |gv, t| gv * (1.0 - t * t))),
            Op::Softplus(a) => acc(*a, g.zip(val(*a), |gv, x| gv * sigmoid(x))),
            Op::Exp(a) => acc(*a, g.zip(y, |gv, e| gv * e)),
            Op::Log(a) => acc(*a, g.zip(val(*a), |gv, x| gv / x)),
            Op::Relu(a) => acc(*a, g.zip(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Sum(a) => {
                let t = val(*a);
                let s = g.data[0];
                acc(
                    *a,
                    Tensor {
                        rows: t.rows,
                        cols: t.cols,
                        data: vec![s; t.len()],
                    },
                );
            }
            Op::Concat(parts) => {
                let cols = g.cols;
                let mut row = 0;
                for p in parts {
                    let rows = val(*p).rows;
                    let data = g.data[row * cols..(row + rows) * cols].to_vec();
                    acc(*p, Tensor { rows, cols, data });
                    row += rows;
                }
            }
            Op::Slice { src, start } => {
                let t = val(*src);
                let mut d = Tensor::zeros(t.rows, t.cols);
                let cols = t.cols;
                d.data[start * cols..start * cols + g.len()].copy_from_slice(&g.data);
                acc(*src, d);
            }
        }
    }
}

/// Outcome of comparing backward gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Denominator floor for the relative error, so that gradients near zero are
/// compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Relative error `|a - b| / max(|a|, |b|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Gradient check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), h, tol)
}

/// Gradient check of a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step h must be > 0, got {h}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v} is not finite")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::Numeric(format!("function value {} is not finite", g.scalar(out))));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut work = points.to_vec();
    let mut numeric = Vec::with_capacity(points.len());
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for k in 0..points.len() {
        let mut num = Tensor::zeros(points[k].rows, points[k].cols);
        for i in 0..points[k].len() {
            let orig = work[k].data[i];
            work[k].data[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data[i] = orig;
            let d = (plus - minus) / (2.0 * h);
            num.data[i] = d;
            let a = analytic[k].data[i];
            max_rel = max_rel.max(relative_error(a, d));
            max_abs = max_abs.max((a - d).abs());
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        tol,
        passed: max_rel < tol,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec_of(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).data().to_vec()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn identity_matmul_returns_vector() {
        let mut g = Graph::new();
        let i3 = g.constant(Tensor::identity(3));
        let v = g.constant(Tensor::vector(&[1.5, -2.0, 7.25]));
        let out = g.matmul(i3, v).unwrap();
        assert_eq!(vec_of(&g, out), vec![1.5, -2.0, 7.25]);
    }

    #[test]
    fn hadamard_product() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[1.0, 2.0]));
        let b = g.constant(Tensor::vector(&[3.0, 4.0]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(vec_of(&g, c), vec![3.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[1.0, 2.0]));
        let b = g.constant(Tensor::vector(&[3.0, 4.0, 5.0]));
        let err = g.mul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("hadamard") && msg.contains("2x1") && msg.contains("3x1"), "{msg}");
        let m = g.constant(Tensor::zeros(2, 2));
        assert!(matches!(g.matmul(m, b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn square_gradient_matches_finite_difference() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        let analytic = grads.wrt(x).data()[0];
        let h = 1e-5;
        let f = |v: f64| v * v;
        let fd = (f(3.0 + h) - f(3.0 - h)) / (2.0 * h);
        assert!((analytic - fd).abs() < 1e-8);
        assert_eq!(analytic, 6.0);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let c = g.leaf(Tensor::scalar(2.0));
        let out = g.scale(c, 1.0);
        let o = g.offset(out, 5.0);
        let grads = g.backward(o).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.backward(y).unwrap().wrt(x).data(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let report = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &Tensor::vector(&[1.0, 2.0, 3.0]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{}", report.max_rel_error);
        assert_eq!(report.analytic[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_check_constant_function() {
        let report = grad_check(
            |g, _x| Ok(g.constant(Tensor::scalar(4.0))),
            &Tensor::vector(&[1.0, 2.0]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.analytic[0].data().iter().all(|&v| v == 0.0));
        assert!(report.numeric[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let res = grad_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum(l))
            },
            &Tensor::vector(&[-1.0]),
            1e-5,
            1e-6,
        );
        assert!(matches!(res, Err(Error::Numeric(_))));
        assert!(grad_check(|g, x| Ok(g.sum(x)), &Tensor::scalar(1.0), 0.0, 1.0).is_err());
    }

    #[test]
    fn rewind_drops_later_nodes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.0));
        let mark = g.mark();
        let _ = g.exp(a);
        assert_eq!(g.len(), 2);
        g.rewind(mark);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let b = g.leaf(Tensor::vector(&[3.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(vec_of(&g, c), vec![1.0, 2.0, 3.0]);
        let tail = g.slice(c, 1, 2).unwrap();
        let w = g.constant(Tensor::vector(&[10.0, 100.0]));
        let prod = g.mul(tail, w).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[0.0, 10.0]);
        assert_eq!(grads.wrt(b).data(), &[100.0]);
        assert!(g.slice(c, 2, 2).is_err());
    }

    type Unary = fn(&mut Graph, Var) -> Var;

    fn unary_cases() -> Vec<(&'static str, Unary, f64, f64)> {
        vec![
            ("sigmoid", |g, x| g.sigmoid(x), -4.0, 4.0),
            ("tanh", |g, x| g.tanh(x), -3.0, 3.0),
            ("softplus", |g, x| g.softplus(x), -4.0, 4.0),
            ("exp", |g, x| g.exp(x), -2.0, 2.0),
            ("log", |g, x| g.log(x), 0.2, 5.0),
            ("neg", |g, x| g.neg(x), -5.0, 5.0),
            ("scale", |g, x| g.scale(x, -2.5), -5.0, 5.0),
            ("offset", |g, x| g.offset(x, 1.5), -5.0, 5.0),
            ("relu", |g, x| g.relu(x), 0.05, 5.0),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn unary_primitives_match_finite_differences(u in 0.0f64..1.0, w in -1.0f64..1.0) {
            for (name, op, lo, hi) in unary_cases() {
                let x0 = lo + (hi - lo) * u;
                // weight keeps the reduced output sensitive to every coordinate
                let point = Tensor::vector(&[x0, 0.5 * (lo + hi) + 0.1 * w]);
                let report = grad_check(
                    |g, x| {
                        let y = op(g, x);
                        let c = g.constant(Tensor::vector(&[1.0, -0.7]));
                        let p = g.mul(y, c)?;
                        Ok(g.sum(p))
                    },
                    &point,
                    1e-5,
                    1e-5,
                ).unwrap();
                prop_assert!(report.passed, "{name} at {x0}: {}", report.max_rel_error);
            }
        }

        #[test]
        fn binary_primitives_match_finite_differences(
            a in proptest::collection::vec(-2.0f64..2.0, 6),
            b in proptest::collection::vec(0.5f64..2.0, 6),
        ) {
            let ta = Tensor::new(2, 3, a).unwrap();
            let tb = Tensor::new(2, 3, b).unwrap();
            let mat = Tensor::from_fn(3, 2, |r, c| 0.3 * r as f64 - 0.2 * c as f64 + 0.1);
            let bias = Tensor::vector(&[0.4, -0.3]);
            let report = grad_check_many(
                |g, v| {
                    let s = g.add(v[0], v[1])?;
                    let d = g.sub(s, v[1])?;
                    let m = g.mul(d, v[1])?;
                    let q = g.div(m, v[1])?;
                    let mm = g.matmul(q, v[2])?;
                    let af = g.affine(v[0], v[2], v[3])?;
                    let tq = g.tanh(mm);
                    let caf = g.concat(&[af, tq])?;
                    let sl = g.slice(caf, 1, 3)?;
                    let sq = g.mul(sl, sl)?;
                    Ok(g.sum(sq))
                },
                &[ta, tb, mat, bias],
                1e-5,
                1e-5,
            ).unwrap();
            prop_assert!(report.passed, "{}", report.max_rel_error);
        }

        #[test]
        fn backward_is_linear(x in proptest::collection::vec(-2.0f64..2.0, 3), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let point = Tensor::vector(&x);
            let f = |g: &mut Graph, v: Var| { let t = g.tanh(v); let s = g.mul(t, v).unwrap(); g.sum(s) };
            let h = |g: &mut Graph, v: Var| { let e = g.exp(v); g.sum(e) };

            let mut g1 = Graph::new();
            let v1 = g1.leaf(point.clone());
            let fv = f(&mut g1, v1);
            let hv = h(&mut g1, v1);
            let fa = g1.scale(fv, a);
            let hb = g1.scale(hv, b);
            let comb = g1.add(fa, hb).unwrap();
            let combined = g1.backward(comb).unwrap().wrt(v1);

            let gf = g1.backward(fv).unwrap().wrt(v1);
            let gh = g1.backward(hv).unwrap().wrt(v1);
            for i in 0..3 {
                let expect = a * gf.data()[i] + b * gh.data()[i];
                prop_assert!((combined.data()[i] - expect).abs() < 1e-10);
            }
        }

        #[test]
        fn repeated_backward_is_bitwise_identical(x in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let mut g = Graph::new();
            let v = g.leaf(Tensor::vector(&x));
            let s = g.softplus(v);
            let t = g.mul(s, v).unwrap();
            let out = g.sum(t);
            let first = g.backward(out).unwrap().wrt(v);
            let second = g.backward(out).unwrap().wrt(v);
            prop_assert_eq!(first.data(), second.data());
        }
    }
}
