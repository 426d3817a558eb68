//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations as they are requested; values are computed
//! by [`Tape::forward`], which only evaluates nodes that are still pending.
//! Named inputs can be rebound with [`Tape::rebind`], after which the next
//! `forward` recomputes every derived node. That is what the finite
//! difference checker relies on.
//!
//! Sparse matrices only appear as constant left operands of
//! [`Tape::sparse_matmul`]; they never receive gradients.
//!
//! `log`, `sqrt` and `powf` reject non-positive arguments. Callers add their
//! own epsilon where a zero is possible.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floor applied to row norms by [`Tape::row_l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul(Var, Var),
    SparseMatMul(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var, f64),
    ElemMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Square(Var),
    Sqrt(Var),
    RowSoftmax(Var),
    RowL2Normalize(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    Transpose(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::SparseMatMul(..) => "sparse_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::MulCol(..) => "mul_col",
            Op::ScalarMul(..) => "scalar_mul",
            Op::AddScalar(..) => "add_scalar",
            Op::ElemMul(..) => "elementwise_mul",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Powf(..) => "powf",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowL2Normalize(..) => "row_l2_normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::GatherRows(..) => "gather_rows",
            Op::Transpose(..) => "transpose",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Input => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::MulCol(a, b)
            | Op::ElemMul(a, b) => vec![a, b],
            Op::SparseMatMul(_, a)
            | Op::ScalarMul(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::RowSoftmax(a)
            | Op::RowL2Normalize(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::GatherRows(a, _)
            | Op::Transpose(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: (usize, usize),
    value: Option<Array2<f64>>,
    requires_grad: bool,
}

/// A recorded differentiable computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
    grads: Vec<Option<Array2<f64>>>,
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

    fn push_input(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        let var = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input,
            shape: value.dim(),
            value: Some(value),
            requires_grad,
        });
        var
    }

    /// Named input. `requires_grad` marks it as a parameter.
    pub fn input(&mut self, name: &str, value: Array2<f64>, requires_grad: bool) -> Result<Var> {
        if self.names.contains_key(name) {
            return Err(Error::Tape(format!("input {name:?} bound twice")));
        }
        let var = self.push_input(value, requires_grad);
        self.names.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn param(&mut self, name: &str, value: Array2<f64>) -> Result<Var> {
        self.input(name, value, true)
    }

    /// Unnamed constant; never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_input(value, false)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].shape
    }

    /// Replaces the value of a named input and invalidates every derived node.
    pub fn rebind(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Tape(format!("no input named {name:?}")))?;
        let node = &mut self.nodes[var.0];
        if node.shape != value.dim() {
            return Err(Error::Shape {
                node: var.0,
                op: "input",
                detail: format!("rebinding {name:?} from {:?} to {:?}", node.shape, value.dim()),
            });
        }
        node.value = Some(value);
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Input) {
                node.value = None;
            }
        }
        self.grads.clear();
        Ok(())
    }

    fn record(&mut self, op: Op, shape: (usize, usize)) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let var = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            value: None,
            requires_grad,
        });
        var
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn same_shape(&mut self, op: Op) -> Result<Var> {
        let parents = op.parents();
        let (a, b) = (self.shape(parents[0]), self.shape(parents[1]));
        if a != b {
            return Err(self.shape_err(op.name(), format!("{a:?} vs {b:?}")));
        }
        Ok(self.record(op, a))
    }

    fn unary(&mut self, op: Op) -> Var {
        let shape = self.shape(op.parents()[0]);
        self.record(op, shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k1), (k2, n)) = (self.shape(a), self.shape(b));
        if k1 != k2 {
            return Err(self.shape_err("matmul", format!("({m}, {k1}) · ({k2}, {n})")));
        }
        Ok(self.record(Op::MatMul(a, b), (m, n)))
    }

    /// `s · b` for a constant sparse `s`.
    pub fn sparse_matmul(&mut self, s: Arc<CsrMatrix>, b: Var) -> Result<Var> {
        let (m, k1) = s.shape();
        let (k2, n) = self.shape(b);
        if k1 != k2 {
            return Err(self.shape_err("sparse_matmul", format!("({m}, {k1}) · ({k2}, {n})")));
        }
        Ok(self.record(Op::SparseMatMul(s, b), (m, n)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(Op::Sub(a, b))
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(Op::ElemMul(a, b))
    }

    /// Adds the `1×m` row `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let ((n, m), rs) = (self.shape(x), self.shape(r));
        if rs != (1, m) {
            return Err(self.shape_err("add_row", format!("({n}, {m}) + {rs:?}")));
        }
        Ok(self.record(Op::AddRow(x, r), (n, m)))
    }

    /// Adds the `n×1` column `c` to every column of `x`.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let ((n, m), cs) = (self.shape(x), self.shape(c));
        if cs != (n, 1) {
            return Err(self.shape_err("add_col", format!("({n}, {m}) + {cs:?}")));
        }
        Ok(self.record(Op::AddCol(x, c), (n, m)))
    }

    /// Scales row `i` of `x` by `c[i]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let ((n, m), cs) = (self.shape(x), self.shape(c));
        if cs != (n, 1) {
            return Err(self.shape_err("mul_col", format!("({n}, {m}) * {cs:?}")));
        }
        Ok(self.record(Op::MulCol(x, c), (n, m)))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        self.unary(Op::ScalarMul(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(Op::AddScalar(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log(x))
    }

    /// Elementwise `x^p` for strictly positive `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(Op::Powf(x, p))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Op::Sqrt(x))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        self.unary(Op::RowSoftmax(x))
    }

    /// Divides each row by `max(‖row‖₂, NORM_EPS)`.
    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        self.unary(Op::RowL2Normalize(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.record(Op::Sum(x), (1, 1))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c == 0 {
            return Err(self.shape_err("mean", "mean of an empty matrix".into()));
        }
        Ok(self.record(Op::Mean(x), (1, 1)))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let (n, _) = self.shape(x);
        self.record(Op::RowSum(x), (n, 1))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, m) = self.shape(x);
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(self.shape_err("gather_rows", format!("row {bad} of {n}")));
        }
        let len = rows.len();
        Ok(self.record(Op::GatherRows(x, Arc::new(rows)), (len, m)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        self.record(Op::Transpose(x), (c, r))
    }

    /// Evaluates every pending node in recording order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].value.is_none() {
                let v = self.eval(i)?;
                debug_assert_eq!(v.dim(), self.nodes[i].shape);
                self.nodes[i].value = Some(v);
            }
        }
        Ok(())
    }

    /// Value of an evaluated node.
    pub fn value(&self, v: Var) -> Result<&Array2<f64>> {
        self.nodes[v.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::Tape(format!("node {} ({}) has not been evaluated", v.0, self.nodes[v.0].op.name())))
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let val = self.value(v)?;
        if val.dim() != (1, 1) {
            return Err(Error::Tape(format!("node {} is {:?}, not a scalar", v.0, val.dim())));
        }
        Ok(val[[0, 0]])
    }

    fn val(&self, v: Var) -> &Array2<f64> {
        self.nodes[v.0].value.as_ref().expect("parents evaluated before children")
    }

    fn domain(&self, i: usize, detail: String) -> Error {
        Error::Domain {
            node: i,
            op: self.nodes[i].op.name(),
            detail,
        }
    }

    fn eval(&self, i: usize) -> Result<Array2<f64>> {
        let out = match &self.nodes[i].op {
            Op::Input => unreachable!("inputs always carry a value"),
            Op::MatMul(a, b) => self.val(*a).dot(self.val(*b)),
            Op::SparseMatMul(s, b) => s.mul_dense(self.val(*b).view()),
            Op::Add(a, b) => self.val(*a) + self.val(*b),
            Op::Sub(a, b) => self.val(*a) - self.val(*b),
            Op::AddRow(x, r) => self.val(*x) + self.val(*r),
            Op::AddCol(x, c) => self.val(*x) + self.val(*c),
            Op::MulCol(x, c) => self.val(*x) * self.val(*c),
            Op::ScalarMul(x, s) => self.val(*x) * *s,
            Op::AddScalar(x, s) => self.val(*x) + *s,
            Op::ElemMul(a, b) => self.val(*a) * self.val(*b),
            Op::Relu(x) => self.val(*x).mapv(|v| v.max(0.0)),
            Op::Exp(x) => self.val(*x).mapv(f64::exp),
            Op::Log(x) => {
                let x = self.val(*x);
                if let Some(bad) = x.iter().find(|v| !(**v > 0.0)) {
                    return Err(self.domain(i, format!("log of {bad}")));
                }
                x.mapv(f64::ln)
            }
            Op::Powf(x, p) => {
                let x = self.val(*x);
                if let Some(bad) = x.iter().find(|v| !(**v > 0.0)) {
                    return Err(self.domain(i, format!("powf of {bad}")));
                }
                x.mapv(|v| v.powf(*p))
            }
            Op::Square(x) => self.val(*x).mapv(|v| v * v),
            Op::Sqrt(x) => {
                let x = self.val(*x);
                if let Some(bad) = x.iter().find(|v| !(**v > 0.0)) {
                    return Err(self.domain(i, format!("sqrt of {bad}")));
                }
                x.mapv(f64::sqrt)
            }
            Op::RowSoftmax(x) => row_softmax(self.val(*x)),
            Op::RowL2Normalize(x) => {
                let x = self.val(*x);
                let norms = row_norms(x);
                let mut out = x.clone();
                for (mut row, r) in out.rows_mut().into_iter().zip(norms) {
                    row /= r.max(NORM_EPS);
                }
                out
            }
            Op::Sum(x) => Array2::from_elem((1, 1), self.val(*x).sum()),
            Op::Mean(x) => {
                let x = self.val(*x);
                Array2::from_elem((1, 1), x.sum() / x.len() as f64)
            }
            Op::RowSum(x) => self.val(*x).sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::GatherRows(x, rows) => self.val(*x).select(Axis(0), rows),
            Op::Transpose(x) => self.val(*x).t().to_owned(),
        };
        Ok(out)
    }

    /// Computes gradients of the scalar `loss` with respect to every node
    /// that depends on a parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].shape != (1, 1) {
            return Err(Error::Tape(format!("loss node {} has shape {:?}", loss.0, self.nodes[loss.0].shape)));
        }
        if self.nodes[..=loss.0].iter().any(|n| n.value.is_none()) {
            return Err(Error::Tape("backward called before forward".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (parent, contrib) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Array2<f64>) -> Vec<(Var, Array2<f64>)> {
        let out = || self.nodes[i].value.as_ref().expect("evaluated");
        match &self.nodes[i].op {
            Op::Input => vec![],
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    v.push((*a, g.dot(&self.val(*b).t())));
                }
                if self.nodes[b.0].requires_grad {
                    v.push((*b, self.val(*a).t().dot(g)));
                }
                v
            }
            Op::SparseMatMul(s, b) => vec![(*b, s.transpose_mul_dense(g.view()))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, -g)],
            Op::AddRow(x, r) => vec![(*x, g.clone()), (*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
            Op::AddCol(x, c) => vec![(*x, g.clone()), (*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)))],
            Op::MulCol(x, c) => {
                let (xv, cv) = (self.val(*x), self.val(*c));
                let dc = (g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![(*x, g * cv), (*c, dc)]
            }
            Op::ScalarMul(x, s) => vec![(*x, g * *s)],
            Op::AddScalar(x, _) => vec![(*x, g.clone())],
            Op::ElemMul(a, b) => vec![(*a, g * self.val(*b)), (*b, g * self.val(*a))],
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.val(*x)).for_each(|d, &xv| {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![(*x, d)]
            }
            Op::Exp(x) => vec![(*x, g * out())],
            Op::Log(x) => vec![(*x, g / self.val(*x))],
            Op::Powf(x, p) => {
                let d = self.val(*x).mapv(|v| p * v.powf(p - 1.0));
                vec![(*x, g * &d)]
            }
            Op::Square(x) => vec![(*x, g * self.val(*x) * 2.0)],
            Op::Sqrt(x) => vec![(*x, g / &(out() * 2.0))],
            Op::RowSoftmax(x) => {
                let y = out();
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![(*x, y * &(g - &dot))]
            }
            Op::RowL2Normalize(x) => {
                let (xv, y) = (self.val(*x), out());
                let norms = row_norms(xv);
                let mut d = g.clone();
                for ((mut drow, yrow), r) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    if r > NORM_EPS {
                        let proj = drow.dot(&yrow);
                        drow.scaled_add(-proj, &yrow);
                        drow /= r;
                    } else {
                        drow /= NORM_EPS;
                    }
                }
                vec![(*x, d)]
            }
            Op::Sum(x) => vec![(*x, Array2::from_elem(self.shape(*x), g[[0, 0]]))],
            Op::Mean(x) => {
                let shape = self.shape(*x);
                let scale = g[[0, 0]] / (shape.0 * shape.1) as f64;
                vec![(*x, Array2::from_elem(shape, scale))]
            }
            Op::RowSum(x) => {
                let shape = self.shape(*x);
                let mut d = Array2::zeros(shape);
                for (mut row, gv) in d.rows_mut().into_iter().zip(g.column(0)) {
                    row.fill(*gv);
                }
                vec![(*x, d)]
            }
            Op::GatherRows(x, rows) => {
                let mut d = Array2::zeros(self.shape(*x));
                for (grow, &r) in g.rows().into_iter().zip(rows.iter()) {
                    d.row_mut(r).scaled_add(1.0, &grow);
                }
                vec![(*x, d)]
            }
            Op::Transpose(x) => vec![(*x, g.t().to_owned())],
        }
    }

    /// Gradient after [`Tape::backward`]; `None` for nodes the loss does not
    /// depend on through a parameter.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Tape::grad`] but returns zeros for parameters outside the loss's
    /// dependency cone.
    pub fn grad_or_zeros(&self, v: Var) -> Array2<f64> {
        self.grad(v).cloned().unwrap_or_else(|| Array2::zeros(self.shape(v)))
    }

    fn relu_inputs(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .collect()
    }

    /// Name of every parameter input, sorted.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .names
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(k, _)| k.clone())
            .collect();
        names.sort();
        names
    }
}

fn row_norms(x: &Array2<f64>) -> Vec<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Numerically stable softmax of each row.
pub fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// An input entry excluded from a finite-difference check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedEntry {
    pub input: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    /// `max |analytic − central| / max(|analytic|, |central|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose perturbation crosses or touches a ReLU kink.
    pub skipped: Vec<SkippedEntry>,
}

fn relu_signs(tape: &Tape, vars: &[Var]) -> Vec<Vec<i8>> {
    vars.iter()
        .map(|v| {
            tape.val(*v)
                .iter()
                .map(|x| if *x > 0.0 { 1 } else if *x < 0.0 { -1 } else { 0 })
                .collect()
        })
        .collect()
}

/// Compares analytic gradients of `loss` against central differences for
/// every entry of the named inputs. The tape is restored before returning.
pub fn finite_difference_check(tape: &mut Tape, loss: Var, inputs: &[&str], eps: f64) -> Result<FdReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside (0, 1e-2]")));
    }
    tape.forward()?;
    tape.backward(loss)?;
    let relus = tape.relu_inputs();
    let base_signs = relu_signs(tape, &relus);
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: Vec::new(),
    };
    let mut analytic = Vec::with_capacity(inputs.len());
    for name in inputs {
        let var = tape
            .var(name)
            .ok_or_else(|| Error::Tape(format!("no input named {name:?}")))?;
        analytic.push((var, tape.grad_or_zeros(var)));
    }

    for (name, (var, grad)) in inputs.iter().zip(analytic) {
        let original = tape.value(var)?.clone();
        let (rows, cols) = original.dim();
        for r in 0..rows {
            for c in 0..cols {
                let mut kink = false;
                let mut eval_at = |delta: f64, tape: &mut Tape| -> Result<f64> {
                    let mut x = original.clone();
                    x[[r, c]] += delta;
                    tape.rebind(name, x)?;
                    tape.forward()?;
                    if relu_signs(tape, &relus) != base_signs {
                        kink = true;
                    }
                    tape.scalar(loss)
                };
                let plus = eval_at(eps, tape)?;
                let minus = eval_at(-eps, tape)?;
                if kink {
                    report.skipped.push(SkippedEntry {
                        input: name.to_string(),
                        row: r,
                        col: c,
                    });
                    continue;
                }
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite(format!("loss at perturbed {name}[{r}, {c}]")));
                }
                let central = (plus - minus) / (2.0 * eps);
                let a = grad[[r, c]];
                if !a.is_finite() {
                    return Err(Error::NonFinite(format!("analytic gradient {name}[{r}, {c}]")));
                }
                let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
                report.max_rel_error = report.max_rel_error.max(rel);
                report.checked += 1;
            }
        }
        tape.rebind(name, original)?;
    }
    tape.forward()?;
    tape.backward(loss)?;
    Ok(report)
}
