//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in creation order. Each recorded value
//! lives in a node addressed by a [`Var`] handle; inputs always precede their
//! consumers, so a single reverse sweep in index order is a valid topological
//! traversal. Scalars are `1×1` matrices and column vectors are `n×1`.
//!
//! ```
//! use hetcal::autodiff::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(array![[2.0]]);
//! let b = tape.leaf(array![[5.0]]);
//! let out = tape.matmul(a, b).unwrap();
//! tape.backward(out).unwrap();
//! assert_eq!(tape.grad(a)[[0, 0]], 5.0);
//! assert_eq!(tape.grad(b)[[0, 0]], 2.0);
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Single-operand elementwise functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    Exp,
    Log,
    Square,
    Scale(f64),
}

/// Two-operand elementwise functions over equally shaped operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Divisor used by the Monte-Carlo variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceDivisor {
    /// Divide by `M`.
    #[default]
    Population,
    /// Divide by `M - 1`.
    Unbiased,
}

impl VarianceDivisor {
    pub fn divisor(self, m: usize) -> f64 {
        match self {
            VarianceDivisor::Population => m as f64,
            VarianceDivisor::Unbiased => (m - 1) as f64,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    ClampMin(Var, f64),
    Column(Var, usize),
    ConcatRows(Vec<Var>),
    GroupMean(Var, usize),
    GroupVariance(Var, usize, f64),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of nodes; single-threaded by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let grad = if requires_grad {
            Tensor::zeros(value.raw_dim())
        } else {
            Tensor::zeros((0, 0))
        };
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that takes part in the computation but never needs a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` cut off from the graph (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Accumulated gradient; empty (`0×0`) for nodes that do not require one.
    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Indices of the operands that produced `v` (empty for leaves).
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, x)
            | Op::ClampMin(x, _)
            | Op::Column(x, _)
            | Op::GroupMean(x, _)
            | Op::GroupVariance(x, _, _)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::ConcatRows(xs) => xs.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape(self.value(a));
        let (k2, n) = shape(self.value(b));
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {m}x{k} by {k2}x{n}: inner dimensions differ"
            )));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x (m×n) + row (1×n)`, broadcasting the row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = shape(self.value(x));
        let (r, n2) = shape(self.value(row));
        if r != 1 || n != n2 {
            return Err(Error::Shape(format!(
                "add_row expects a 1x{n} row, got {r}x{n2}"
            )));
        }
        let value = self.value(x) + self.value(row);
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let xv = self.value(x);
        let value = match f {
            Unary::Relu => xv.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Exp => xv.mapv(f64::exp),
            Unary::Log => {
                if let Some(bad) = xv.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain(format!("log of non-positive entry {bad}")));
                }
                xv.mapv(f64::ln)
            }
            Unary::Square => xv.mapv(|v| v * v),
            Unary::Scale(c) => xv * c,
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Unary(f, x), rg))
    }

    pub fn binary(&mut self, a: Var, b: Var, f: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::Shape(format!(
                "{f:?} of {:?} and {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let value = match f {
            Binary::Add => av + bv,
            Binary::Sub => av - bv,
            Binary::Mul => av * bv,
            Binary::Div => {
                if bv.iter().any(|v| *v == 0.0) {
                    return Err(Error::Domain("division by zero".into()));
                }
                av / bv
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary(f, a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("relu is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square).expect("square is total")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c)).expect("scale is total")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// `max(x, floor)` elementwise; the gradient is zero wherever the floor binds.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).mapv(|v| v.max(floor));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::ClampMin(x, floor), rg)
    }

    /// Column `j` of `x` as an `m×1` node.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (_, n) = shape(self.value(x));
        if j >= n {
            return Err(Error::Shape(format!(
                "column {j} out of range for width {n}"
            )));
        }
        let value = self.value(x).slice(s![.., j..j + 1]).to_owned();
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Column(x, j), rg))
    }

    /// Stack equally wide nodes on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of no operands".into()))?;
        let width = self.value(*first).ncols();
        if xs.iter().any(|x| self.value(*x).ncols() != width) {
            return Err(Error::Shape("concat_rows operands differ in width".into()));
        }
        let views: Vec<_> = xs.iter().map(|x| self.value(*x).view()).collect();
        let value =
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let rg = self.any_grad(xs);
        Ok(self.push(value, Op::ConcatRows(xs.to_vec()), rg))
    }

    fn check_groups(&self, x: Var, groups: usize) -> Result<usize> {
        let rows = self.value(x).nrows();
        if groups == 0 || !rows.is_multiple_of(groups) {
            return Err(Error::Shape(format!(
                "{rows} rows cannot be split into {groups} equal groups"
            )));
        }
        Ok(rows / groups)
    }

    /// Mean over `groups` contiguous row blocks: `(G·B)×k → B×k`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let block = self.check_groups(x, groups)?;
        let value = group_mean_value(self.value(x), groups, block);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GroupMean(x, groups), rg))
    }

    /// Spread of `groups` contiguous row blocks around their mean,
    /// `Σ_g (x_g − mean)² / divisor`.
    pub fn group_variance(&mut self, x: Var, groups: usize, divisor: f64) -> Result<Var> {
        let block = self.check_groups(x, groups)?;
        if !(divisor > 0.0) {
            return Err(Error::Config(format!(
                "variance divisor {divisor} must be positive"
            )));
        }
        let xv = self.value(x);
        let mut value = Tensor::zeros((block, xv.ncols()));
        for_each_deviation(xv, groups, block, |_, blk, dev| {
            Zip::from(&mut value)
                .and(&blk)
                .and(&dev)
                .for_each(|acc, _, &d| *acc += d * d);
        });
        value /= divisor;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GroupVariance(x, groups, divisor), rg))
    }

    /// Differentiable per-point mean and variance of `M` Monte-Carlo samples.
    pub fn mean_and_variance(
        &mut self,
        samples: &[Var],
        divisor: VarianceDivisor,
    ) -> Result<(Var, Var)> {
        let m = samples.len();
        if m < 2 {
            return Err(Error::Config(format!(
                "mean and variance need at least 2 samples, got {m}"
            )));
        }
        let first = self.value(samples[0]).dim();
        if samples.iter().any(|s| self.value(*s).dim() != first) {
            return Err(Error::Shape("Monte-Carlo samples differ in shape".into()));
        }
        let stacked = self.concat_rows(samples)?;
        let mean = self.group_mean(stacked, m)?;
        let var = self.group_variance(stacked, m, divisor.divisor(m))?;
        Ok((mean, var))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Domain("mean of an empty node".into()));
        }
        let value = Tensor::from_elem((1, 1), self.value(x).sum() / n as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Reset every gradient to zero so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.backward_done = false;
    }

    /// Accumulate `∂root/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward called twice without zero_grad in between".into(),
            ));
        }
        let dim = self.value(root).dim();
        if dim != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {}x{}",
                dim.0, dim.1
            )));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad[[0, 0]] += 1.0;

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            propagate(before, node);
        }
        Ok(())
    }
}

// Means are taken relative to the first group so identical samples give an
// exactly representable mean and exactly zero spread.
fn group_offsets(x: &Tensor, groups: usize, block: usize) -> (Tensor, Tensor) {
    let base = x.slice(s![0..block, ..]).to_owned();
    let mut shift = Tensor::zeros(base.raw_dim());
    for g in 1..groups {
        shift += &(&x.slice(s![g * block..(g + 1) * block, ..]) - &base);
    }
    shift /= groups as f64;
    (base, shift)
}

fn group_mean_value(x: &Tensor, groups: usize, block: usize) -> Tensor {
    let (base, shift) = group_offsets(x, groups, block);
    base + shift
}

/// Calls `f(g, block_g, x_g − mean)` for every group.
fn for_each_deviation(
    x: &Tensor,
    groups: usize,
    block: usize,
    mut f: impl FnMut(usize, ndarray::ArrayView2<'_, f64>, Tensor),
) {
    let (base, shift) = group_offsets(x, groups, block);
    for g in 0..groups {
        let blk = x.slice(s![g * block..(g + 1) * block, ..]);
        let dev = Zip::from(&blk)
            .and(&base)
            .and(&shift)
            .map_collect(|&v, &b, &m| (v - b) - m);
        f(g, blk, dev);
    }
}

fn two_mut(nodes: &mut [Node], i: usize, j: usize) -> (&mut Node, &mut Node) {
    debug_assert_ne!(i, j);
    if i < j {
        let (lo, hi) = nodes.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

fn accumulate(nodes: &mut [Node], v: Var, delta: &Tensor) {
    let n = &mut nodes[v.0];
    if n.requires_grad {
        n.grad += delta;
    }
}

fn propagate(before: &mut [Node], node: &Node) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if a == b {
                if before[a.0].requires_grad {
                    let v = &before[a.0].value;
                    let d = g.dot(&v.t()) + v.t().dot(g);
                    before[a.0].grad += &d;
                }
                return;
            }
            if before[a.0].requires_grad {
                let (an, bn) = two_mut(before, a.0, b.0);
                general_mat_mul(1.0, g, &bn.value.t(), 1.0, &mut an.grad);
            }
            if before[b.0].requires_grad {
                let (an, bn) = two_mut(before, a.0, b.0);
                general_mat_mul(1.0, &an.value.t(), g, 1.0, &mut bn.grad);
            }
        }
        Op::AddRow(x, row) => {
            accumulate(before, *x, g);
            if before[row.0].requires_grad {
                let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                before[row.0].grad += &dr;
            }
        }
        Op::Unary(f, x) => {
            if !before[x.0].requires_grad {
                return;
            }
            if let Unary::Relu = f {
                let n = &mut before[x.0];
                Zip::from(&mut n.grad)
                    .and(g)
                    .and(&n.value)
                    .for_each(|acc, &g, &x| {
                        if x > 0.0 {
                            *acc += g;
                        }
                    });
                return;
            }
            let xv = &before[x.0].value;
            let dx = match f {
                Unary::Relu => unreachable!(),
                Unary::Exp => g * &node.value,
                Unary::Log => g / xv,
                Unary::Square => Zip::from(g).and(xv).map_collect(|&g, &x| 2.0 * x * g),
                Unary::Scale(c) => g * *c,
            };
            before[x.0].grad += &dx;
        }
        Op::Binary(f, a, b) => match f {
            Binary::Add => {
                accumulate(before, *a, g);
                accumulate(before, *b, g);
            }
            Binary::Sub => {
                accumulate(before, *a, g);
                if before[b.0].requires_grad {
                    before[b.0].grad -= g;
                }
            }
            Binary::Mul => {
                if before[a.0].requires_grad {
                    let da = g * &before[b.0].value;
                    before[a.0].grad += &da;
                }
                if before[b.0].requires_grad {
                    let db = g * &before[a.0].value;
                    before[b.0].grad += &db;
                }
            }
            Binary::Div => {
                if before[a.0].requires_grad {
                    let da = g / &before[b.0].value;
                    before[a.0].grad += &da;
                }
                if before[b.0].requires_grad {
                    let db = Zip::from(g)
                        .and(&before[a.0].value)
                        .and(&before[b.0].value)
                        .map_collect(|&g, &a, &b| -g * a / (b * b));
                    before[b.0].grad += &db;
                }
            }
        },
        Op::ClampMin(x, floor) => {
            let n = &mut before[x.0];
            if n.requires_grad {
                Zip::from(&mut n.grad)
                    .and(g)
                    .and(&n.value)
                    .for_each(|acc, &g, &x| {
                        if x > *floor {
                            *acc += g;
                        }
                    });
            }
        }
        Op::Column(x, j) => {
            let n = &mut before[x.0];
            if n.requires_grad {
                let mut col = n.grad.slice_mut(s![.., *j..*j + 1]);
                col += g;
            }
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            for x in xs {
                let rows = before[x.0].value.nrows();
                let n = &mut before[x.0];
                if n.requires_grad {
                    n.grad += &g.slice(s![offset..offset + rows, ..]);
                }
                offset += rows;
            }
        }
        Op::GroupMean(x, groups) => {
            let n = &mut before[x.0];
            if n.requires_grad {
                let block = g.nrows();
                let scaled = g / *groups as f64;
                for k in 0..*groups {
                    let mut blk = n.grad.slice_mut(s![k * block..(k + 1) * block, ..]);
                    blk += &scaled;
                }
            }
        }
        Op::GroupVariance(x, groups, divisor) => {
            let n = &mut before[x.0];
            if n.requires_grad {
                let block = g.nrows();
                let grad = &mut n.grad;
                for_each_deviation(&n.value, *groups, block, |k, _, dev| {
                    let d = Zip::from(g)
                        .and(&dev)
                        .map_collect(|&g, &dv| 2.0 * dv * g / divisor);
                    let mut blk = grad.slice_mut(s![k * block..(k + 1) * block, ..]);
                    blk += &d;
                });
            }
        }
        Op::Sum(x) => {
            let n = &mut before[x.0];
            if n.requires_grad {
                n.grad += g[[0, 0]];
            }
        }
        Op::Mean(x) => {
            let n = &mut before[x.0];
            if n.requires_grad {
                let len = n.value.len() as f64;
                n.grad += g[[0, 0]] / len;
            }
        }
    }
}
