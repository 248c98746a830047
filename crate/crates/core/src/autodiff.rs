//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D array: scalars are `1 × 1`, row vectors
//! `1 × n`, column vectors `n × 1`. Element-wise binary operations broadcast
//! an operand along any axis of length one, and their adjoints are summed back
//! over the broadcast axes.
//!
//! [`Tape::detach`] is the cut-gradient primitive: the returned variable has
//! the same value as its input but no tape history, so nothing downstream of
//! it can send adjoint back into the original.
//!
//! A tape is single-writer. Independent loss evaluations build independent
//! tapes and can run on separate threads.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{contract, Result};

pub type Tensor = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

static SORT_ADJOINT_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: when enabled, sort nodes route adjoints without their
/// permutation. Only the verification suite's negative control uses this.
#[doc(hidden)]
pub fn set_sort_adjoint_fault(enabled: bool) {
    SORT_ADJOINT_FAULT.store(enabled, Ordering::SeqCst);
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detached,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Cos(Var),
    Gelu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    Dot(Var, Var),
    /// `perm[r * cols + k]` is the input column that landed at position `k`.
    SortRows { input: Var, perm: Vec<u32> },
    /// Max or min reduction; `index` is the flat position of the winner.
    Extremum { input: Var, index: usize },
    Gather { input: Var, index: Vec<usize> },
    Scatter { input: Var, index: Vec<usize> },
    /// Eigenvalues in ascending order; `vectors` holds matching columns.
    SymEigvals { input: Var, vectors: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    detached: bool,
}

/// Recording of primitive operations, replayed backwards by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zeros when nothing reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0]),
        }
    }
}

fn shape_of(t: &Tensor) -> (usize, usize) {
    (t.nrows(), t.ncols())
}

fn broadcast_shape(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(contract(
            op,
            format!("shapes {}x{} and {}x{} do not broadcast", a.0, a.1, b.0, b.1),
        )),
    }
}

fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    shape: (usize, usize),
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    if shape_of(a) == shape && shape_of(b) == shape {
        return Zip::from(a).and(b).map_collect(|&x, &y| f(x, y));
    }
    let av = a.broadcast(shape).expect("checked broadcast");
    let bv = b.broadcast(shape).expect("checked broadcast");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

/// Sum `g` over the axes along which an operand of `shape` was broadcast.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x Φ(x)` with Φ the standard normal CDF.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

const PAR_SORT_MIN: usize = 1 << 14;

fn sort_rows_values(x: &Tensor) -> Tensor {
    let mut out = standard(x.clone());
    let cols = out.ncols();
    let body = |row: &mut [f64]| row.sort_unstable_by(f64::total_cmp);
    let data = out.as_slice_mut().expect("standard layout");
    if cols == 0 {
        return out;
    }
    if data.len() >= PAR_SORT_MIN {
        data.par_chunks_mut(cols).for_each(body);
    } else {
        data.chunks_mut(cols).for_each(body);
    }
    out
}

fn sort_rows_with_perm(x: &Tensor) -> (Tensor, Vec<u32>) {
    let x = standard(x.clone());
    let (rows, cols) = shape_of(&x);
    let mut out = Tensor::zeros((rows, cols));
    let mut perm = vec![0u32; rows * cols];
    if cols == 0 {
        return (out, perm);
    }
    let src = x.as_slice().expect("standard layout");
    let body = |((row_out, row_perm), row_in): ((&mut [f64], &mut [u32]), &[f64])| {
        let mut keyed: Vec<(f64, u32)> = row_in
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i as u32))
            .collect();
        // Ties broken by original position: identical to a stable sort.
        keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (k, (v, i)) in keyed.into_iter().enumerate() {
            row_out[k] = v;
            row_perm[k] = i;
        }
    };
    let out_data = out.as_slice_mut().expect("standard layout");
    if src.len() >= PAR_SORT_MIN {
        out_data
            .par_chunks_mut(cols)
            .zip(perm.par_chunks_mut(cols))
            .zip(src.par_chunks(cols))
            .for_each(body);
    } else {
        out_data
            .chunks_mut(cols)
            .zip(perm.chunks_mut(cols))
            .zip(src.chunks(cols))
            .for_each(body);
    }
    (out, perm)
}

fn sym_eig_ascending(a: &Tensor) -> (Tensor, Tensor) {
    let n = a.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = Tensor::from_shape_fn((1, n), |(_, k)| eig.eigenvalues[order[k]]);
    let vectors = Tensor::from_shape_fn((n, n), |(i, k)| eig.eigenvectors[(i, order[k])]);
    (values, vectors)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, detached: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(standard(value)),
            op,
            requires_grad,
            detached,
        });
        Var(nodes.len() - 1)
    }

    fn check(&self, op: &'static str, v: Var) -> Result<()> {
        if v.0 < self.len() {
            Ok(())
        } else {
            Err(contract(op, format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, false)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(Tensor::from_elem((1, 1), x))
    }

    pub fn param_scalar(&self, x: f64) -> Var {
        self.param(Tensor::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Value of a `1 × 1` variable.
    pub fn item(&self, v: Var) -> Result<f64> {
        let value = self.value(v);
        if shape_of(&value) != (1, 1) {
            return Err(contract(
                "item",
                format!("expected a scalar, got {}x{}", value.nrows(), value.ncols()),
            ));
        }
        Ok(value[[0, 0]])
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape_of(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn is_detached(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].detached
    }

    /// Same value as `v`, cut from the graph.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Detached,
            requires_grad: false,
            detached: true,
        });
        Var(nodes.len() - 1)
    }

    fn unary(&self, op: &'static str, a: Var, f: impl Fn(&Tensor) -> Tensor, node: Op) -> Result<Var> {
        self.check(op, a)?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a.0].value), nodes[a.0].requires_grad)
        };
        Ok(self.push(value, node, rg, false))
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        self.check(op, a)?;
        self.check(op, b)?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0], &nodes[b.0]);
            let shape = broadcast_shape(op, shape_of(&x.value), shape_of(&y.value))?;
            (
                zip_broadcast(&x.value, &y.value, shape, f),
                x.requires_grad || y.requires_grad,
            )
        };
        Ok(self.push(value, node, rg, false))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| x.mapv(|v| -v), Op::Neg(a))
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x.mapv(|v| c * v), Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("offset", a, |x| x.mapv(|v| v + c), Op::Offset(a))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0], &nodes[b.0]);
            if x.value.ncols() != y.value.nrows() {
                return Err(contract(
                    "matmul",
                    format!(
                        "inner dimensions differ: {}x{} times {}x{}",
                        x.value.nrows(),
                        x.value.ncols(),
                        y.value.nrows(),
                        y.value.ncols()
                    ),
                ));
            }
            (x.value.dot(&*y.value), x.requires_grad || y.requires_grad)
        };
        Ok(self.push(value, Op::MatMul(a, b), rg, false))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.unary(
            "transpose",
            a,
            |x| x.t().as_standard_layout().into_owned(),
            Op::Transpose(a),
        )
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.mapv(f64::exp), Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.mapv(f64::ln), Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, |x| x.mapv(f64::sqrt), Op::Sqrt(a))
    }

    pub fn powf(&self, a: Var, p: f64) -> Result<Var> {
        self.unary("powf", a, |x| x.mapv(|v| v.powf(p)), Op::Powf(a, p))
    }

    pub fn cos(&self, a: Var) -> Result<Var> {
        self.unary("cos", a, |x| x.mapv(f64::cos), Op::Cos(a))
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary("gelu", a, |x| x.mapv(gelu), Op::Gelu(a))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.mapv(f64::abs), Op::Abs(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        self.unary("sum", a, |x| Tensor::from_elem((1, 1), x.sum()), Op::Sum(a))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&self, a: Var) -> Result<Var> {
        self.check("mean", a)?;
        if self.value(a).is_empty() {
            return Err(contract("mean", "mean of an empty tensor"));
        }
        self.unary(
            "mean",
            a,
            |x| Tensor::from_elem((1, 1), x.sum() / x.len() as f64),
            Op::Mean(a),
        )
    }

    /// Sum along `axis`: 0 collapses rows (`1 × c`), 1 collapses columns (`r × 1`).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(contract("sum_axis", format!("axis {axis} out of range")));
        }
        self.unary(
            "sum_axis",
            a,
            |x| x.sum_axis(Axis(axis)).insert_axis(Axis(axis)),
            Op::SumAxis(a),
        )
    }

    /// Frobenius inner product of two equally shaped tensors.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        self.check("dot", a)?;
        self.check("dot", b)?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0], &nodes[b.0]);
            if shape_of(&x.value) != shape_of(&y.value) {
                return Err(contract(
                    "dot",
                    format!(
                        "shapes {:?} and {:?} differ",
                        shape_of(&x.value),
                        shape_of(&y.value)
                    ),
                ));
            }
            let s: f64 = Zip::from(&*x.value)
                .and(&*y.value)
                .fold(0.0, |acc, &p, &q| acc + p * q);
            (Tensor::from_elem((1, 1), s), x.requires_grad || y.requires_grad)
        };
        Ok(self.push(value, Op::Dot(a, b), rg, false))
    }

    /// Sort each row ascending. The permutation is frozen at forward time and
    /// reused by the backward pass; ties keep their original order.
    pub fn sort_rows(&self, a: Var) -> Result<Var> {
        self.check("sort_rows", a)?;
        let (input, rg) = {
            let nodes = self.nodes.borrow();
            (Rc::clone(&nodes[a.0].value), nodes[a.0].requires_grad)
        };
        if rg {
            let (sorted, perm) = sort_rows_with_perm(&input);
            Ok(self.push(sorted, Op::SortRows { input: a, perm }, true, false))
        } else {
            let sorted = sort_rows_values(&input);
            Ok(self.push(
                sorted,
                Op::SortRows {
                    input: a,
                    perm: Vec::new(),
                },
                false,
                false,
            ))
        }
    }

    fn extremum(&self, op: &'static str, a: Var, want_max: bool) -> Result<Var> {
        self.check(op, a)?;
        let (input, rg) = {
            let nodes = self.nodes.borrow();
            (Rc::clone(&nodes[a.0].value), nodes[a.0].requires_grad)
        };
        let data = input.as_slice().expect("standard layout");
        if data.is_empty() {
            return Err(contract(op, "reduction over an empty tensor"));
        }
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            let better = if want_max { v > data[best] } else { v < data[best] };
            if better {
                best = i;
            }
        }
        Ok(self.push(
            Tensor::from_elem((1, 1), data[best]),
            Op::Extremum { input: a, index: best },
            rg,
            false,
        ))
    }

    /// Largest entry; the adjoint goes to the first maximiser.
    pub fn max(&self, a: Var) -> Result<Var> {
        self.extremum("max", a, true)
    }

    pub fn min(&self, a: Var) -> Result<Var> {
        self.extremum("min", a, false)
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, a: Var, index: Vec<usize>, shape: (usize, usize)) -> Result<Var> {
        self.check("gather", a)?;
        if shape.0 * shape.1 != index.len() {
            return Err(contract(
                "gather",
                format!("{} indices cannot fill a {}x{} output", index.len(), shape.0, shape.1),
            ));
        }
        let (input, rg) = {
            let nodes = self.nodes.borrow();
            (Rc::clone(&nodes[a.0].value), nodes[a.0].requires_grad)
        };
        let src = input.as_slice().expect("standard layout");
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(contract(
                "gather",
                format!("index {bad} out of range for {} entries", src.len()),
            ));
        }
        let values: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_shape_vec(shape, values).expect("sized above");
        Ok(self.push(out, Op::Gather { input: a, index }, rg, false))
    }

    /// Rows `rows` of `a`, in the given order.
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(contract("select_rows", format!("row {bad} out of range for {r} rows")));
        }
        let index = rows
            .iter()
            .flat_map(|&i| (0..c).map(move |j| i * c + j))
            .collect();
        self.gather(a, index, (rows.len(), c))
    }

    /// Zeros of `shape` with `out.flat[index[i]] += a.flat[i]`.
    pub fn scatter(&self, a: Var, index: Vec<usize>, shape: (usize, usize)) -> Result<Var> {
        self.check("scatter", a)?;
        let (input, rg) = {
            let nodes = self.nodes.borrow();
            (Rc::clone(&nodes[a.0].value), nodes[a.0].requires_grad)
        };
        let src = input.as_slice().expect("standard layout");
        if src.len() != index.len() {
            return Err(contract(
                "scatter",
                format!("{} values but {} target indices", src.len(), index.len()),
            ));
        }
        let len = shape.0 * shape.1;
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(contract("scatter", format!("index {bad} out of range for {len} entries")));
        }
        let mut out = Tensor::zeros(shape);
        {
            let dst = out.as_slice_mut().expect("standard layout");
            for (&i, &v) in index.iter().zip(src) {
                dst[i] += v;
            }
        }
        Ok(self.push(out, Op::Scatter { input: a, index }, rg, false))
    }

    /// Eigenvalues of a symmetric matrix as a `1 × n` row, ascending. The
    /// adjoint uses `∂λᵢ/∂A = vᵢvᵢᵀ`, valid for simple eigenvalues.
    pub fn sym_eigvals(&self, a: Var) -> Result<Var> {
        self.check("sym_eigvals", a)?;
        let (input, rg) = {
            let nodes = self.nodes.borrow();
            (Rc::clone(&nodes[a.0].value), nodes[a.0].requires_grad)
        };
        if input.nrows() != input.ncols() || input.is_empty() {
            return Err(contract(
                "sym_eigvals",
                format!("expected a square matrix, got {}x{}", input.nrows(), input.ncols()),
            ));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(contract("sym_eigvals", "matrix has non-finite entries"));
        }
        let (values, vectors) = sym_eig_ascending(&input);
        Ok(self.push(values, Op::SymEigvals { input: a, vectors }, rg, false))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check("backward", loss)?;
        let nodes = self.nodes.borrow();
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| shape_of(&n.value)).collect();
        if shapes[loss.0] != (1, 1) {
            return Err(contract(
                "backward",
                format!(
                    "loss must be a scalar, got {}x{}",
                    shapes[loss.0].0, shapes[loss.0].1
                ),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            adj[loss.0] = Some(Tensor::ones((1, 1)));
        }
        let fault = SORT_ADJOINT_FAULT.load(Ordering::Relaxed);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let mut send = |v: Var, grad: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => *acc += &grad,
                    slot @ None => *slot = Some(grad),
                }
            };
            let wants = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf | Op::Detached => {}
                Op::Add(a, b) => {
                    if wants(*a) {
                        send(*a, reduce_to(g.clone(), shapes[a.0]));
                    }
                    if wants(*b) {
                        send(*b, reduce_to(g, shapes[b.0]));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        send(*a, reduce_to(g.clone(), shapes[a.0]));
                    }
                    if wants(*b) {
                        send(*b, reduce_to(-g, shapes[b.0]));
                    }
                }
                Op::Mul(a, b) => {
                    let shape = shapes[i];
                    if wants(*a) {
                        let ga = zip_broadcast(&g, val(*b), shape, |x, y| x * y);
                        send(*a, reduce_to(ga, shapes[a.0]));
                    }
                    if wants(*b) {
                        let gb = zip_broadcast(&g, val(*a), shape, |x, y| x * y);
                        send(*b, reduce_to(gb, shapes[b.0]));
                    }
                }
                Op::Div(a, b) => {
                    let shape = shapes[i];
                    if wants(*a) {
                        let ga = zip_broadcast(&g, val(*b), shape, |x, y| x / y);
                        send(*a, reduce_to(ga, shapes[a.0]));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -out / b
                        let q = zip_broadcast(&node.value, val(*b), shape, |o, y| -o / y);
                        let gb = &g * &q;
                        send(*b, reduce_to(gb, shapes[b.0]));
                    }
                }
                Op::Neg(a) => send(*a, -g),
                Op::Scale(a, c) => send(*a, g * *c),
                Op::Offset(a) => send(*a, g),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        send(*a, g.dot(&val(*b).t()));
                    }
                    if wants(*b) {
                        send(*b, val(*a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => send(*a, standard(g.reversed_axes())),
                Op::Exp(a) => send(*a, g * &*node.value),
                Op::Log(a) => send(*a, g / val(*a)),
                Op::Sqrt(a) => {
                    let d = node.value.mapv(|o| 0.5 / o);
                    send(*a, g * d)
                }
                Op::Powf(a, p) => {
                    let d = val(*a).mapv(|x| p * x.powf(p - 1.0));
                    send(*a, g * d)
                }
                Op::Cos(a) => {
                    let d = val(*a).mapv(|x| -x.sin());
                    send(*a, g * d)
                }
                Op::Gelu(a) => {
                    let d = val(*a).mapv(gelu_grad);
                    send(*a, g * d)
                }
                Op::Abs(a) => {
                    let d = val(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    send(*a, g * d)
                }
                Op::Sum(a) => send(*a, Tensor::from_elem(shapes[a.0], g[[0, 0]])),
                Op::Mean(a) => {
                    let n = (shapes[a.0].0 * shapes[a.0].1) as f64;
                    send(*a, Tensor::from_elem(shapes[a.0], g[[0, 0]] / n))
                }
                Op::SumAxis(a) => {
                    let full = g.broadcast(shapes[a.0]).expect("axis sum").to_owned();
                    send(*a, full)
                }
                Op::Dot(a, b) => {
                    let s = g[[0, 0]];
                    if wants(*a) {
                        send(*a, val(*b) * s);
                    }
                    if wants(*b) {
                        send(*b, val(*a) * s);
                    }
                }
                Op::SortRows { input, perm } => {
                    let (rows, cols) = shapes[input.0];
                    let mut ga = Tensor::zeros((rows, cols));
                    {
                        let dst = ga.as_slice_mut().expect("standard layout");
                        let gs = g.as_slice().expect("standard layout");
                        for r in 0..rows {
                            for k in 0..cols {
                                let src = if fault { k } else { perm[r * cols + k] as usize };
                                dst[r * cols + src] += gs[r * cols + k];
                            }
                        }
                    }
                    send(*input, ga)
                }
                Op::Extremum { input, index } => {
                    let mut ga = Tensor::zeros(shapes[input.0]);
                    ga.as_slice_mut().expect("standard layout")[*index] = g[[0, 0]];
                    send(*input, ga)
                }
                Op::Gather { input, index } => {
                    let mut ga = Tensor::zeros(shapes[input.0]);
                    {
                        let dst = ga.as_slice_mut().expect("standard layout");
                        for (&src, &gv) in index.iter().zip(g.iter()) {
                            dst[src] += gv;
                        }
                    }
                    send(*input, ga)
                }
                Op::Scatter { input, index } => {
                    let gs = g.as_slice().expect("standard layout");
                    let values: Vec<f64> = index.iter().map(|&i| gs[i]).collect();
                    let ga = Tensor::from_shape_vec(shapes[input.0], values).expect("sized");
                    send(*input, ga)
                }
                Op::SymEigvals { input, vectors } => {
                    // V diag(g) Vᵀ
                    let scaled = vectors * &g.row(0);
                    send(*input, scaled.dot(&vectors.t()))
                }
            }
        }
        // Only leaf adjoints are kept.
        for (i, slot) in adj.iter_mut().enumerate() {
            if !matches!(nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads: adj, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn forward_values_of_basic_primitives() {
        let t = Tape::new();
        let x = t.scalar(2.0);
        let y = t.scalar(3.0);
        assert_eq!(t.item(t.add(x, y).unwrap()).unwrap(), 5.0);
        let zero = t.scalar(0.0);
        assert_eq!(t.item(t.exp(zero).unwrap()).unwrap(), 1.0);
        let eye = t.constant(Tensor::eye(3));
        let v = t.constant(array![[1.0], [2.0], [3.0]]);
        let out = t.matmul(eye, v).unwrap();
        assert_eq!(*t.value(out), array![[1.0], [2.0], [3.0]]);
    }

    #[test]
    fn detach_freezes_one_factor() {
        let t = Tape::new();
        let x = t.param_scalar(3.0);
        let d = t.detach(x);
        let y = t.mul(x, d).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x)[[0, 0]], 3.0);
        assert!(t.is_detached(d));
        assert_eq!(*t.value(d), *t.value(x));
    }

    #[test]
    fn detached_output_has_no_gradient() {
        let t = Tape::new();
        let x = t.param_scalar(1.7);
        let d = t.detach(x);
        let s = t.sum(d).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x)[[0, 0]], 0.0);
        let dd = t.detach(d);
        assert_eq!(*t.value(dd), *t.value(x));
        assert!(!t.requires_grad(dd));
    }

    #[test]
    fn square_gradient() {
        let t = Tape::new();
        let x = t.param_scalar(3.0);
        let y = t.square(x).unwrap();
        assert_eq!(t.backward(y).unwrap().wrt(x)[[0, 0]], 6.0);
    }

    #[test]
    fn sort_routes_adjoint_through_permutation() {
        let t = Tape::new();
        let v = t.param(array![[2.0, 1.0]]);
        let w = t.constant(array![[10.0, 20.0]]);
        let s = t.sort_rows(v).unwrap();
        let loss = t.dot(s, w).unwrap();
        let g = t.backward(loss).unwrap().wrt(v);
        assert_eq!(g, array![[20.0, 10.0]]);

        // finite-difference confirmation, h = 1e-6
        let f = |a: f64, b: f64| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            lo * 10.0 + hi * 20.0
        };
        let d0 = fd(|x| f(x, 1.0), 2.0, 1e-6);
        let d1 = fd(|x| f(2.0, x), 1.0, 1e-6);
        assert!((d0 - 20.0).abs() < 1e-6 && (d1 - 10.0).abs() < 1e-6);
    }

    #[test]
    fn sort_is_stable_on_ties() {
        let t = Tape::new();
        let v = t.param(array![[1.0, 1.0, 0.0]]);
        let w = t.constant(array![[1.0, 2.0, 3.0]]);
        let s = t.sort_rows(v).unwrap();
        let loss = t.dot(s, w).unwrap();
        // sorted order: index 2, then 0, then 1
        assert_eq!(t.backward(loss).unwrap().wrt(v), array![[2.0, 3.0, 1.0]]);
    }

    #[test]
    fn mse_gradient_vanishes_at_equality() {
        let t = Tape::new();
        let a = t.param(array![[0.3, -1.2, 4.0]]);
        let b = t.constant(array![[0.3, -1.2, 4.0]]);
        let d = t.sub(a, b).unwrap();
        let sq = t.square(d).unwrap();
        let loss = t.mean(sq).unwrap();
        assert!(t.backward(loss).unwrap().wrt(a).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let t = Tape::new();
        let a = t.param(array![[1.0, 2.0]]);
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn shape_mismatch_names_op() {
        let t = Tape::new();
        let a = t.param(Tensor::zeros((2, 3)));
        let b = t.param(Tensor::zeros((3, 2)));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("2x3"), "{err}");
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn broadcast_adjoints_are_summed() {
        let t = Tape::new();
        let m = t.param(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let row = t.param(array![[10.0, 20.0]]);
        let col = t.param(array![[1.0], [2.0], [3.0]]);
        let s = t.add(m, row).unwrap();
        let p = t.mul(s, col).unwrap();
        let loss = t.sum(p).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(row), array![[6.0, 6.0]]);
        assert_eq!(g.wrt(col), array![[33.0], [37.0], [41.0]]);
    }

    #[test]
    fn eigenvalue_adjoint_matches_outer_product() {
        let t = Tape::new();
        let a = t.param(array![[4.0, 0.0], [0.0, 1.0]]);
        let e = t.sym_eigvals(a).unwrap();
        assert_eq!(*t.value(e), array![[1.0, 4.0]]);
        let top = t.max(e).unwrap();
        let g = t.backward(top).unwrap().wrt(a);
        assert!((g[[0, 0]] - 1.0).abs() < 1e-12 && g[[1, 1]].abs() < 1e-12);
    }

    #[test]
    fn scatter_gather_are_adjoint() {
        let t = Tape::new();
        let x = t.param(array![[1.0, 2.0, 3.0]]);
        let s = t.scatter(x, vec![0, 4, 8], (3, 3)).unwrap();
        assert_eq!(t.item(t.sum(s).unwrap()).unwrap(), 6.0);
        let w = t.constant(Tensor::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64));
        let loss = t.dot(s, w).unwrap();
        assert_eq!(t.backward(loss).unwrap().wrt(x), array![[0.0, 4.0, 8.0]]);

        let t = Tape::new();
        let x = t.param(array![[1.0, 2.0], [3.0, 4.0]]);
        let rows = t.select_rows(x, &[1, 1, 0]).unwrap();
        let loss = t.sum(rows).unwrap();
        assert_eq!(t.backward(loss).unwrap().wrt(x), array![[1.0, 1.0], [2.0, 2.0]]);
    }

    #[test]
    fn gelu_matches_erf_definition() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            assert!((fd(gelu, x, h) - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
