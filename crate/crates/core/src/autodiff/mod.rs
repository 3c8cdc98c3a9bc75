//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar root walks the record once in reverse and
//! returns the gradient of the root with respect to every recorded node.
//! Values are checked for finiteness after each primitive, so a NaN or an
//! infinity stops the computation with an error naming the primitive instead
//! of leaking into the loss.

mod check;
pub(crate) mod linalg;
mod tensor;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

pub use check::{finite_difference_check, gradient_suite, PrimitiveReport};
pub use tensor::Tensor;

use crate::error::{shape_err, Error, Result};
use linalg::MatRef;

/// Default relative jitter added to matrices before Cholesky factorization.
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Largest relative jitter tried before a factorization is declared failed.
pub const MAX_JITTER: f64 = 1e-2;

/// Every differentiable primitive the tape knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    Sum,
    SumAxis,
    Mean,
    Slice,
    Concat,
    Broadcast,
    Reshape,
    Exp,
    Log,
    Softplus,
    Square,
    Sqrt,
    ClampMin,
    LogSumExp,
    Softmax,
    Cholesky,
    TriSolve,
    Diag,
    DiagEmbed,
    SqDist,
}

impl Primitive {
    pub const ALL: [Primitive; 28] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Sum,
        Primitive::SumAxis,
        Primitive::Mean,
        Primitive::Slice,
        Primitive::Concat,
        Primitive::Broadcast,
        Primitive::Reshape,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Softplus,
        Primitive::Square,
        Primitive::Sqrt,
        Primitive::ClampMin,
        Primitive::LogSumExp,
        Primitive::Softmax,
        Primitive::Cholesky,
        Primitive::TriSolve,
        Primitive::Diag,
        Primitive::DiagEmbed,
        Primitive::SqDist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Sum => "sum",
            Primitive::SumAxis => "sum_axis",
            Primitive::Mean => "mean",
            Primitive::Slice => "slice",
            Primitive::Concat => "concat",
            Primitive::Broadcast => "broadcast",
            Primitive::Reshape => "reshape",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softplus => "softplus",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::ClampMin => "clamp_min",
            Primitive::LogSumExp => "logsumexp",
            Primitive::Softmax => "softmax",
            Primitive::Cholesky => "cholesky",
            Primitive::TriSolve => "triangular_solve",
            Primitive::Diag => "diag",
            Primitive::DiagEmbed => "diag_embed",
            Primitive::SqDist => "sqdist",
        }
    }

    pub fn from_name(name: &str) -> Option<Primitive> {
        Primitive::ALL.iter().copied().find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static GRADIENT_FAULT: Cell<Option<Primitive>> = const { Cell::new(None) };
}

/// Test hook: scales the backward pass of `primitive` by 1.5 on the calling
/// thread so gradient checks can be shown to catch a broken rule. `None`
/// restores correct rules.
pub fn inject_gradient_fault(primitive: Option<Primitive>) {
    GRADIENT_FAULT.with(|f| f.set(primitive));
}

fn fault_factor(p: Primitive) -> f64 {
    if GRADIENT_FAULT.with(Cell::get) == Some(p) {
        1.5
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Mean(usize),
    Slice { src: usize, axis: usize, start: usize },
    Concat { srcs: Vec<usize>, axis: usize },
    Broadcast(usize),
    Reshape(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Square(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    LogSumExp(usize, usize),
    Softmax(usize, usize),
    Cholesky { src: usize, jitter_factor: f64 },
    TriSolve { t: usize, b: usize, upper: bool, trans: bool },
    Diag(usize),
    DiagEmbed(usize),
    SqDist(usize, usize),
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf | Op::Constant => return None,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Div(..) => Primitive::Div,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(..) => Primitive::Transpose,
            Op::Sum(..) => Primitive::Sum,
            Op::SumAxis(..) => Primitive::SumAxis,
            Op::Mean(..) => Primitive::Mean,
            Op::Slice { .. } => Primitive::Slice,
            Op::Concat { .. } => Primitive::Concat,
            Op::Broadcast(..) => Primitive::Broadcast,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Exp(..) => Primitive::Exp,
            Op::Log(..) => Primitive::Log,
            Op::Softplus(..) => Primitive::Softplus,
            Op::Square(..) => Primitive::Square,
            Op::Sqrt(..) => Primitive::Sqrt,
            Op::ClampMin(..) => Primitive::ClampMin,
            Op::LogSumExp(..) => Primitive::LogSumExp,
            Op::Softmax(..) => Primitive::Softmax,
            Op::Cholesky { .. } => Primitive::Cholesky,
            Op::TriSolve { .. } => Primitive::TriSolve,
            Op::Diag(..) => Primitive::Diag,
            Op::DiagEmbed(..) => Primitive::DiagEmbed,
            Op::SqDist(..) => Primitive::SqDist,
        })
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive applications. Single-threaded; use one tape per
/// thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros if `var` was not
    /// reached.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs_of(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn check<'t>(&'t self, v: Var<'t>) -> Result<usize> {
        if std::ptr::eq(self, v.tape) {
            Ok(v.id)
        } else {
            Err(Error::ForeignVar)
        }
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let ids = parts
            .iter()
            .map(|p| self.check(*p))
            .collect::<Result<Vec<_>>>()?;
        let vals: Vec<Rc<Tensor>> = ids.iter().map(|&i| self.value(i)).collect();
        let first = vals[0].shape().to_vec();
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return shape_err("concat", format!("{:?} vs {:?}", s, first));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { srcs: ids, axis },
            "concat",
        )
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let root_id = self.check(root)?;
        let nodes = self.nodes.borrow();
        let rv = &nodes[root_id].value;
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root_id + 1];
        grads[root_id] = Some(Tensor::from_parts(rv.shape().to_vec(), vec![1.0]));
        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let factor = node.op.primitive().map_or(1.0, fault_factor);
            let g = if factor != 1.0 { g.map(|x| x * factor) } else { g };
            backward_op(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn inputs_of(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MatMul(a, b)
        | Op::SqDist(a, b) => vec![*a, *b],
        Op::TriSolve { t, b, .. } => vec![*t, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::SumAxis(a, _)
        | Op::Mean(a)
        | Op::Broadcast(a)
        | Op::Reshape(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Softplus(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::ClampMin(a, _)
        | Op::LogSumExp(a, _)
        | Op::Softmax(a, _)
        | Op::Diag(a)
        | Op::DiagEmbed(a) => vec![*a],
        Op::Slice { src, .. } => vec![*src],
        Op::Cholesky { src, .. } => vec![*src],
        Op::Concat { srcs, .. } => srcs.clone(),
    }
}

/// (outer, axis length, inner) decomposition of a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn backward_op(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, g.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, zip_map(g, val(*b), |x, y| x * y));
            }
            if needs(*b) {
                accumulate(grads, *b, zip_map(g, val(*a), |x, y| x * y));
            }
        }
        Op::Div(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, zip_map(g, val(*b), |x, y| x / y));
            }
            if needs(*b) {
                let t = zip_map(g, out, |x, o| x * o);
                accumulate(grads, *b, zip_map(&t, val(*b), |x, y| -x / y));
            }
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
        Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                linalg::gemm(
                    MatRef::new(g.data(), m, n, false),
                    MatRef::new(bv.data(), n, k, true),
                    &mut ga,
                    0.0,
                );
                accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                linalg::gemm(
                    MatRef::new(av.data(), k, m, true),
                    MatRef::new(g.data(), m, n, false),
                    &mut gb,
                    0.0,
                );
                accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
            }
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transposed()),
        Op::Sum(a) => {
            let s = val(*a).shape().to_vec();
            accumulate(grads, *a, Tensor::full(&s, g.item()));
        }
        Op::Mean(a) => {
            let s = val(*a).shape().to_vec();
            let n = val(*a).len() as f64;
            accumulate(grads, *a, Tensor::full(&s, g.item() / n));
        }
        Op::SumAxis(a, axis) => {
            let s = val(*a).shape().to_vec();
            let (outer, len, inner) = split_axis(&s, *axis);
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut out[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, *a, Tensor::from_parts(s, out));
        }
        Op::Slice { src, axis, start } => {
            let s = val(*src).shape().to_vec();
            let (outer, len, inner) = split_axis(&s, *axis);
            let sl = g.shape()[*axis];
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                out[dst..dst + sl * inner]
                    .copy_from_slice(&g.data()[o * sl * inner..(o + 1) * sl * inner]);
            }
            accumulate(grads, *src, Tensor::from_parts(s, out));
        }
        Op::Concat { srcs, axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            for &s in srcs {
                let shape = val(s).shape().to_vec();
                let len = shape[*axis];
                if needs(s) {
                    let mut out = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        out.extend_from_slice(&g.data()[from..from + len * inner]);
                    }
                    accumulate(grads, s, Tensor::from_parts(shape, out));
                }
                offset += len;
            }
        }
        Op::Broadcast(a) => {
            let src_shape = val(*a).shape().to_vec();
            let map = broadcast_index_map(&src_shape, g.shape());
            let mut out = vec![0.0; val(*a).len()];
            for (gi, &si) in map.iter().enumerate() {
                out[si] += g.data()[gi];
            }
            accumulate(grads, *a, Tensor::from_parts(src_shape, out));
        }
        Op::Reshape(a) => {
            let s = val(*a).shape().to_vec();
            accumulate(grads, *a, Tensor::from_parts(s, g.data().to_vec()));
        }
        Op::Exp(a) => accumulate(grads, *a, zip_map(g, out, |x, o| x * o)),
        Op::Log(a) => accumulate(grads, *a, zip_map(g, val(*a), |x, v| x / v)),
        Op::Softplus(a) => accumulate(grads, *a, zip_map(g, val(*a), |x, v| x * sigmoid(v))),
        Op::Square(a) => accumulate(grads, *a, zip_map(g, val(*a), |x, v| 2.0 * x * v)),
        Op::Sqrt(a) => accumulate(grads, *a, zip_map(g, out, |x, o| x / (2.0 * o))),
        Op::ClampMin(a, c) => {
            let c = *c;
            accumulate(
                grads,
                *a,
                zip_map(g, val(*a), |x, v| if v > c { x } else { 0.0 }),
            )
        }
        Op::LogSumExp(a, axis) => {
            let x = val(*a);
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut res = vec![0.0; x.len()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let r = o * inner + i;
                        let idx = (o * len + l) * inner + i;
                        res[idx] = g.data()[r] * (x.data()[idx] - out.data()[r]).exp();
                    }
                }
            }
            accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), res));
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let mut res = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut dot = 0.0;
                    for l in 0..len {
                        let idx = (o * len + l) * inner + i;
                        dot += g.data()[idx] * out.data()[idx];
                    }
                    for l in 0..len {
                        let idx = (o * len + l) * inner + i;
                        res[idx] = out.data()[idx] * (g.data()[idx] - dot);
                    }
                }
            }
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), res));
        }
        Op::Cholesky { src, jitter_factor } => {
            let ga = cholesky_backward(out, g, *jitter_factor);
            accumulate(grads, *src, ga);
        }
        Op::TriSolve { t, b, upper, trans } => {
            let tv = val(*t);
            let n = tv.rows();
            let k = out.len() / n.max(1);
            // gradient w.r.t. the right-hand side: op(T)^-T g
            let mut gb = g.data().to_vec();
            linalg::solve_triangular(tv.data(), n, *upper, !*trans, &mut gb, k);
            if needs(*t) {
                // d op(T) = -gb X^T, mapped back onto the stored triangle
                let mut ge = vec![0.0; n * n];
                linalg::gemm_into(
                    -1.0,
                    MatRef::new(&gb, n, k, false),
                    MatRef::new(out.data(), k, n, true),
                    0.0,
                    &mut ge,
                    n,
                );
                let mut gt = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let keep = if *upper { j >= i } else { j <= i };
                        if keep {
                            gt[i * n + j] = if *trans { ge[j * n + i] } else { ge[i * n + j] };
                        }
                    }
                }
                accumulate(grads, *t, Tensor::from_parts(vec![n, n], gt));
            }
            if needs(*b) {
                let s = val(*b).shape().to_vec();
                accumulate(grads, *b, Tensor::from_parts(s, gb));
            }
        }
        Op::Diag(a) => {
            let n = g.len();
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                m[i * n + i] = g.data()[i];
            }
            accumulate(grads, *a, Tensor::from_parts(vec![n, n], m));
        }
        Op::DiagEmbed(a) => {
            let n = g.rows();
            let d = (0..n).map(|i| g.data()[i * n + i]).collect();
            accumulate(grads, *a, Tensor::from_parts(vec![n], d));
        }
        Op::SqDist(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, m, d) = (av.rows(), bv.rows(), av.cols());
            if needs(*a) {
                let mut ga = vec![0.0; n * d];
                linalg::gemm_into(
                    -2.0,
                    MatRef::new(g.data(), n, m, false),
                    MatRef::new(bv.data(), m, d, false),
                    0.0,
                    &mut ga,
                    d,
                );
                for i in 0..n {
                    let rs: f64 = g.data()[i * m..(i + 1) * m].iter().sum();
                    for k in 0..d {
                        ga[i * d + k] += 2.0 * rs * av.data()[i * d + k];
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(vec![n, d], ga));
            }
            if needs(*b) {
                let mut gb = vec![0.0; m * d];
                linalg::gemm_into(
                    -2.0,
                    MatRef::new(g.data(), m, n, true),
                    MatRef::new(av.data(), n, d, false),
                    0.0,
                    &mut gb,
                    d,
                );
                let mut cs = vec![0.0; m];
                for i in 0..n {
                    for (j, c) in cs.iter_mut().enumerate() {
                        *c += g.data()[i * m + j];
                    }
                }
                for j in 0..m {
                    for k in 0..d {
                        gb[j * d + k] += 2.0 * cs[j] * bv.data()[j * d + k];
                    }
                }
                accumulate(grads, *b, Tensor::from_parts(vec![m, d], gb));
            }
        }
    }
    Ok(())
}

/// Gradient of the Cholesky factor `l` of `sym(A) + c * mean(diag A) * I`
/// with respect to `A`, given the factor cotangent `gl`.
fn cholesky_backward(l: &Tensor, gl: &Tensor, jitter_factor: f64) -> Tensor {
    let n = l.rows();
    // phi(L^T gL): lower triangle with halved diagonal
    let mut p = vec![0.0; n * n];
    linalg::gemm(
        MatRef::new(l.data(), n, n, true),
        MatRef::new(gl.data(), n, n, false),
        &mut p,
        0.0,
    );
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p[i * n + j] = 0.0;
            } else if j == i {
                p[i * n + j] *= 0.5;
            }
        }
    }
    // S = L^-T P L^-1: first Y = L^-T P, then S^T = L^-T Y^T
    linalg::solve_triangular(l.data(), n, false, true, &mut p, n);
    let mut yt = Tensor::from_parts(vec![n, n], p).transposed().into_data();
    linalg::solve_triangular(l.data(), n, false, true, &mut yt, n);
    // yt now holds S^T; symmetrize
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = 0.5 * (yt[i * n + j] + yt[j * n + i]);
        }
    }
    if jitter_factor != 0.0 {
        let tr: f64 = (0..n).map(|i| s[i * n + i]).sum();
        let add = jitter_factor * tr / n as f64;
        for i in 0..n {
            s[i * n + i] += add;
        }
    }
    Tensor::from_parts(vec![n, n], s)
}

/// For every flat index of `to`, the flat index of `from` it reads.
fn broadcast_index_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let offset = to.len() - from.len();
    let mut from_strides = vec![0usize; to.len()];
    let mut stride = 1;
    for d in (0..from.len()).rev() {
        from_strides[d + offset] = if from[d] == 1 { 0 } else { stride };
        stride *= from[d];
    }
    let total: usize = to.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&from_strides).map(|(i, s)| i * s).sum());
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// The matrix is symmetrized, then `j * I` is added with
/// `j = base_jitter * mean(diag A)` (or `base_jitter` when the diagonal mean
/// is not positive). Each failure multiplies `j` by ten, up to
/// `MAX_JITTER * mean(diag A)`. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(a: &Tensor, base_jitter: f64, context: &str) -> Result<(Tensor, f64)> {
    let (l, jitter, _) = cholesky_jitter_impl(a, base_jitter, context)?;
    Ok((l, jitter))
}

fn cholesky_jitter_impl(a: &Tensor, base_jitter: f64, context: &str) -> Result<(Tensor, f64, f64)> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return shape_err("cholesky", format!("not square: {:?}", a.shape()));
    }
    let n = a.rows();
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (a.at(i, j) + a.at(j, i));
        }
    }
    let mean_diag = if n == 0 {
        0.0
    } else {
        (0..n).map(|i| sym[i * n + i]).sum::<f64>() / n as f64
    };
    let diag_scaled = mean_diag > 0.0 && mean_diag.is_finite();
    let scale = if diag_scaled { mean_diag } else { 1.0 };
    let mut rel = base_jitter;
    loop {
        let j = rel * scale;
        let mut m = sym.clone();
        for i in 0..n {
            m[i * n + i] += j;
        }
        if let Some(l) = linalg::cholesky(&m, n) {
            let factor = if diag_scaled { rel } else { 0.0 };
            return Ok((Tensor::from_parts(vec![n, n], l), j, factor));
        }
        if rel <= 0.0 || rel >= MAX_JITTER * (1.0 - 1e-12) {
            return Err(Error::Cholesky {
                context: context.to_string(),
                jitter: j,
            });
        }
        rel = (rel * 10.0).min(MAX_JITTER);
    }
}

fn elementwise<'t>(a: Var<'t>, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var<'t>> {
    let v = a.tape.value(a.id).map(f);
    a.tape.push(v, op, name)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, usize)> {
        let b = self.tape.check(other)?;
        let (x, y) = (self.value(), other.value());
        if x.shape() != y.shape() {
            return shape_err(name, format!("{:?} vs {:?}", x.shape(), y.shape()));
        }
        Ok((zip_map(&x, &y, f), b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, b) = self.binary(other, "add", |x, y| x + y)?;
        self.tape.push(v, Op::Add(self.id, b), "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, b) = self.binary(other, "sub", |x, y| x - y)?;
        self.tape.push(v, Op::Sub(self.id, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, b) = self.binary(other, "mul", |x, y| x * y)?;
        self.tape.push(v, Op::Mul(self.id, b), "mul")
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, b) = self.binary(other, "div", |x, y| x / y)?;
        self.tape.push(v, Op::Div(self.id, b), "div")
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        elementwise(self, |x| x * c, Op::Scale(self.id, c), "scale")
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        elementwise(self, |x| x + c, Op::AddScalar(self.id), "add_scalar")
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let b = self.tape.check(other)?;
        let v = self.value().matmul(&other.value())?;
        self.tape.push(v, Op::MatMul(self.id, b), "matmul")
    }

    /// Matrix transpose (rank 2).
    pub fn t(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return shape_err("transpose", format!("rank {}", x.rank()));
        }
        self.tape.push(x.transposed(), Op::Transpose(self.id), "transpose")
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s: f64 = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return shape_err("mean", "empty tensor");
        }
        let s: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), "mean")
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return shape_err("sum_axis", format!("axis {axis} for {:?}", x.shape()));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.tape.push(
            Tensor::from_parts(shape, out),
            Op::SumAxis(self.id, axis),
            "sum_axis",
        )
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return shape_err(
                "slice",
                format!("{start}..{} on axis {axis} of {:?}", start + len, x.shape()),
            );
        }
        let (outer, full, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            "slice",
        )
    }

    /// Expands size-one (or missing leading) dimensions to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let from = x.shape();
        if from.len() > shape.len()
            || from
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .any(|(&f, &t)| f != t && f != 1)
        {
            return shape_err("broadcast", format!("{:?} -> {:?}", from, shape));
        }
        let map = broadcast_index_map(from, shape);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        self.tape.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Broadcast(self.id),
            "broadcast",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.len() {
            return shape_err("reshape", format!("{:?} -> {:?}", x.shape(), shape));
        }
        self.tape.push(
            Tensor::from_parts(shape.to_vec(), x.data().to_vec()),
            Op::Reshape(self.id),
            "reshape",
        )
    }

    pub fn exp(self) -> Result<Var<'t>> {
        elementwise(self, f64::exp, Op::Exp(self.id), "exp")
    }

    pub fn log(self) -> Result<Var<'t>> {
        elementwise(self, f64::ln, Op::Log(self.id), "log")
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        elementwise(self, softplus, Op::Softplus(self.id), "softplus")
    }

    pub fn square(self) -> Result<Var<'t>> {
        elementwise(self, |x| x * x, Op::Square(self.id), "square")
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        elementwise(self, f64::sqrt, Op::Sqrt(self.id), "sqrt")
    }

    pub fn clamp_min(self, c: f64) -> Result<Var<'t>> {
        elementwise(self, |x| x.max(c), Op::ClampMin(self.id, c), "clamp_min")
    }

    /// Max-shifted `log(sum(exp(x)))` along `axis`, removing it.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || x.shape()[axis] == 0 {
            return shape_err("logsumexp", format!("axis {axis} for {:?}", x.shape()));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| x.data()[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|l| (at(l) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.tape.push(
            Tensor::from_parts(shape, out),
            Op::LogSumExp(self.id, axis),
            "logsumexp",
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return shape_err("softmax", format!("axis {axis} for {:?}", x.shape()));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x.data()[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (x.data()[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[idx(l)] /= s;
                }
            }
        }
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax(self.id, axis),
            "softmax",
        )
    }

    /// Lower Cholesky factor under the jitter policy of
    /// [`cholesky_with_jitter`]; `context` names the matrix in errors.
    pub fn cholesky(self, base_jitter: f64, context: &str) -> Result<Var<'t>> {
        let (l, _, jitter_factor) = cholesky_jitter_impl(&self.value(), base_jitter, context)?;
        self.tape.push(
            l,
            Op::Cholesky {
                src: self.id,
                jitter_factor,
            },
            "cholesky",
        )
    }

    /// Solves `op(self) X = b` for triangular `self` (`upper` names the
    /// stored triangle, `trans` selects `op = transpose`). `b` is a vector
    /// or a matrix with matching leading dimension.
    pub fn trisolve(self, b: Var<'t>, upper: bool, trans: bool) -> Result<Var<'t>> {
        let bid = self.tape.check(b)?;
        let t = self.value();
        let bv = b.value();
        if t.rank() != 2 || t.rows() != t.cols() || bv.rank() == 0 || bv.shape()[0] != t.rows() {
            return shape_err(
                "triangular_solve",
                format!("{:?} \\ {:?}", t.shape(), bv.shape()),
            );
        }
        let n = t.rows();
        let k = bv.len() / n.max(1);
        let mut x = bv.data().to_vec();
        linalg::solve_triangular(t.data(), n, upper, trans, &mut x, k);
        self.tape.push(
            Tensor::from_parts(bv.shape().to_vec(), x),
            Op::TriSolve {
                t: self.id,
                b: bid,
                upper,
                trans,
            },
            "triangular_solve",
        )
    }

    pub fn diag(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || x.rows() != x.cols() {
            return shape_err("diag", format!("{:?}", x.shape()));
        }
        let n = x.rows();
        let d = (0..n).map(|i| x.at(i, i)).collect();
        self.tape.push(Tensor::from_parts(vec![n], d), Op::Diag(self.id), "diag")
    }

    pub fn diag_embed(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 1 {
            return shape_err("diag_embed", format!("{:?}", x.shape()));
        }
        let n = x.len();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = x.data()[i];
        }
        self.tape.push(
            Tensor::from_parts(vec![n, n], m),
            Op::DiagEmbed(self.id),
            "diag_embed",
        )
    }

    /// Pairwise squared Euclidean distances between the rows of `self`
    /// (`N x D`) and `other` (`M x D`).
    pub fn sqdist(self, other: Var<'t>) -> Result<Var<'t>> {
        let b = self.tape.check(other)?;
        let (x, y) = (self.value(), other.value());
        if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
            return shape_err("sqdist", format!("{:?} vs {:?}", x.shape(), y.shape()));
        }
        let (n, m, d) = (x.rows(), y.rows(), x.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = x.row(i);
            let row = &mut out[i * m..(i + 1) * m];
            for (j, o) in row.iter_mut().enumerate() {
                let yj = &y.data()[j * d..(j + 1) * d];
                *o = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        self.tape.push(
            Tensor::from_parts(vec![n, m], out),
            Op::SqDist(self.id, b),
            "sqdist",
        )
    }
}

#[cfg(test)]
mod tests;
