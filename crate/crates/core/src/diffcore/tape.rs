use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{Shape, Tensor};
use super::TapeError;

/// Reference to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Id(u32);

impl Id {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Primitive operations the tape can record. Operand ids always point to
/// earlier nodes, so the tape is topologically ordered by construction.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Min(Id, Id),
    Max(Id, Id),
    Neg(Id),
    Relu(Id),
    Abs(Id),
    Sin(Id),
    Cos(Id),
    /// v * |v|, smooth at the origin with derivative 2|v|.
    SignedSquare(Id),
    /// Scalar times tensor.
    Scale(Id, Id),
    ClampConst(Id, f64, f64),
    MatMul(Id, Id),
    MatVec(Id, Id),
    /// Scale column j of a matrix by the j-th entry of a vector.
    MulCols(Id, Id),
    /// Place column j of the operand at column idx[j] of an (rows x width) result.
    ScatterCols(Id, Arc<[usize]>, usize),
    SliceCols(Id, usize, usize),
    /// Gather vector entries.
    Select(Id, Arc<[usize]>),
    /// Single vector entry as a scalar.
    Get(Id, usize),
    Concat(Arc<[Id]>),
    Sum(Id),
    Prod(Id),
    Norm2(Id),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Min(..) => "min",
            Op::Max(..) => "max",
            Op::Neg(..) => "neg",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::SignedSquare(..) => "signed_square",
            Op::Scale(..) => "scale",
            Op::ClampConst(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::MulCols(..) => "mul_cols",
            Op::ScatterCols(..) => "scatter_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Select(..) => "select",
            Op::Get(..) => "get",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Prod(..) => "prod",
            Op::Norm2(..) => "norm2",
        }
    }
}

struct Node {
    op: Op,
    shape: Shape,
    off: usize,
    is_param: bool,
}

/// Gradients of a scalar output with respect to parameter leaves.
#[derive(Debug, Default)]
pub struct GradMap {
    grads: HashMap<Id, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: Id) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Id, &Tensor)> {
        self.grads.iter()
    }
}

/// Reverse-mode autodiff tape with eager forward evaluation.
///
/// Values live in a flat arena so a cleared tape reuses its allocations; a
/// single tape is strictly single-threaded while distinct tapes are
/// independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop all nodes but keep allocated capacity.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: Id) -> Shape {
        self.nodes[id.index()].shape
    }

    pub fn value(&self, id: Id) -> &[f64] {
        let n = &self.nodes[id.index()];
        &self.vals[n.off..n.off + n.shape.numel()]
    }

    pub fn scalar_value(&self, id: Id) -> f64 {
        self.value(id)[0]
    }

    pub fn tensor(&self, id: Id) -> Tensor {
        let n = &self.nodes[id.index()];
        Tensor::new(n.shape.dims().to_vec(), self.value(id).to_vec())
            .expect("node shape is consistent")
    }

    pub fn is_param(&self, id: Id) -> bool {
        self.nodes[id.index()].is_param
    }

    /// Insert a leaf tensor. Parameter leaves receive gradient entries from
    /// [`Tape::backward`]; plain leaves are treated as constants.
    pub fn leaf(&mut self, t: &Tensor, is_param: bool) -> Result<Id, TapeError> {
        if !t.is_finite() {
            return Err(TapeError::NonFinite { op: "leaf" });
        }
        let shape = t.tape_shape();
        let off = self.vals.len();
        self.vals.extend_from_slice(t.values());
        self.nodes.push(Node { op: Op::Leaf, shape, off, is_param });
        Ok(Id((self.nodes.len() - 1) as u32))
    }

    pub fn konst(&mut self, v: f64) -> Id {
        self.leaf(&Tensor::scalar(v), false).expect("finite scalar")
    }

    pub fn konst_vec(&mut self, v: &[f64]) -> Result<Id, TapeError> {
        self.leaf(&Tensor::vector(v.to_vec()), false)
    }

    pub fn zeros(&mut self, shape: Shape) -> Id {
        let off = self.vals.len();
        self.vals.resize(off + shape.numel(), 0.0);
        self.nodes.push(Node { op: Op::Leaf, shape, off, is_param: false });
        Id((self.nodes.len() - 1) as u32)
    }

    /// Constant identity matrix.
    pub fn identity(&mut self, n: usize) -> Id {
        let shape = Shape::matrix(n, n);
        let off = self.vals.len();
        self.vals.resize(off + n * n, 0.0);
        for i in 0..n {
            self.vals[off + i * n + i] = 1.0;
        }
        self.nodes.push(Node { op: Op::Leaf, shape, off, is_param: false });
        Id((self.nodes.len() - 1) as u32)
    }

    /// Copy a value back onto the tape as a constant leaf, cutting the
    /// gradient path through it.
    pub fn detach(&mut self, id: Id) -> Id {
        let shape = self.shape(id);
        let off = self.vals.len();
        let src = self.nodes[id.index()].off;
        self.vals.extend_from_within(src..src + shape.numel());
        self.nodes.push(Node { op: Op::Leaf, shape, off, is_param: false });
        Id((self.nodes.len() - 1) as u32)
    }

    fn check_id(&self, id: Id, op: &Op) -> Result<(), TapeError> {
        if id.index() >= self.nodes.len() {
            return Err(TapeError::UnknownId { op: op.name() });
        }
        Ok(())
    }

    /// Record one primitive: validates operand shapes, eagerly computes the
    /// forward value, and appends the node.
    pub fn record(&mut self, op: Op) -> Result<Id, TapeError> {
        let shape = self.validate(&op)?;
        let off = self.vals.len();
        self.vals.resize(off + shape.numel(), 0.0);
        self.forward(&op, off, shape);
        self.nodes.push(Node { op, shape, off, is_param: false });
        Ok(Id((self.nodes.len() - 1) as u32))
    }

    fn validate(&self, op: &Op) -> Result<Shape, TapeError> {
        use Op::*;
        let same = |a: Id, b: Id| -> Result<Shape, TapeError> {
            let (sa, sb) = (self.shape(a), self.shape(b));
            if sa != sb {
                return Err(TapeError::ShapeMismatch {
                    op: op.name(),
                    lhs: format!("{sa:?}"),
                    rhs: format!("{sb:?}"),
                });
            }
            Ok(sa)
        };
        match op {
            Leaf => unreachable!("leaves are inserted via Tape::leaf"),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Min(a, b) | Max(a, b) => {
                self.check_id(*a, op)?;
                self.check_id(*b, op)?;
                same(*a, *b)
            }
            Neg(a) | Relu(a) | Abs(a) | Sin(a) | Cos(a) | SignedSquare(a) => {
                self.check_id(*a, op)?;
                Ok(self.shape(*a))
            }
            ClampConst(a, lo, hi) => {
                self.check_id(*a, op)?;
                if lo > hi {
                    return Err(TapeError::BadClamp { lo: *lo, hi: *hi });
                }
                Ok(self.shape(*a))
            }
            Scale(s, t) => {
                self.check_id(*s, op)?;
                self.check_id(*t, op)?;
                if self.shape(*s).numel() != 1 {
                    return Err(TapeError::ShapeMismatch {
                        op: op.name(),
                        lhs: format!("{:?}", self.shape(*s)),
                        rhs: "scalar".into(),
                    });
                }
                Ok(self.shape(*t))
            }
            MatMul(a, b) => {
                self.check_id(*a, op)?;
                self.check_id(*b, op)?;
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if sa.rank() != 2 || sb.rank() != 2 || sa.cols() != sb.rows() {
                    return Err(TapeError::ShapeMismatch {
                        op: op.name(),
                        lhs: format!("{sa:?}"),
                        rhs: format!("{sb:?}"),
                    });
                }
                Ok(Shape::matrix(sa.rows(), sb.cols()))
            }
            MatVec(a, v) => {
                self.check_id(*a, op)?;
                self.check_id(*v, op)?;
                let (sa, sv) = (self.shape(*a), self.shape(*v));
                if sa.rank() != 2 || sv.rank() != 1 || sa.cols() != sv.rows() {
                    return Err(TapeError::ShapeMismatch {
                        op: op.name(),
                        lhs: format!("{sa:?}"),
                        rhs: format!("{sv:?}"),
                    });
                }
                Ok(Shape::vector(sa.rows()))
            }
            MulCols(a, v) => {
                self.check_id(*a, op)?;
                self.check_id(*v, op)?;
                let (sa, sv) = (self.shape(*a), self.shape(*v));
                if sa.rank() != 2 || sv.rank() != 1 || sa.cols() != sv.rows() {
                    return Err(TapeError::ShapeMismatch {
                        op: op.name(),
                        lhs: format!("{sa:?}"),
                        rhs: format!("{sv:?}"),
                    });
                }
                Ok(sa)
            }
            ScatterCols(a, idx, width) => {
                self.check_id(*a, op)?;
                let sa = self.shape(*a);
                if sa.rank() != 2 || sa.cols() != idx.len() {
                    return Err(TapeError::ShapeMismatch {
                        op: op.name(),
                        lhs: format!("{sa:?}"),
                        rhs: format!("{} indices", idx.len()),
                    });
                }
                if idx.iter().any(|&j| j >= *width) {
                    return Err(TapeError::IndexOutOfRange { op: op.name(), len: *width });
                }
                Ok(Shape::matrix(sa.rows(), *width))
            }
            SliceCols(a, from, to) => {
                self.check_id(*a, op)?;
                let sa = self.shape(*a);
                if sa.rank() != 2 || *from > *to || *to > sa.cols() {
                    return Err(TapeError::IndexOutOfRange { op: op.name(), len: sa.cols() });
                }
                Ok(Shape::matrix(sa.rows(), to - from))
            }
            Select(a, idx) => {
                self.check_id(*a, op)?;
                let sa = self.shape(*a);
                if sa.rank() != 1 {
                    return Err(TapeError::ShapeMismatch {
                        op: op.name(),
                        lhs: format!("{sa:?}"),
                        rhs: "vector".into(),
                    });
                }
                if idx.iter().any(|&j| j >= sa.rows()) {
                    return Err(TapeError::IndexOutOfRange { op: op.name(), len: sa.rows() });
                }
                Ok(Shape::vector(idx.len()))
            }
            Get(a, i) => {
                self.check_id(*a, op)?;
                let sa = self.shape(*a);
                if sa.rank() != 1 || *i >= sa.rows() {
                    return Err(TapeError::IndexOutOfRange { op: op.name(), len: sa.rows() });
                }
                Ok(Shape::scalar())
            }
            Concat(parts) => {
                let mut n = 0;
                for p in parts.iter() {
                    self.check_id(*p, op)?;
                    let s = self.shape(*p);
                    if s.rank() > 1 {
                        return Err(TapeError::ShapeMismatch {
                            op: op.name(),
                            lhs: format!("{s:?}"),
                            rhs: "scalar or vector".into(),
                        });
                    }
                    n += s.numel();
                }
                Ok(Shape::vector(n))
            }
            Sum(a) | Prod(a) | Norm2(a) => {
                self.check_id(*a, op)?;
                Ok(Shape::scalar())
            }
        }
    }

    fn forward(&mut self, op: &Op, off: usize, shape: Shape) {
        use Op::*;
        let n = shape.numel();
        // The output region starts at `off == old vals.len()`, so operands all
        // live strictly before it and a single split is enough.
        let nodes = &self.nodes;
        let (pre, out) = self.vals.split_at_mut(off);
        let out = &mut out[..n];
        macro_rules! val {
            ($id:expr) => {{
                let nd = &nodes[$id.index()];
                &pre[nd.off..nd.off + nd.shape.numel()]
            }};
        }
        match op {
            Leaf => {}
            Add(a, b) => {
                let (x, y) = (val!(*a), val!(*b));
                for i in 0..n {
                    out[i] = x[i] + y[i];
                }
            }
            Sub(a, b) => {
                let (x, y) = (val!(*a), val!(*b));
                for i in 0..n {
                    out[i] = x[i] - y[i];
                }
            }
            Mul(a, b) => {
                let (x, y) = (val!(*a), val!(*b));
                for i in 0..n {
                    out[i] = x[i] * y[i];
                }
            }
            Div(a, b) => {
                let (x, y) = (val!(*a), val!(*b));
                for i in 0..n {
                    out[i] = x[i] / y[i];
                }
            }
            Min(a, b) => {
                let (x, y) = (val!(*a), val!(*b));
                for i in 0..n {
                    out[i] = if y[i] < x[i] { y[i] } else { x[i] };
                }
            }
            Max(a, b) => {
                let (x, y) = (val!(*a), val!(*b));
                for i in 0..n {
                    out[i] = if y[i] > x[i] { y[i] } else { x[i] };
                }
            }
            Neg(a) => {
                let x = val!(*a);
                for i in 0..n {
                    out[i] = -x[i];
                }
            }
            Relu(a) => {
                let x = val!(*a);
                for i in 0..n {
                    out[i] = if x[i] > 0.0 { x[i] } else { 0.0 };
                }
            }
            Abs(a) => {
                let x = val!(*a);
                for i in 0..n {
                    out[i] = x[i].abs();
                }
            }
            Sin(a) => {
                let x = val!(*a);
                for i in 0..n {
                    out[i] = x[i].sin();
                }
            }
            Cos(a) => {
                let x = val!(*a);
                for i in 0..n {
                    out[i] = x[i].cos();
                }
            }
            SignedSquare(a) => {
                let x = val!(*a);
                for i in 0..n {
                    out[i] = x[i] * x[i].abs();
                }
            }
            Scale(s, t) => {
                let k = val!(*s)[0];
                let x = val!(*t);
                for i in 0..n {
                    out[i] = k * x[i];
                }
            }
            ClampConst(a, lo, hi) => {
                let x = val!(*a);
                for i in 0..n {
                    out[i] = x[i].clamp(*lo, *hi);
                }
            }
            MatMul(a, b) => {
                let sa = nodes[a.index()].shape;
                let sb = nodes[b.index()].shape;
                let (m, k, c) = (sa.rows(), sa.cols(), sb.cols());
                let x = val!(*a);
                let y = val!(*b);
                for i in 0..m {
                    for l in 0..k {
                        let xv = x[i * k + l];
                        if xv == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            out[i * c + j] += xv * y[l * c + j];
                        }
                    }
                }
            }
            MatVec(a, v) => {
                let sa = nodes[a.index()].shape;
                let (m, k) = (sa.rows(), sa.cols());
                let x = val!(*a);
                let y = val!(*v);
                for i in 0..m {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += x[i * k + l] * y[l];
                    }
                    out[i] = acc;
                }
            }
            MulCols(a, v) => {
                let sa = nodes[a.index()].shape;
                let (m, k) = (sa.rows(), sa.cols());
                let x = val!(*a);
                let y = val!(*v);
                for i in 0..m {
                    for j in 0..k {
                        out[i * k + j] = x[i * k + j] * y[j];
                    }
                }
            }
            ScatterCols(a, idx, width) => {
                let sa = nodes[a.index()].shape;
                let (m, k) = (sa.rows(), sa.cols());
                let x = val!(*a);
                for i in 0..m {
                    for j in 0..k {
                        out[i * width + idx[j]] += x[i * k + j];
                    }
                }
            }
            SliceCols(a, from, to) => {
                let sa = nodes[a.index()].shape;
                let (m, k) = (sa.rows(), sa.cols());
                let w = to - from;
                let x = val!(*a);
                for i in 0..m {
                    out[i * w..(i + 1) * w].copy_from_slice(&x[i * k + from..i * k + to]);
                }
            }
            Select(a, idx) => {
                let x = val!(*a);
                for (j, &i) in idx.iter().enumerate() {
                    out[j] = x[i];
                }
            }
            Get(a, i) => {
                out[0] = val!(*a)[*i];
            }
            Concat(parts) => {
                let mut at = 0;
                for p in parts.iter() {
                    let x = val!(*p);
                    out[at..at + x.len()].copy_from_slice(x);
                    at += x.len();
                }
            }
            Sum(a) => {
                out[0] = val!(*a).iter().sum();
            }
            Prod(a) => {
                out[0] = val!(*a).iter().product();
            }
            Norm2(a) => {
                out[0] = val!(*a).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
    }

    /// Reverse pass from a scalar output. Returns gradients for every
    /// parameter leaf; constants and intermediates receive no entry.
    ///
    /// Subgradient conventions: relu'(0)=0, abs'(0)=0, min/max route the
    /// gradient to the first argument on ties, norm2 has zero gradient at the
    /// origin.
    pub fn backward(&self, output: Id) -> Result<GradMap, TapeError> {
        let out_node = &self.nodes[output.index()];
        if out_node.shape.numel() != 1 {
            return Err(TapeError::NotScalar { shape: format!("{:?}", out_node.shape) });
        }
        let mut grads = vec![0.0f64; self.vals.len()];
        grads[out_node.off] = 1.0;

        for node in self.nodes.iter().take(output.index() + 1).rev() {
            let off = node.off;
            let n = node.shape.numel();
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // Gradient region of this node sits at or after `off`; every
            // operand's region is strictly before it.
            let (gpre, gout) = grads.split_at_mut(off);
            let g = &gout[..n];
            let vals = &self.vals;
            let my_val = &vals[off..off + n];
            macro_rules! opval {
                ($id:expr) => {{
                    let nd = &self.nodes[$id.index()];
                    &vals[nd.off..nd.off + nd.shape.numel()]
                }};
            }
            macro_rules! opgrad {
                ($id:expr) => {{
                    let nd = &self.nodes[$id.index()];
                    &mut gpre[nd.off..nd.off + nd.shape.numel()]
                }};
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    {
                        let ga = opgrad!(*a);
                        for i in 0..n {
                            ga[i] += g[i];
                        }
                    }
                    let gb = opgrad!(*b);
                    for i in 0..n {
                        gb[i] += g[i];
                    }
                }
                Op::Sub(a, b) => {
                    {
                        let ga = opgrad!(*a);
                        for i in 0..n {
                            ga[i] += g[i];
                        }
                    }
                    let gb = opgrad!(*b);
                    for i in 0..n {
                        gb[i] -= g[i];
                    }
                }
                Op::Mul(a, b) => {
                    {
                        let bv = opval!(*b);
                        let ga = opgrad!(*a);
                        for i in 0..n {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    let av = opval!(*a);
                    let gb = opgrad!(*b);
                    for i in 0..n {
                        gb[i] += g[i] * av[i];
                    }
                }
                Op::Div(a, b) => {
                    let av = opval!(*a);
                    let bv = opval!(*b);
                    {
                        let ga = opgrad!(*a);
                        for i in 0..n {
                            ga[i] += g[i] / bv[i];
                        }
                    }
                    let gb = opgrad!(*b);
                    for i in 0..n {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
                Op::Min(a, b) => {
                    let av = opval!(*a);
                    let bv = opval!(*b);
                    {
                        let ga = opgrad!(*a);
                        for i in 0..n {
                            if av[i] <= bv[i] {
                                ga[i] += g[i];
                            }
                        }
                    }
                    let gb = opgrad!(*b);
                    for i in 0..n {
                        if bv[i] < av[i] {
                            gb[i] += g[i];
                        }
                    }
                }
                Op::Max(a, b) => {
                    let av = opval!(*a);
                    let bv = opval!(*b);
                    {
                        let ga = opgrad!(*a);
                        for i in 0..n {
                            if av[i] >= bv[i] {
                                ga[i] += g[i];
                            }
                        }
                    }
                    let gb = opgrad!(*b);
                    for i in 0..n {
                        if bv[i] > av[i] {
                            gb[i] += g[i];
                        }
                    }
                }
                Op::Neg(a) => {
                    let ga = opgrad!(*a);
                    for i in 0..n {
                        ga[i] -= g[i];
                    }
                }
                Op::Relu(a) => {
                    let av = opval!(*a);
                    let ga = opgrad!(*a);
                    for i in 0..n {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::Abs(a) => {
                    let av = opval!(*a);
                    let ga = opgrad!(*a);
                    for i in 0..n {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        } else if av[i] < 0.0 {
                            ga[i] -= g[i];
                        }
                    }
                }
                Op::Sin(a) => {
                    let av = opval!(*a);
                    let ga = opgrad!(*a);
                    for i in 0..n {
                        ga[i] += g[i] * av[i].cos();
                    }
                }
                Op::Cos(a) => {
                    let av = opval!(*a);
                    let ga = opgrad!(*a);
                    for i in 0..n {
                        ga[i] -= g[i] * av[i].sin();
                    }
                }
                Op::SignedSquare(a) => {
                    let av = opval!(*a);
                    let ga = opgrad!(*a);
                    for i in 0..n {
                        ga[i] += g[i] * 2.0 * av[i].abs();
                    }
                }
                Op::Scale(s, t) => {
                    let k = opval!(*s)[0];
                    let tv = opval!(*t);
                    {
                        let gs = opgrad!(*s);
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += g[i] * tv[i];
                        }
                        gs[0] += acc;
                    }
                    let gt = opgrad!(*t);
                    for i in 0..n {
                        gt[i] += g[i] * k;
                    }
                }
                Op::ClampConst(a, lo, hi) => {
                    let av = opval!(*a);
                    let ga = opgrad!(*a);
                    for i in 0..n {
                        if av[i] >= *lo && av[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let sa = self.nodes[a.index()].shape;
                    let sb = self.nodes[b.index()].shape;
                    let (m, k, c) = (sa.rows(), sa.cols(), sb.cols());
                    let av = opval!(*a);
                    let bv = opval!(*b);
                    {
                        // dA += g . B^T
                        let ga = opgrad!(*a);
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..c {
                                    acc += g[i * c + j] * bv[l * c + j];
                                }
                                ga[i * k + l] += acc;
                            }
                        }
                    }
                    // dB += A^T . g
                    let gb = opgrad!(*b);
                    for l in 0..k {
                        for i in 0..m {
                            let xv = av[i * k + l];
                            if xv == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                gb[l * c + j] += xv * g[i * c + j];
                            }
                        }
                    }
                }
                Op::MatVec(a, v) => {
                    let sa = self.nodes[a.index()].shape;
                    let (m, k) = (sa.rows(), sa.cols());
                    let av = opval!(*a);
                    let vv = opval!(*v);
                    {
                        // dW += g (outer) v
                        let ga = opgrad!(*a);
                        for i in 0..m {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                ga[i * k + l] += gi * vv[l];
                            }
                        }
                    }
                    // dv += W^T . g
                    let gv = opgrad!(*v);
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            gv[l] += av[i * k + l] * gi;
                        }
                    }
                }
                Op::MulCols(a, v) => {
                    let sa = self.nodes[a.index()].shape;
                    let (m, k) = (sa.rows(), sa.cols());
                    let av = opval!(*a);
                    let vv = opval!(*v);
                    {
                        let ga = opgrad!(*a);
                        for i in 0..m {
                            for j in 0..k {
                                ga[i * k + j] += g[i * k + j] * vv[j];
                            }
                        }
                    }
                    let gv = opgrad!(*v);
                    for j in 0..k {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += g[i * k + j] * av[i * k + j];
                        }
                        gv[j] += acc;
                    }
                }
                Op::ScatterCols(a, idx, width) => {
                    let sa = self.nodes[a.index()].shape;
                    let (m, k) = (sa.rows(), sa.cols());
                    let ga = opgrad!(*a);
                    for i in 0..m {
                        for j in 0..k {
                            ga[i * k + j] += g[i * width + idx[j]];
                        }
                    }
                }
                Op::SliceCols(a, from, to) => {
                    let sa = self.nodes[a.index()].shape;
                    let k = sa.cols();
                    let w = to - from;
                    let m = sa.rows();
                    let ga = opgrad!(*a);
                    for i in 0..m {
                        for j in 0..w {
                            ga[i * k + from + j] += g[i * w + j];
                        }
                    }
                }
                Op::Select(a, idx) => {
                    let ga = opgrad!(*a);
                    for (j, &i) in idx.iter().enumerate() {
                        ga[i] += g[j];
                    }
                }
                Op::Get(a, i) => {
                    let ga = opgrad!(*a);
                    ga[*i] += g[0];
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts.iter() {
                        let gp = opgrad!(*p);
                        let w = gp.len();
                        for j in 0..w {
                            gp[j] += g[at + j];
                        }
                        at += w;
                    }
                }
                Op::Sum(a) => {
                    let ga = opgrad!(*a);
                    for gi in ga.iter_mut() {
                        *gi += g[0];
                    }
                }
                Op::Prod(a) => {
                    let av = opval!(*a);
                    let zeros = av.iter().filter(|v| **v == 0.0).count();
                    let ga = opgrad!(*a);
                    match zeros {
                        0 => {
                            let p = my_val[0];
                            for (gi, &x) in ga.iter_mut().zip(av) {
                                *gi += g[0] * p / x;
                            }
                        }
                        1 => {
                            let rest: f64 = av.iter().filter(|v| **v != 0.0).product();
                            for (gi, &x) in ga.iter_mut().zip(av) {
                                if x == 0.0 {
                                    *gi += g[0] * rest;
                                }
                            }
                        }
                        _ => {}
                    }
                }
                Op::Norm2(a) => {
                    let norm = my_val[0];
                    if norm > 0.0 {
                        let av = opval!(*a);
                        let ga = opgrad!(*a);
                        for (gi, &x) in ga.iter_mut().zip(av) {
                            *gi += g[0] * x / norm;
                        }
                    }
                }
            }
        }

        let mut map = GradMap::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                let slice = &grads[node.off..node.off + node.shape.numel()];
                let t = Tensor::new(node.shape.dims().to_vec(), slice.to_vec())
                    .expect("leaf shape is consistent");
                map.grads.insert(Id(i as u32), t);
            }
        }
        Ok(map)
    }

    /// Scan all recorded values for NaN/Inf; reports the first offending op.
    pub fn check_finite(&self) -> Result<(), TapeError> {
        for node in &self.nodes {
            let vals = &self.vals[node.off..node.off + node.shape.numel()];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(TapeError::NonFinite { op: node.op.name() });
            }
        }
        Ok(())
    }

    // Convenience wrappers over `record`.
    pub fn add(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        self.record(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        self.record(Op::Div(a, b))
    }
    pub fn min(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        self.record(Op::Min(a, b))
    }
    pub fn max(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        self.record(Op::Max(a, b))
    }
    pub fn neg(&mut self, a: Id) -> Result<Id, TapeError> {
        self.record(Op::Neg(a))
    }
    pub fn relu(&mut self, a: Id) -> Result<Id, TapeError> {
        self.record(Op::Relu(a))
    }
    pub fn abs(&mut self, a: Id) -> Result<Id, TapeError> {
        self.record(Op::Abs(a))
    }
    pub fn sin(&mut self, a: Id) -> Result<Id, TapeError> {
        self.record(Op::Sin(a))
    }
    pub fn cos(&mut self, a: Id) -> Result<Id, TapeError> {
        self.record(Op::Cos(a))
    }
    pub fn signed_square(&mut self, a: Id) -> Result<Id, TapeError> {
        self.record(Op::SignedSquare(a))
    }
    pub fn scale(&mut self, s: Id, t: Id) -> Result<Id, TapeError> {
        self.record(Op::Scale(s, t))
    }
    pub fn scale_const(&mut self, k: f64, t: Id) -> Result<Id, TapeError> {
        let s = self.konst(k);
        self.record(Op::Scale(s, t))
    }
    pub fn clamp_const(&mut self, a: Id, lo: f64, hi: f64) -> Result<Id, TapeError> {
        self.record(Op::ClampConst(a, lo, hi))
    }
    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id, TapeError> {
        self.record(Op::MatMul(a, b))
    }
    pub fn matvec(&mut self, a: Id, v: Id) -> Result<Id, TapeError> {
        self.record(Op::MatVec(a, v))
    }
    pub fn mul_cols(&mut self, a: Id, v: Id) -> Result<Id, TapeError> {
        self.record(Op::MulCols(a, v))
    }
    pub fn scatter_cols(&mut self, a: Id, idx: Arc<[usize]>, width: usize) -> Result<Id, TapeError> {
        self.record(Op::ScatterCols(a, idx, width))
    }
    pub fn slice_cols(&mut self, a: Id, from: usize, to: usize) -> Result<Id, TapeError> {
        self.record(Op::SliceCols(a, from, to))
    }
    pub fn select(&mut self, a: Id, idx: Arc<[usize]>) -> Result<Id, TapeError> {
        self.record(Op::Select(a, idx))
    }
    pub fn get(&mut self, a: Id, i: usize) -> Result<Id, TapeError> {
        self.record(Op::Get(a, i))
    }
    pub fn concat(&mut self, parts: &[Id]) -> Result<Id, TapeError> {
        self.record(Op::Concat(parts.into()))
    }
    pub fn sum(&mut self, a: Id) -> Result<Id, TapeError> {
        self.record(Op::Sum(a))
    }
    pub fn prod(&mut self, a: Id) -> Result<Id, TapeError> {
        self.record(Op::Prod(a))
    }
    pub fn norm2(&mut self, a: Id) -> Result<Id, TapeError> {
        self.record(Op::Norm2(a))
    }
    /// Positive part, elementwise.
    pub fn pos_part(&mut self, a: Id) -> Result<Id, TapeError> {
        self.relu(a)
    }
    /// Negative part (x - relu(x)), elementwise; entries are <= 0.
    pub fn neg_part(&mut self, a: Id) -> Result<Id, TapeError> {
        let p = self.relu(a)?;
        self.sub(a, p)
    }
}
