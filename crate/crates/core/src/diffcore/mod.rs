//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every bound computation and loss in this crate is built from these
//! primitives, so policy gradients flow through the reachability analysis
//! itself. Evaluation is eager on a linear tape; no lazy graphs, no fusion.

mod tape;
mod tensor;

pub use tape::{GradMap, Id, Op, Tape};
pub use tensor::{Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: operand shapes {lhs} and {rhs} are incompatible")]
    ShapeMismatch { op: &'static str, lhs: String, rhs: String },
    #[error("tensor rank {rank} not supported (max 2)")]
    UnsupportedRank { rank: usize },
    #[error("tensor values length {got} does not match shape ({expected} expected)")]
    BadTensor { expected: usize, got: usize },
    #[error("backward requires a scalar output, got shape {shape}")]
    NotScalar { shape: String },
    #[error("{op}: index out of range (len {len})")]
    IndexOutOfRange { op: &'static str, len: usize },
    #[error("{op}: unknown tape id")]
    UnknownId { op: &'static str },
    #[error("clamp bounds inverted: lo {lo} > hi {hi}")]
    BadClamp { lo: f64, hi: f64 },
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
}

/// Scalar arithmetic abstracted over plain floats and tape-recorded scalars.
///
/// Relaxation formulas are written once against this trait; concrete values
/// are always available (`val`) so case analysis can branch eagerly while the
/// arithmetic of the branch taken stays differentiable.
pub trait ScalarArith {
    type S: Copy;

    fn konst(&mut self, v: f64) -> Self::S;
    fn val(&self, s: Self::S) -> f64;
    fn add(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn sub(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn mul(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn div(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn neg(&mut self, a: Self::S) -> Self::S;
    fn sin(&mut self, a: Self::S) -> Self::S;
    fn cos(&mut self, a: Self::S) -> Self::S;
    fn min(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn max(&mut self, a: Self::S, b: Self::S) -> Self::S;

    fn mul_const(&mut self, k: f64, a: Self::S) -> Self::S {
        let c = self.konst(k);
        self.mul(c, a)
    }
    fn add_const(&mut self, k: f64, a: Self::S) -> Self::S {
        let c = self.konst(k);
        self.add(c, a)
    }
}

/// Plain `f64` arithmetic.
#[derive(Default, Clone, Copy)]
pub struct PlainArith;

impl ScalarArith for PlainArith {
    type S = f64;

    fn konst(&mut self, v: f64) -> f64 {
        v
    }
    fn val(&self, s: f64) -> f64 {
        s
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn sin(&mut self, a: f64) -> f64 {
        a.sin()
    }
    fn cos(&mut self, a: f64) -> f64 {
        a.cos()
    }
    fn min(&mut self, a: f64, b: f64) -> f64 {
        if b < a {
            b
        } else {
            a
        }
    }
    fn max(&mut self, a: f64, b: f64) -> f64 {
        if b > a {
            b
        } else {
            a
        }
    }
}

/// Tape-backed scalar arithmetic; `S` is a tape id of a rank-0 value.
pub struct ScalarTape<'a>(pub &'a mut Tape);

impl ScalarArith for ScalarTape<'_> {
    type S = Id;

    fn konst(&mut self, v: f64) -> Id {
        self.0.konst(v)
    }
    fn val(&self, s: Id) -> f64 {
        self.0.scalar_value(s)
    }
    fn add(&mut self, a: Id, b: Id) -> Id {
        self.0.add(a, b).expect("scalar add")
    }
    fn sub(&mut self, a: Id, b: Id) -> Id {
        self.0.sub(a, b).expect("scalar sub")
    }
    fn mul(&mut self, a: Id, b: Id) -> Id {
        self.0.mul(a, b).expect("scalar mul")
    }
    fn div(&mut self, a: Id, b: Id) -> Id {
        self.0.div(a, b).expect("scalar div")
    }
    fn neg(&mut self, a: Id) -> Id {
        self.0.neg(a).expect("scalar neg")
    }
    fn sin(&mut self, a: Id) -> Id {
        self.0.sin(a).expect("scalar sin")
    }
    fn cos(&mut self, a: Id) -> Id {
        self.0.cos(a).expect("scalar cos")
    }
    fn min(&mut self, a: Id, b: Id) -> Id {
        self.0.min(a, b).expect("scalar min")
    }
    fn max(&mut self, a: Id, b: Id) -> Id {
        self.0.max(a, b).expect("scalar max")
    }
}

#[cfg(test)]
mod tests;
