use std::sync::Arc;

use crate::diffcore::Tensor;

use super::CrownError;

/// One primitive of a closed-loop step graph. Operand indices always point
/// to earlier nodes; node 0 is the input (the state vector).
#[derive(Clone, Debug)]
pub enum GNode {
    Input,
    /// W x + b with parameter tensors held in the graph's param store.
    Affine { input: usize, weight: usize, bias: usize },
    Relu { input: usize },
    Sin { input: usize },
    Cos { input: usize },
    SignedSquare { input: usize },
    /// Elementwise product of two equal-width nodes.
    Bilinear { lhs: usize, rhs: usize },
    Add { lhs: usize, rhs: usize },
    ScaleConst { input: usize, factor: f64 },
    Select { input: usize, idx: Arc<[usize]> },
    Concat { parts: Vec<usize> },
}

/// A composition of bound-aware primitives representing one closed-loop step
/// `f(x, pi_theta(x))`. The forward pass at a concrete state equals the step
/// function exactly; bound propagation composes per-node relaxations instead.
#[derive(Clone)]
pub struct BoundGraph {
    nodes: Vec<GNode>,
    widths: Vec<usize>,
    params: Vec<Tensor>,
    trainable: Vec<bool>,
    input_dim: usize,
    output: usize,
}

impl BoundGraph {
    pub fn nodes(&self) -> &[GNode] {
        &self.nodes
    }

    pub fn width(&self, node: usize) -> usize {
        self.widths[node]
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.output]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param(&self, i: usize) -> &Tensor {
        &self.params[i]
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    /// Replace parameter values (e.g. after an optimizer step or a checkpoint
    /// restore). Shapes must match the existing store.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), CrownError> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(CrownError::ParamShape);
        }
        self.params = params;
        Ok(())
    }

    pub fn trainable_params(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn set_trainable_params(&mut self, values: &[Tensor]) -> Result<(), CrownError> {
        let mut it = values.iter();
        let mut params = self.params.clone();
        for (p, t) in params.iter_mut().zip(&self.trainable) {
            if *t {
                let v = it.next().ok_or(CrownError::ParamShape)?;
                if v.shape() != p.shape() {
                    return Err(CrownError::ParamShape);
                }
                *p = v.clone();
            }
        }
        if it.next().is_some() {
            return Err(CrownError::ParamShape);
        }
        self.params = params;
        Ok(())
    }

    /// Exact forward pass at a concrete state, reusing `scratch` buffers.
    pub fn forward_into(&self, x: &[f64], scratch: &mut Vec<Vec<f64>>) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim);
        scratch.resize(self.nodes.len(), Vec::new());
        for (i, node) in self.nodes.iter().enumerate() {
            let w = self.widths[i];
            let mut out = std::mem::take(&mut scratch[i]);
            out.clear();
            out.resize(w, 0.0);
            match node {
                GNode::Input => out.copy_from_slice(x),
                GNode::Affine { input, weight, bias } => {
                    let wt = &self.params[*weight];
                    let b = &self.params[*bias];
                    let cols = self.widths[*input];
                    let v = &scratch[*input];
                    for r in 0..w {
                        let mut acc = b.values()[r];
                        let row = &wt.values()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            acc += row[c] * v[c];
                        }
                        out[r] = acc;
                    }
                }
                GNode::Relu { input } => {
                    for (o, &v) in out.iter_mut().zip(&scratch[*input]) {
                        *o = v.max(0.0);
                    }
                }
                GNode::Sin { input } => {
                    for (o, &v) in out.iter_mut().zip(&scratch[*input]) {
                        *o = v.sin();
                    }
                }
                GNode::Cos { input } => {
                    for (o, &v) in out.iter_mut().zip(&scratch[*input]) {
                        *o = v.cos();
                    }
                }
                GNode::SignedSquare { input } => {
                    for (o, &v) in out.iter_mut().zip(&scratch[*input]) {
                        *o = v * v.abs();
                    }
                }
                GNode::Bilinear { lhs, rhs } => {
                    for i in 0..w {
                        out[i] = scratch[*lhs][i] * scratch[*rhs][i];
                    }
                }
                GNode::Add { lhs, rhs } => {
                    for i in 0..w {
                        out[i] = scratch[*lhs][i] + scratch[*rhs][i];
                    }
                }
                GNode::ScaleConst { input, factor } => {
                    for (o, &v) in out.iter_mut().zip(&scratch[*input]) {
                        *o = factor * v;
                    }
                }
                GNode::Select { input, idx } => {
                    for (o, &j) in out.iter_mut().zip(idx.iter()) {
                        *o = scratch[*input][j];
                    }
                }
                GNode::Concat { parts } => {
                    let mut at = 0;
                    for p in parts {
                        let v = &scratch[*p];
                        out[at..at + v.len()].copy_from_slice(v);
                        at += v.len();
                    }
                }
            }
            scratch[i] = out;
        }
        scratch[self.output].clone()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut scratch = Vec::new();
        self.forward_into(x, &mut scratch)
    }
}

/// Incremental builder; validates operand order and widths as nodes are added.
pub struct GraphBuilder {
    nodes: Vec<GNode>,
    widths: Vec<usize>,
    params: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl GraphBuilder {
    pub fn new(input_dim: usize) -> Self {
        GraphBuilder {
            nodes: vec![GNode::Input],
            widths: vec![input_dim],
            params: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn width(&self, node: usize) -> usize {
        self.widths[node]
    }

    fn check(&self, node: usize) -> Result<(), CrownError> {
        if node >= self.nodes.len() {
            return Err(CrownError::BadGraph("operand index out of range".into()));
        }
        Ok(())
    }

    fn push(&mut self, node: GNode, width: usize) -> usize {
        self.nodes.push(node);
        self.widths.push(width);
        self.nodes.len() - 1
    }

    pub fn param(&mut self, value: Tensor, trainable: bool) -> usize {
        self.params.push(value);
        self.trainable.push(trainable);
        self.params.len() - 1
    }

    pub fn affine(&mut self, input: usize, weight: Tensor, bias: Tensor, trainable: bool) -> Result<usize, CrownError> {
        self.check(input)?;
        let in_w = self.widths[input];
        let (rows, cols) = match weight.shape() {
            [r, c] => (*r, *c),
            _ => return Err(CrownError::BadGraph("affine weight must be a matrix".into())),
        };
        if cols != in_w || bias.shape() != [rows] {
            return Err(CrownError::BadGraph(format!(
                "affine shapes mismatch: weight {rows}x{cols}, bias {:?}, input width {in_w}",
                bias.shape()
            )));
        }
        let w = self.param(weight, trainable);
        let b = self.param(bias, trainable);
        Ok(self.push(GNode::Affine { input, weight: w, bias: b }, rows))
    }

    pub fn relu(&mut self, input: usize) -> Result<usize, CrownError> {
        self.check(input)?;
        let w = self.widths[input];
        Ok(self.push(GNode::Relu { input }, w))
    }

    pub fn sin(&mut self, input: usize) -> Result<usize, CrownError> {
        self.check(input)?;
        let w = self.widths[input];
        Ok(self.push(GNode::Sin { input }, w))
    }

    pub fn cos(&mut self, input: usize) -> Result<usize, CrownError> {
        self.check(input)?;
        let w = self.widths[input];
        Ok(self.push(GNode::Cos { input }, w))
    }

    pub fn signed_square(&mut self, input: usize) -> Result<usize, CrownError> {
        self.check(input)?;
        let w = self.widths[input];
        Ok(self.push(GNode::SignedSquare { input }, w))
    }

    pub fn bilinear(&mut self, lhs: usize, rhs: usize) -> Result<usize, CrownError> {
        self.check(lhs)?;
        self.check(rhs)?;
        if self.widths[lhs] != self.widths[rhs] {
            return Err(CrownError::BadGraph("bilinear operands must have equal width".into()));
        }
        let w = self.widths[lhs];
        Ok(self.push(GNode::Bilinear { lhs, rhs }, w))
    }

    pub fn add(&mut self, lhs: usize, rhs: usize) -> Result<usize, CrownError> {
        self.check(lhs)?;
        self.check(rhs)?;
        if self.widths[lhs] != self.widths[rhs] {
            return Err(CrownError::BadGraph("add operands must have equal width".into()));
        }
        let w = self.widths[lhs];
        Ok(self.push(GNode::Add { lhs, rhs }, w))
    }

    pub fn scale_const(&mut self, input: usize, factor: f64) -> Result<usize, CrownError> {
        self.check(input)?;
        let w = self.widths[input];
        Ok(self.push(GNode::ScaleConst { input, factor }, w))
    }

    pub fn select(&mut self, input: usize, idx: &[usize]) -> Result<usize, CrownError> {
        self.check(input)?;
        if idx.iter().any(|&j| j >= self.widths[input]) {
            return Err(CrownError::BadGraph("select index out of range".into()));
        }
        let w = idx.len();
        Ok(self.push(GNode::Select { input, idx: idx.into() }, w))
    }

    pub fn concat(&mut self, parts: &[usize]) -> Result<usize, CrownError> {
        let mut w = 0;
        for &p in parts {
            self.check(p)?;
            w += self.widths[p];
        }
        Ok(self.push(GNode::Concat { parts: parts.to_vec() }, w))
    }

    pub fn finish(self, output: usize) -> Result<BoundGraph, CrownError> {
        if output >= self.nodes.len() {
            return Err(CrownError::BadGraph("output index out of range".into()));
        }
        let input_dim = self.widths[0];
        Ok(BoundGraph {
            nodes: self.nodes,
            widths: self.widths,
            params: self.params,
            trainable: self.trainable,
            input_dim,
            output,
        })
    }
}
