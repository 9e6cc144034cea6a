use std::collections::BTreeMap;

use crate::diffcore::{Id, Tape};
use crate::relax::{
    bilinear_relax_in, contains_sin_peak, contains_sin_trough, cos_relax_in,
    signed_square_relax_in, sin_relax_in,
};

use super::graph::{BoundGraph, GNode};
use super::{AffineBounds, BoundConfig, BoundMode, CrownError, HyperRect, Intermediate};

/// Lower/upper bound vectors of one graph node, living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeRect {
    pub lo: Id,
    pub hi: Id,
}

/// Graph parameters staged onto a tape as leaves.
pub struct StagedParams {
    ids: Vec<Id>,
}

impl StagedParams {
    pub fn ids(&self) -> &[Id] {
        &self.ids
    }

    /// Tape ids of the trainable parameters, in store order.
    pub fn trainable_ids(&self, graph: &BoundGraph) -> Vec<Id> {
        self.ids
            .iter()
            .zip(graph.trainable())
            .filter(|(_, t)| **t)
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Insert every graph parameter as a tape leaf. With `as_params` set, the
/// trainable ones receive gradient entries from `backward`.
pub fn stage_params(tape: &mut Tape, graph: &BoundGraph, as_params: bool) -> Result<StagedParams, CrownError> {
    let mut ids = Vec::with_capacity(graph.params().len());
    for (p, &tr) in graph.params().iter().zip(graph.trainable()) {
        ids.push(tape.leaf(p, as_params && tr)?);
    }
    Ok(StagedParams { ids })
}

pub(super) fn leaf_rect(tape: &mut Tape, rect: &HyperRect) -> Result<TapeRect, CrownError> {
    let lo = tape.konst_vec(rect.lo())?;
    let hi = tape.konst_vec(rect.hi())?;
    Ok(TapeRect { lo, hi })
}

/// Read a tape rect back out, rejecting inverted or non-finite bounds.
pub(super) fn extract_rect(tape: &Tape, rect: &TapeRect) -> Result<HyperRect, CrownError> {
    HyperRect::new(tape.value(rect.lo).to_vec(), tape.value(rect.hi).to_vec())
}

enum NodeRelax {
    Unary { slo: Id, ilo: Id, sup: Id, iup: Id },
    Bilinear { xs_lo: Id, ys_lo: Id, c_lo: Id, xs_up: Id, ys_up: Id, c_up: Id },
}

struct StepCtx<'a> {
    tape: &'a mut Tape,
    graph: &'a BoundGraph,
    params: &'a [Id],
    cfg: &'a BoundConfig,
    iv: Vec<Option<TapeRect>>,
    relax: Vec<Option<NodeRelax>>,
}

impl<'a> StepCtx<'a> {
    fn new(tape: &'a mut Tape, graph: &'a BoundGraph, staged: &'a StagedParams, cfg: &'a BoundConfig, input: TapeRect) -> Self {
        let n = graph.nodes().len();
        let mut iv = vec![None; n];
        iv[0] = Some(input);
        StepCtx { tape, graph, params: staged.ids(), cfg, iv, relax: (0..n).map(|_| None).collect() }
    }

    fn run(mut self) -> Result<TapeRect, CrownError> {
        match self.cfg.mode {
            BoundMode::Ibp => {
                for n in 1..self.graph.nodes().len() {
                    let r = self.forward_iv(n)?;
                    self.iv[n] = Some(r);
                }
                let out = self.iv[self.graph.output()].unwrap();
                self.pad(out)
            }
            BoundMode::Crown => {
                if self.cfg.intermediate == Intermediate::Forward {
                    for n in 1..self.graph.nodes().len() {
                        let r = self.forward_iv(n)?;
                        self.iv[n] = Some(r);
                    }
                }
                for n in 1..self.graph.nodes().len() {
                    if self.is_nonlinear(n) {
                        self.make_relax(n)?;
                    }
                }
                let (a_up, a_lo, b_up, b_lo) = self.backward_to(self.graph.output())?;
                self.concretize_tape(a_up, a_lo, b_up, b_lo)
            }
        }
    }

    fn is_nonlinear(&self, n: usize) -> bool {
        matches!(
            self.graph.nodes()[n],
            GNode::Relu { .. } | GNode::Sin { .. } | GNode::Cos { .. } | GNode::SignedSquare { .. } | GNode::Bilinear { .. }
        )
    }

    fn pad(&mut self, rect: TapeRect) -> Result<TapeRect, CrownError> {
        let w = self.tape.shape(rect.lo).numel();
        let eps = self.tape.konst_vec(&vec![self.cfg.eps_sound; w])?;
        let lo = self.tape.sub(rect.lo, eps)?;
        let hi = self.tape.add(rect.hi, eps)?;
        Ok(TapeRect { lo, hi })
    }

    /// Interval bounds of a node, computing them on demand. Affine nodes use
    /// backward propagation (classic intermediate bounds) unless a forward
    /// pre-pass already filled everything in.
    fn ensure_iv(&mut self, n: usize) -> Result<TapeRect, CrownError> {
        if let Some(r) = self.iv[n] {
            return Ok(r);
        }
        let r = match &self.graph.nodes()[n] {
            GNode::Input => unreachable!("input interval is seeded"),
            GNode::Affine { .. } => {
                let (a_up, a_lo, b_up, b_lo) = self.backward_to(n)?;
                self.concretize_tape(a_up, a_lo, b_up, b_lo)?
            }
            _ => self.forward_iv(n)?,
        };
        self.iv[n] = Some(r);
        Ok(r)
    }

    /// One-step interval arithmetic image of a node from its operands' intervals.
    fn forward_iv(&mut self, n: usize) -> Result<TapeRect, CrownError> {
        let node = self.graph.nodes()[n].clone();
        match node {
            GNode::Input => Ok(self.iv[0].unwrap()),
            GNode::Affine { input, weight, bias } => {
                let r = self.ensure_iv(input)?;
                let w = self.params[weight];
                let b = self.params[bias];
                let wp = self.tape.pos_part(w)?;
                let wn = self.tape.neg_part(w)?;
                let hi1 = self.tape.matvec(wp, r.hi)?;
                let hi2 = self.tape.matvec(wn, r.lo)?;
                let hi3 = self.tape.add(hi1, hi2)?;
                let hi = self.tape.add(hi3, b)?;
                let lo1 = self.tape.matvec(wp, r.lo)?;
                let lo2 = self.tape.matvec(wn, r.hi)?;
                let lo3 = self.tape.add(lo1, lo2)?;
                let lo = self.tape.add(lo3, b)?;
                Ok(TapeRect { lo, hi })
            }
            GNode::Relu { input } => {
                let r = self.ensure_iv(input)?;
                let lo = self.tape.relu(r.lo)?;
                let hi = self.tape.relu(r.hi)?;
                Ok(TapeRect { lo, hi })
            }
            GNode::SignedSquare { input } => {
                let r = self.ensure_iv(input)?;
                let lo = self.tape.signed_square(r.lo)?;
                let hi = self.tape.signed_square(r.hi)?;
                Ok(TapeRect { lo, hi })
            }
            GNode::Sin { input } => {
                let r = self.ensure_iv(input)?;
                self.trig_iv(r, 0.0)
            }
            GNode::Cos { input } => {
                let r = self.ensure_iv(input)?;
                self.trig_iv(r, std::f64::consts::FRAC_PI_2)
            }
            GNode::Bilinear { lhs, rhs } => {
                let a = self.ensure_iv(lhs)?;
                let b = self.ensure_iv(rhs)?;
                let p1 = self.tape.mul(a.lo, b.lo)?;
                let p2 = self.tape.mul(a.lo, b.hi)?;
                let p3 = self.tape.mul(a.hi, b.lo)?;
                let p4 = self.tape.mul(a.hi, b.hi)?;
                let lo12 = self.tape.min(p1, p2)?;
                let lo34 = self.tape.min(p3, p4)?;
                let lo = self.tape.min(lo12, lo34)?;
                let hi12 = self.tape.max(p1, p2)?;
                let hi34 = self.tape.max(p3, p4)?;
                let hi = self.tape.max(hi12, hi34)?;
                Ok(TapeRect { lo, hi })
            }
            GNode::Add { lhs, rhs } => {
                let a = self.ensure_iv(lhs)?;
                let b = self.ensure_iv(rhs)?;
                let lo = self.tape.add(a.lo, b.lo)?;
                let hi = self.tape.add(a.hi, b.hi)?;
                Ok(TapeRect { lo, hi })
            }
            GNode::ScaleConst { input, factor } => {
                let r = self.ensure_iv(input)?;
                let slo = self.tape.scale_const(factor, r.lo)?;
                let shi = self.tape.scale_const(factor, r.hi)?;
                if factor >= 0.0 {
                    Ok(TapeRect { lo: slo, hi: shi })
                } else {
                    Ok(TapeRect { lo: shi, hi: slo })
                }
            }
            GNode::Select { input, idx } => {
                let r = self.ensure_iv(input)?;
                let lo = self.tape.select(r.lo, idx.clone())?;
                let hi = self.tape.select(r.hi, idx)?;
                Ok(TapeRect { lo, hi })
            }
            GNode::Concat { parts } => {
                let rects = parts
                    .iter()
                    .map(|&p| self.ensure_iv(p))
                    .collect::<Result<Vec<_>, _>>()?;
                let los: Vec<Id> = rects.iter().map(|r| r.lo).collect();
                let his: Vec<Id> = rects.iter().map(|r| r.hi).collect();
                let lo = self.tape.concat(&los)?;
                let hi = self.tape.concat(&his)?;
                Ok(TapeRect { lo, hi })
            }
        }
    }

    /// Interval image of sin(x + phase), elementwise.
    fn trig_iv(&mut self, r: TapeRect, phase: f64) -> Result<TapeRect, CrownError> {
        let w = self.tape.shape(r.lo).numel();
        let mut lo_parts = Vec::with_capacity(w);
        let mut hi_parts = Vec::with_capacity(w);
        for j in 0..w {
            let lo_j = self.tape.get(r.lo, j)?;
            let hi_j = self.tape.get(r.hi, j)?;
            let (l, h) = (
                self.tape.scalar_value(lo_j) + phase,
                self.tape.scalar_value(hi_j) + phase,
            );
            let phase_c = self.tape.konst(phase);
            let lo_s = self.tape.add(lo_j, phase_c)?;
            let hi_s = self.tape.add(hi_j, phase_c)?;
            let sin_lo = self.tape.sin(lo_s)?;
            let sin_hi = self.tape.sin(hi_s)?;
            let up = if contains_sin_peak(l, h) {
                self.tape.konst(1.0)
            } else {
                self.tape.max(sin_lo, sin_hi)?
            };
            let down = if contains_sin_trough(l, h) {
                self.tape.konst(-1.0)
            } else {
                self.tape.min(sin_lo, sin_hi)?
            };
            lo_parts.push(down);
            hi_parts.push(up);
        }
        let lo = self.tape.concat(&lo_parts)?;
        let hi = self.tape.concat(&hi_parts)?;
        Ok(TapeRect { lo, hi })
    }

    fn maybe_detach(&mut self, id: Id) -> Id {
        if self.cfg.slope_grads {
            id
        } else {
            self.tape.detach(id)
        }
    }

    fn make_relax(&mut self, n: usize) -> Result<(), CrownError> {
        let node = self.graph.nodes()[n].clone();
        let relax = match node {
            GNode::Relu { input } => {
                let r = self.ensure_iv(input)?;
                self.relu_relax_vec(r)?
            }
            GNode::Sin { input } | GNode::Cos { input } => {
                let is_cos = matches!(node, GNode::Cos { .. });
                let r = self.ensure_iv(input)?;
                self.unary_relax_scalarwise(r, move |st, lo, hi| {
                    let rl = if is_cos {
                        cos_relax_in(st, lo, hi)
                    } else {
                        sin_relax_in(st, lo, hi)
                    };
                    [rl.slope_lo, rl.intercept_lo, rl.slope_up, rl.intercept_up]
                })?
            }
            GNode::SignedSquare { input } => {
                let r = self.ensure_iv(input)?;
                self.unary_relax_scalarwise(r, |st, lo, hi| {
                    let rl = signed_square_relax_in(st, lo, hi);
                    [rl.slope_lo, rl.intercept_lo, rl.slope_up, rl.intercept_up]
                })?
            }
            GNode::Bilinear { lhs, rhs } => {
                let a = self.ensure_iv(lhs)?;
                let b = self.ensure_iv(rhs)?;
                self.bilinear_relax_vec(a, b)?
            }
            _ => return Ok(()),
        };
        self.relax[n] = Some(relax);
        Ok(())
    }

    /// Vectorized ReLU relaxation: case masks are constants, the straddling
    /// chord slope hi/(hi-lo) stays differentiable in the endpoints.
    fn relu_relax_vec(&mut self, r: TapeRect) -> Result<NodeRelax, CrownError> {
        let w = self.tape.shape(r.lo).numel();
        let lv = self.tape.value(r.lo).to_vec();
        let hv = self.tape.value(r.hi).to_vec();
        let mut m_pos = vec![0.0; w];
        let mut m_str = vec![0.0; w];
        let mut m_ada = vec![0.0; w];
        let mut m_inv = vec![0.0; w]; // 1 - m_str
        for j in 0..w {
            if lv[j] >= 0.0 {
                m_pos[j] = 1.0;
                m_inv[j] = 1.0;
            } else if hv[j] <= 0.0 {
                m_inv[j] = 1.0;
            } else {
                m_str[j] = 1.0;
                if hv[j].abs() >= lv[j].abs() {
                    m_ada[j] = 1.0;
                }
            }
        }
        let mp = self.tape.konst_vec(&m_pos)?;
        let ms = self.tape.konst_vec(&m_str)?;
        let ma = self.tape.konst_vec(&m_ada)?;
        let mi = self.tape.konst_vec(&m_inv)?;
        let width = self.tape.sub(r.hi, r.lo)?;
        let msw = self.tape.mul(ms, width)?;
        let denom = self.tape.add(msw, mi)?;
        let hi_masked = self.tape.mul(ms, r.hi)?;
        let s_chord = self.tape.div(hi_masked, denom)?;
        let sup = self.tape.add(mp, s_chord)?;
        let neg_lo = self.tape.neg(r.lo)?;
        let iup = self.tape.mul(s_chord, neg_lo)?;
        let slo = self.tape.add(mp, ma)?;
        let ilo = self.tape.konst_vec(&vec![0.0; w])?;
        Ok(NodeRelax::Unary {
            slo: self.maybe_detach(slo),
            ilo,
            sup: self.maybe_detach(sup),
            iup: self.maybe_detach(iup),
        })
    }

    fn unary_relax_scalarwise(
        &mut self,
        r: TapeRect,
        f: impl Fn(&mut crate::diffcore::ScalarTape<'_>, Id, Id) -> [Id; 4],
    ) -> Result<NodeRelax, CrownError> {
        let w = self.tape.shape(r.lo).numel();
        let mut slo = Vec::with_capacity(w);
        let mut ilo = Vec::with_capacity(w);
        let mut sup = Vec::with_capacity(w);
        let mut iup = Vec::with_capacity(w);
        for j in 0..w {
            let lo_j = self.tape.get(r.lo, j)?;
            let hi_j = self.tape.get(r.hi, j)?;
            let mut st = crate::diffcore::ScalarTape(self.tape);
            let [sl, il, su, iu] = f(&mut st, lo_j, hi_j);
            slo.push(sl);
            ilo.push(il);
            sup.push(su);
            iup.push(iu);
        }
        let slo = self.tape.concat(&slo)?;
        let ilo = self.tape.concat(&ilo)?;
        let sup = self.tape.concat(&sup)?;
        let iup = self.tape.concat(&iup)?;
        Ok(NodeRelax::Unary {
            slo: self.maybe_detach(slo),
            ilo: self.maybe_detach(ilo),
            sup: self.maybe_detach(sup),
            iup: self.maybe_detach(iup),
        })
    }

    fn bilinear_relax_vec(&mut self, a: TapeRect, b: TapeRect) -> Result<NodeRelax, CrownError> {
        let w = self.tape.shape(a.lo).numel();
        let alt = self.cfg.alt_bilinear;
        let mut xs_lo = Vec::with_capacity(w);
        let mut ys_lo = Vec::with_capacity(w);
        let mut c_lo = Vec::with_capacity(w);
        let mut xs_up = Vec::with_capacity(w);
        let mut ys_up = Vec::with_capacity(w);
        let mut c_up = Vec::with_capacity(w);
        for j in 0..w {
            let xl = self.tape.get(a.lo, j)?;
            let xh = self.tape.get(a.hi, j)?;
            let yl = self.tape.get(b.lo, j)?;
            let yh = self.tape.get(b.hi, j)?;
            let mut st = crate::diffcore::ScalarTape(self.tape);
            let r = bilinear_relax_in(&mut st, xl, xh, yl, yh, alt);
            xs_lo.push(r.x_slope_lo);
            ys_lo.push(r.y_slope_lo);
            c_lo.push(r.intercept_lo);
            xs_up.push(r.x_slope_up);
            ys_up.push(r.y_slope_up);
            c_up.push(r.intercept_up);
        }
        let xs_lo = self.tape.concat(&xs_lo)?;
        let ys_lo = self.tape.concat(&ys_lo)?;
        let c_lo = self.tape.concat(&c_lo)?;
        let xs_up = self.tape.concat(&xs_up)?;
        let ys_up = self.tape.concat(&ys_up)?;
        let c_up = self.tape.concat(&c_up)?;
        Ok(NodeRelax::Bilinear {
            xs_lo: self.maybe_detach(xs_lo),
            ys_lo: self.maybe_detach(ys_lo),
            c_lo: self.maybe_detach(c_lo),
            xs_up: self.maybe_detach(xs_up),
            ys_up: self.maybe_detach(ys_up),
            c_up: self.maybe_detach(c_up),
        })
    }

    /// Backward propagation of affine coefficient matrices from `target` to
    /// the graph input. Returns (A_up, A_low, b_up, b_low) with
    /// `A_low x + b_low <= node(x) <= A_up x + b_up` for x in the input rect.
    fn backward_to(&mut self, target: usize) -> Result<(Id, Id, Id, Id), CrownError> {
        let w = self.graph.width(target);
        let ident = self.tape.identity(w);
        let zero_b = self.tape.zeros(crate::diffcore::Shape::vector(w));
        let mut b_up = zero_b;
        let mut b_lo = zero_b;
        let mut frontier: BTreeMap<usize, (Id, Id)> = BTreeMap::new();
        frontier.insert(target, (ident, ident));

        loop {
            let (&n, _) = match frontier.iter().next_back() {
                Some(kv) if *kv.0 != 0 => kv,
                _ => break,
            };
            let (a_up, a_lo) = frontier.remove(&n).unwrap();
            match self.graph.nodes()[n].clone() {
                GNode::Input => unreachable!(),
                GNode::Affine { input, weight, bias } => {
                    let wt = self.params[weight];
                    let b = self.params[bias];
                    let new_up = self.tape.matmul(a_up, wt)?;
                    let new_lo = self.tape.matmul(a_lo, wt)?;
                    let db_up = self.tape.matvec(a_up, b)?;
                    let db_lo = self.tape.matvec(a_lo, b)?;
                    b_up = self.tape.add(b_up, db_up)?;
                    b_lo = self.tape.add(b_lo, db_lo)?;
                    self.merge(&mut frontier, input, new_up, new_lo)?;
                }
                GNode::Relu { input }
                | GNode::Sin { input }
                | GNode::Cos { input }
                | GNode::SignedSquare { input } => {
                    let (slo, ilo, sup, iup) = match self.relax[n] {
                        Some(NodeRelax::Unary { slo, ilo, sup, iup }) => (slo, ilo, sup, iup),
                        _ => return Err(CrownError::BadGraph("missing relaxation".into())),
                    };
                    let (new_up, db_up) = self.route(a_up, sup, slo, iup, ilo)?;
                    let (new_lo, db_lo) = self.route(a_lo, slo, sup, ilo, iup)?;
                    b_up = self.tape.add(b_up, db_up)?;
                    b_lo = self.tape.add(b_lo, db_lo)?;
                    self.merge(&mut frontier, input, new_up, new_lo)?;
                }
                GNode::Bilinear { lhs, rhs } => {
                    let (xs_lo, ys_lo, c_lo, xs_up, ys_up, c_up) = match self.relax[n] {
                        Some(NodeRelax::Bilinear { xs_lo, ys_lo, c_lo, xs_up, ys_up, c_up }) => {
                            (xs_lo, ys_lo, c_lo, xs_up, ys_up, c_up)
                        }
                        _ => return Err(CrownError::BadGraph("missing relaxation".into())),
                    };
                    let (x_up, db_up) = self.route(a_up, xs_up, xs_lo, c_up, c_lo)?;
                    let (x_lo, db_lo) = self.route(a_lo, xs_lo, xs_up, c_lo, c_up)?;
                    // The plane constants are charged once; the y-route only
                    // carries slopes.
                    let y_up = self.route_slopes(a_up, ys_up, ys_lo)?;
                    let y_lo = self.route_slopes(a_lo, ys_lo, ys_up)?;
                    b_up = self.tape.add(b_up, db_up)?;
                    b_lo = self.tape.add(b_lo, db_lo)?;
                    self.merge(&mut frontier, lhs, x_up, x_lo)?;
                    self.merge(&mut frontier, rhs, y_up, y_lo)?;
                }
                GNode::Add { lhs, rhs } => {
                    self.merge(&mut frontier, lhs, a_up, a_lo)?;
                    self.merge(&mut frontier, rhs, a_up, a_lo)?;
                }
                GNode::ScaleConst { input, factor } => {
                    let new_up = self.tape.scale_const(factor, a_up)?;
                    let new_lo = self.tape.scale_const(factor, a_lo)?;
                    if factor >= 0.0 {
                        self.merge(&mut frontier, input, new_up, new_lo)?;
                    } else {
                        self.merge(&mut frontier, input, new_lo, new_up)?;
                    }
                }
                GNode::Select { input, idx } => {
                    let pw = self.graph.width(input);
                    let new_up = self.tape.scatter_cols(a_up, idx.clone(), pw)?;
                    let new_lo = self.tape.scatter_cols(a_lo, idx, pw)?;
                    self.merge(&mut frontier, input, new_up, new_lo)?;
                }
                GNode::Concat { parts } => {
                    let mut at = 0;
                    for &p in &parts {
                        let pw = self.graph.width(p);
                        let new_up = self.tape.slice_cols(a_up, at, at + pw)?;
                        let new_lo = self.tape.slice_cols(a_lo, at, at + pw)?;
                        self.merge(&mut frontier, p, new_up, new_lo)?;
                        at += pw;
                    }
                }
            }
        }

        let (a_up, a_lo) = match frontier.remove(&0) {
            Some(pair) => pair,
            None => {
                let z = self.tape.zeros(crate::diffcore::Shape::matrix(w, self.graph.input_dim()));
                (z, z)
            }
        };
        Ok((a_up, a_lo, b_up, b_lo))
    }

    /// Apply an elementwise relaxation to a coefficient matrix:
    /// positive entries pick `s_pick`/`i_pick`, negative ones the opposite side.
    fn route(&mut self, a: Id, s_pick: Id, s_other: Id, i_pick: Id, i_other: Id) -> Result<(Id, Id), CrownError> {
        let ap = self.tape.pos_part(a)?;
        let an = self.tape.neg_part(a)?;
        let t1 = self.tape.mul_cols(ap, s_pick)?;
        let t2 = self.tape.mul_cols(an, s_other)?;
        let new_a = self.tape.add(t1, t2)?;
        let d1 = self.tape.matvec(ap, i_pick)?;
        let d2 = self.tape.matvec(an, i_other)?;
        let db = self.tape.add(d1, d2)?;
        Ok((new_a, db))
    }

    fn route_slopes(&mut self, a: Id, s_pick: Id, s_other: Id) -> Result<Id, CrownError> {
        let ap = self.tape.pos_part(a)?;
        let an = self.tape.neg_part(a)?;
        let t1 = self.tape.mul_cols(ap, s_pick)?;
        let t2 = self.tape.mul_cols(an, s_other)?;
        self.tape.add(t1, t2)
            .map_err(Into::into)
    }

    fn merge(&mut self, frontier: &mut BTreeMap<usize, (Id, Id)>, node: usize, a_up: Id, a_lo: Id) -> Result<(), CrownError> {
        if let Some((u, l)) = frontier.remove(&node) {
            let nu = self.tape.add(u, a_up)?;
            let nl = self.tape.add(l, a_lo)?;
            frontier.insert(node, (nu, nl));
        } else {
            frontier.insert(node, (a_up, a_lo));
        }
        Ok(())
    }

    fn concretize_tape(&mut self, a_up: Id, a_lo: Id, b_up: Id, b_lo: Id) -> Result<TapeRect, CrownError> {
        let input = self.iv[0].unwrap();
        let w = self.tape.shape(b_up).numel();
        let eps = self.tape.konst_vec(&vec![self.cfg.eps_sound; w])?;

        let apu = self.tape.pos_part(a_up)?;
        let anu = self.tape.neg_part(a_up)?;
        let h1 = self.tape.matvec(apu, input.hi)?;
        let h2 = self.tape.matvec(anu, input.lo)?;
        let h3 = self.tape.add(h1, h2)?;
        let h4 = self.tape.add(h3, b_up)?;
        let hi = self.tape.add(h4, eps)?;

        let apl = self.tape.pos_part(a_lo)?;
        let anl = self.tape.neg_part(a_lo)?;
        let l1 = self.tape.matvec(apl, input.lo)?;
        let l2 = self.tape.matvec(anl, input.hi)?;
        let l3 = self.tape.add(l1, l2)?;
        let l4 = self.tape.add(l3, b_lo)?;
        let lo = self.tape.sub(l4, eps)?;

        Ok(TapeRect { lo, hi })
    }
}

/// One bound-propagation step on an existing tape.
pub fn step_bounds_on_tape(
    tape: &mut Tape,
    graph: &BoundGraph,
    staged: &StagedParams,
    input: TapeRect,
    cfg: &BoundConfig,
) -> Result<TapeRect, CrownError> {
    let expected = graph.input_dim();
    let got = tape.shape(input.lo).numel();
    if got != expected || tape.shape(input.hi).numel() != expected {
        return Err(CrownError::DimMismatch { expected, got });
    }
    let ctx = StepCtx::new(tape, graph, staged, cfg, input);
    ctx.run()
}

/// T-step differentiable reach tube; element 0 is the initial set exactly.
pub fn rollout_on_tape(
    tape: &mut Tape,
    graph: &BoundGraph,
    staged: &StagedParams,
    x0: &HyperRect,
    horizon: usize,
    cfg: &BoundConfig,
) -> Result<Vec<TapeRect>, CrownError> {
    if x0.dim() != graph.input_dim() {
        return Err(CrownError::DimMismatch { expected: graph.input_dim(), got: x0.dim() });
    }
    let mut tube = Vec::with_capacity(horizon + 1);
    let mut current = leaf_rect(tape, x0)?;
    tube.push(current);
    for _ in 0..horizon {
        current = step_bounds_on_tape(tape, graph, staged, current, cfg)?;
        // Catch numerical inversion early with a cheap concrete check.
        let (lo, hi) = (tape.value(current.lo), tape.value(current.hi));
        for (d, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(CrownError::IntervalInversion { dim: d, lo: l, hi: h });
            }
        }
        tube.push(current);
    }
    Ok(tube)
}

/// Affine output bounds of one closed-loop step as explicit matrices
/// (the `C`/`d` machinery specialized to hyperrect facets).
pub fn step_affine_bounds(
    graph: &BoundGraph,
    input: &HyperRect,
    cfg: &BoundConfig,
) -> Result<AffineBounds, CrownError> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, graph, false)?;
    let rect = leaf_rect(&mut tape, input)?;
    let mut ctx = StepCtx::new(&mut tape, graph, &staged, cfg, rect);
    if cfg.intermediate == Intermediate::Forward {
        for n in 1..graph.nodes().len() {
            let r = ctx.forward_iv(n)?;
            ctx.iv[n] = Some(r);
        }
    }
    for n in 1..graph.nodes().len() {
        if ctx.is_nonlinear(n) {
            ctx.make_relax(n)?;
        }
    }
    let (a_up, a_lo, b_up, b_lo) = ctx.backward_to(graph.output())?;
    Ok(AffineBounds {
        lam_low: tape.tensor(a_lo),
        b_low: tape.tensor(b_lo),
        lam_up: tape.tensor(a_up),
        b_up: tape.tensor(b_up),
    })
}
