//! Backward bound propagation over a closed-loop step graph.
//!
//! `step_bounds` produces a hyperrectangle containing the one-step image of
//! an input box; `rollout_bounds` iterates it into a reach tube. All bound
//! arithmetic is recorded on a [`Tape`](crate::diffcore::Tape), so the tube
//! endpoints are differentiable with respect to the graph parameters -
//! including the dependence of relaxation slopes and intercepts on the
//! intermediate interval endpoints.

mod graph;
mod propagate;

pub use graph::{BoundGraph, GNode, GraphBuilder};
pub use propagate::{rollout_on_tape, stage_params, step_bounds_on_tape, step_affine_bounds, StagedParams, TapeRect};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Tape, TapeError, Tensor};

/// Additive concretization slack absorbing floating-point rounding.
pub const EPS_SOUND: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CrownError {
    #[error("invalid bound graph: {0}")]
    BadGraph(String),
    #[error("hyperrect endpoints inverted or non-finite at dim {dim}: [{lo}, {hi}]")]
    IntervalInversion { dim: usize, lo: f64, hi: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("parameter shapes do not match the graph's store")]
    ParamShape,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Elementwise lower/upper state bounds; the reachable-set representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperRect {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl HyperRect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, CrownError> {
        if lo.len() != hi.len() {
            return Err(CrownError::DimMismatch { expected: lo.len(), got: hi.len() });
        }
        for (i, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(CrownError::IntervalInversion { dim: i, lo: l, hi: h });
            }
        }
        Ok(HyperRect { lo, hi })
    }

    pub fn point(x: &[f64]) -> Result<Self, CrownError> {
        HyperRect::new(x.to_vec(), x.to_vec())
    }

    pub fn from_center_halfwidth(center: &[f64], half: &[f64]) -> Result<Self, CrownError> {
        let lo = center.iter().zip(half).map(|(c, h)| c - h).collect();
        let hi = center.iter().zip(half).map(|(c, h)| c + h).collect();
        HyperRect::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    pub fn contains_point(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(i, &v)| v >= self.lo[i] - tol && v <= self.hi[i] + tol)
    }
}

/// Linear lower/upper bounding functions of the graph input:
/// `lam_low x + b_low <= g(x) <= lam_up x + b_up` over the input rect.
#[derive(Clone, Debug)]
pub struct AffineBounds {
    pub lam_low: Tensor,
    pub b_low: Tensor,
    pub lam_up: Tensor,
    pub b_up: Tensor,
}

/// Sequence of reachable-set bounds over a horizon; `rects[0]` is the initial
/// set exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReachTube {
    pub rects: Vec<HyperRect>,
}

impl ReachTube {
    pub fn horizon(&self) -> usize {
        self.rects.len().saturating_sub(1)
    }
}

/// Bound computation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    /// Backward linear relaxation (tight).
    Crown,
    /// Forward interval arithmetic (cheap baseline).
    Ibp,
}

/// How intermediate pre-activation intervals are obtained in crown mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intermediate {
    /// Full backward propagation to each nonlinear node's input.
    Backward,
    /// Forward interval arithmetic pre-pass (cheaper, looser).
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub mode: BoundMode,
    pub intermediate: Intermediate,
    pub eps_sound: f64,
    /// Select the alternative McCormick plane pair for bilinear nodes.
    pub alt_bilinear: bool,
    /// Propagate gradients through relaxation slopes/intercepts as functions
    /// of interval endpoints. Disabling treats relaxations as locally
    /// constant (ablation).
    pub slope_grads: bool,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            mode: BoundMode::Crown,
            intermediate: Intermediate::Backward,
            eps_sound: EPS_SOUND,
            alt_bilinear: false,
            slope_grads: true,
        }
    }
}

impl BoundConfig {
    pub fn ibp() -> Self {
        BoundConfig { mode: BoundMode::Ibp, ..Default::default() }
    }
}

/// Concretize affine bounds over an input rect into numeric output bounds by
/// positive/negative coefficient splitting, with `eps` soundness padding.
pub fn concretize(ab: &AffineBounds, input: &HyperRect, eps: f64) -> Result<HyperRect, CrownError> {
    let n = input.dim();
    let rows = match ab.lam_up.shape() {
        [r, c] if *c == n => *r,
        _ => {
            return Err(CrownError::DimMismatch {
                expected: n,
                got: ab.lam_up.shape().last().copied().unwrap_or(0),
            })
        }
    };
    if ab.lam_low.shape() != [rows, n] || ab.b_low.shape() != [rows] || ab.b_up.shape() != [rows] {
        return Err(CrownError::DimMismatch { expected: rows, got: ab.b_low.numel() });
    }
    let mut lo = vec![0.0; rows];
    let mut hi = vec![0.0; rows];
    for i in 0..rows {
        let mut up = ab.b_up.values()[i];
        let mut down = ab.b_low.values()[i];
        for j in 0..n {
            let cu = ab.lam_up.values()[i * n + j];
            up += if cu >= 0.0 { cu * input.hi()[j] } else { cu * input.lo()[j] };
            let cl = ab.lam_low.values()[i * n + j];
            down += if cl >= 0.0 { cl * input.lo()[j] } else { cl * input.hi()[j] };
        }
        hi[i] = up + eps;
        lo[i] = down - eps;
    }
    HyperRect::new(lo, hi)
}

/// One-step reachable-set outer bound of the closed loop over `input`.
pub fn step_bounds(graph: &BoundGraph, input: &HyperRect, cfg: &BoundConfig) -> Result<HyperRect, CrownError> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, graph, false)?;
    let rect = propagate::leaf_rect(&mut tape, input)?;
    let out = step_bounds_on_tape(&mut tape, graph, &staged, rect, cfg)?;
    propagate::extract_rect(&tape, &out)
}

/// Read tape-level rects back into concrete hyperrects.
pub fn extract_tube(tape: &Tape, tube: &[TapeRect]) -> Result<Vec<HyperRect>, CrownError> {
    tube.iter().map(|r| propagate::extract_rect(tape, r)).collect()
}

/// T-step reach tube with `rects[0] = x0`.
pub fn rollout_bounds(
    graph: &BoundGraph,
    x0: &HyperRect,
    horizon: usize,
    cfg: &BoundConfig,
) -> Result<ReachTube, CrownError> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, graph, false)?;
    let tube = rollout_on_tape(&mut tape, graph, &staged, x0, horizon, cfg)?;
    let rects = tube
        .iter()
        .map(|r| propagate::extract_rect(&tape, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReachTube { rects })
}
