//! Differentiable reachability-based loss terms and their weighted sum.
//!
//! Every term is a scalar tape value computed from reach-tube endpoints, so
//! one backward pass yields policy gradients through the bound computation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crown::TapeRect;
use crate::diffcore::{Id, Tape, TapeError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("position dims out of range for state dim {state}")]
    BadDims { state: usize },
    #[error("t_inv {t_inv} must be below the horizon {horizon}")]
    BadTInv { t_inv: usize, horizon: usize },
    #[error("region dimension {got} does not match selected dims {expected}")]
    RegionDim { expected: usize, got: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Axis-aligned box region (goal or box obstacle) over a subset of state dims.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl BoxRegion {
    pub fn new(center: Vec<f64>, half_width: Vec<f64>) -> Self {
        assert_eq!(center.len(), half_width.len());
        BoxRegion { center, half_width }
    }

    pub fn uniform(center: Vec<f64>, half_width: f64) -> Self {
        let hw = vec![half_width; center.len()];
        BoxRegion { center, half_width: hw }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn lo(&self) -> Vec<f64> {
        self.center.iter().zip(&self.half_width).map(|(c, h)| c - h).collect()
    }

    pub fn hi(&self) -> Vec<f64> {
        self.center.iter().zip(&self.half_width).map(|(c, h)| c + h).collect()
    }
}

/// Spherical obstacle with a proximity margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereObstacle {
    pub center: Vec<f64>,
    pub radius: f64,
    pub margin: f64,
}

/// Raw signed weights of the composite loss. The total is
/// `w_goal*goal - w_overlap_goal*overlap(goal) + w_overlap_obs*overlap(obstacles)
///  + w_vol*vol + w_inv*inv + w_vel*vel + w_obs_entry*entry + w_obs_prox*prox`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub goal: f64,
    pub overlap_goal: f64,
    pub overlap_obs: f64,
    pub vol: f64,
    pub inv: f64,
    pub vel: f64,
    pub obs_entry: f64,
    pub obs_prox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            goal: 0.0,
            overlap_goal: 0.0,
            overlap_obs: 0.0,
            vol: 0.0,
            inv: 0.0,
            vel: 0.0,
            obs_entry: 0.0,
            obs_prox: 0.0,
        }
    }
}

fn idx(dims: &[usize]) -> Arc<[usize]> {
    dims.into()
}

fn check_dims(tape: &Tape, tube: &[TapeRect], dims: &[usize]) -> Result<(), LossError> {
    let state = tube
        .first()
        .map(|r| tape.shape(r.lo).numel())
        .unwrap_or(0);
    if dims.iter().any(|&d| d >= state) {
        return Err(LossError::BadDims { state });
    }
    Ok(())
}

/// Positional overlap volume between each tube rect and a box region, summed
/// over timesteps:
/// `sum_t prod_i max(min(hi_i, c_i+h_i) - max(lo_i, c_i-h_i), 0)`.
pub fn overlap_loss(
    tape: &mut Tape,
    tube: &[TapeRect],
    region: &BoxRegion,
    dims: &[usize],
) -> Result<Id, LossError> {
    check_dims(tape, tube, dims)?;
    if region.dim() != dims.len() {
        return Err(LossError::RegionDim { expected: dims.len(), got: region.dim() });
    }
    let sel = idx(dims);
    let r_hi = tape.konst_vec(&region.hi())?;
    let r_lo = tape.konst_vec(&region.lo())?;
    let zero = tape.konst_vec(&vec![0.0; dims.len()])?;
    let mut total = tape.konst(0.0);
    for r in tube {
        let hi = tape.select(r.hi, sel.clone())?;
        let lo = tape.select(r.lo, sel.clone())?;
        let upper = tape.min(hi, r_hi)?;
        let lower = tape.max(lo, r_lo)?;
        let span = tape.sub(upper, lower)?;
        let clamped = tape.max(span, zero)?;
        let vol = tape.prod(clamped)?;
        total = tape.add(total, vol)?;
    }
    Ok(total)
}

/// Distance from each rect center to the goal center over position dims,
/// summed over timesteps.
pub fn goal_loss(
    tape: &mut Tape,
    tube: &[TapeRect],
    goal_center: &[f64],
    dims: &[usize],
) -> Result<Id, LossError> {
    check_dims(tape, tube, dims)?;
    if goal_center.len() != dims.len() {
        return Err(LossError::RegionDim { expected: dims.len(), got: goal_center.len() });
    }
    let sel = idx(dims);
    let g = tape.konst_vec(goal_center)?;
    let half = tape.konst(0.5);
    let mut total = tape.konst(0.0);
    for r in tube {
        let hi = tape.select(r.hi, sel.clone())?;
        let lo = tape.select(r.lo, sel.clone())?;
        let s = tape.add(hi, lo)?;
        let center = tape.scale(half, s)?;
        let d = tape.sub(center, g)?;
        let dist = tape.norm2(d)?;
        total = tape.add(total, dist)?;
    }
    Ok(total)
}

/// Bound volume over all state dims, summed over timesteps. With
/// `normalize = Some(v0)` each step contributes `(prod(widths) - v0)/v0`.
pub fn vol_loss(tape: &mut Tape, tube: &[TapeRect], normalize: Option<f64>) -> Result<Id, LossError> {
    let mut total = tape.konst(0.0);
    for r in tube {
        let w = tape.sub(r.hi, r.lo)?;
        let mut v = tape.prod(w)?;
        if let Some(v0) = normalize {
            let bias = tape.konst(v0);
            let centered = tape.sub(v, bias)?;
            v = tape.scale_const(1.0 / v0, centered)?;
        }
        total = tape.add(total, v)?;
    }
    Ok(total)
}

/// Step-to-step movement of the bounds from `t_inv` on:
/// `sum_t ||hi_{t+1}-hi_t|| + ||lo_{t+1}-lo_t||` with `t+1` clamped to the horizon.
pub fn inv_loss(tape: &mut Tape, tube: &[TapeRect], t_inv: usize) -> Result<Id, LossError> {
    let horizon = tube.len().saturating_sub(1);
    if t_inv >= horizon {
        return Err(LossError::BadTInv { t_inv, horizon });
    }
    let mut total = tape.konst(0.0);
    for t in t_inv..horizon {
        let dh = tape.sub(tube[t + 1].hi, tube[t].hi)?;
        let dl = tape.sub(tube[t + 1].lo, tube[t].lo)?;
        let nh = tape.norm2(dh)?;
        let nl = tape.norm2(dl)?;
        let s = tape.add(nh, nl)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Magnitudes of the velocity bounds: `sum_t |hi_v| + |lo_v|` over velocity dims.
pub fn vel_loss(tape: &mut Tape, tube: &[TapeRect], vel_dims: &[usize]) -> Result<Id, LossError> {
    check_dims(tape, tube, vel_dims)?;
    let sel = idx(vel_dims);
    let mut total = tape.konst(0.0);
    for r in tube {
        let hi = tape.select(r.hi, sel.clone())?;
        let lo = tape.select(r.lo, sel.clone())?;
        let ah = tape.abs(hi)?;
        let al = tape.abs(lo)?;
        let sh = tape.sum(ah)?;
        let sl = tape.sum(al)?;
        let s = tape.add(sh, sl)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Nearest point of a rect to the obstacle center: `max(lo, min(hi, o))`.
fn nearest_point(
    tape: &mut Tape,
    rect: &TapeRect,
    sel: &Arc<[usize]>,
    center: Id,
) -> Result<Id, LossError> {
    let hi = tape.select(rect.hi, sel.clone())?;
    let lo = tape.select(rect.lo, sel.clone())?;
    let m = tape.min(hi, center)?;
    Ok(tape.max(lo, m)?)
}

fn obstacle_penalty(
    tape: &mut Tape,
    tube: &[TapeRect],
    obstacles: &[SphereObstacle],
    dims: &[usize],
    with_margin: bool,
) -> Result<Id, LossError> {
    check_dims(tape, tube, dims)?;
    let sel = idx(dims);
    let mut total = tape.konst(0.0);
    for obs in obstacles {
        if obs.center.len() != dims.len() {
            return Err(LossError::RegionDim { expected: dims.len(), got: obs.center.len() });
        }
        let c = tape.konst_vec(&obs.center)?;
        let r_eff = if with_margin { obs.radius + obs.margin } else { obs.radius };
        let r_c = tape.konst(r_eff);
        let zero = tape.konst(0.0);
        for rect in tube {
            let n = nearest_point(tape, rect, &sel, c)?;
            let d = tape.sub(n, c)?;
            let dist = tape.norm2(d)?;
            let gap = tape.sub(r_c, dist)?;
            let clamped = tape.max(gap, zero)?;
            let sq = tape.mul(clamped, clamped)?;
            total = tape.add(total, sq)?;
        }
    }
    Ok(total)
}

/// Squared penetration depth past each obstacle's radius, summed over t and j.
pub fn obs_entry_loss(
    tape: &mut Tape,
    tube: &[TapeRect],
    obstacles: &[SphereObstacle],
    dims: &[usize],
) -> Result<Id, LossError> {
    obstacle_penalty(tape, tube, obstacles, dims, false)
}

/// Same with radius + margin: penalizes getting closer than the margin.
pub fn obs_prox_loss(
    tape: &mut Tape,
    tube: &[TapeRect],
    obstacles: &[SphereObstacle],
    dims: &[usize],
) -> Result<Id, LossError> {
    obstacle_penalty(tape, tube, obstacles, dims, true)
}

/// Inputs for the composite loss.
pub struct LossInputs<'a> {
    pub goal: &'a BoxRegion,
    pub box_obstacles: &'a [BoxRegion],
    pub sphere_obstacles: &'a [SphereObstacle],
    pub position_dims: &'a [usize],
    pub velocity_dims: &'a [usize],
    pub weights: LossWeights,
    pub t_inv: Option<usize>,
    /// Normalize the volume term by the initial-set volume.
    pub vol_normalizer: Option<f64>,
}

/// Per-term values of one composite loss evaluation (raw, unweighted).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub goal: f64,
    pub overlap_goal: f64,
    pub overlap_obs: f64,
    pub vol: f64,
    pub inv: f64,
    pub vel: f64,
    pub obs_entry: f64,
    pub obs_prox: f64,
}

/// Weighted sum of all loss terms. Goal overlap is a reward (subtracted with
/// positive weight); every other term adds with its raw signed weight.
pub fn total_loss(
    tape: &mut Tape,
    tube: &[TapeRect],
    inputs: &LossInputs<'_>,
) -> Result<(Id, LossBreakdown), LossError> {
    let w = &inputs.weights;
    let mut breakdown = LossBreakdown::default();
    let mut total = tape.konst(0.0);

    let goal = goal_loss(tape, tube, &inputs.goal.center, inputs.position_dims)?;
    breakdown.goal = tape.scalar_value(goal);
    if w.goal != 0.0 {
        let term = tape.scale_const(w.goal, goal)?;
        total = tape.add(total, term)?;
    }

    let overlap_goal = overlap_loss(tape, tube, inputs.goal, inputs.position_dims)?;
    breakdown.overlap_goal = tape.scalar_value(overlap_goal);
    if w.overlap_goal != 0.0 {
        let term = tape.scale_const(-w.overlap_goal, overlap_goal)?;
        total = tape.add(total, term)?;
    }

    let mut overlap_obs_val = 0.0;
    if !inputs.box_obstacles.is_empty() {
        let mut acc = tape.konst(0.0);
        for region in inputs.box_obstacles {
            let o = overlap_loss(tape, tube, region, inputs.position_dims)?;
            acc = tape.add(acc, o)?;
        }
        overlap_obs_val = tape.scalar_value(acc);
        if w.overlap_obs != 0.0 {
            let term = tape.scale_const(w.overlap_obs, acc)?;
            total = tape.add(total, term)?;
        }
    }
    breakdown.overlap_obs = overlap_obs_val;

    let vol = vol_loss(tape, tube, inputs.vol_normalizer)?;
    breakdown.vol = tape.scalar_value(vol);
    if w.vol != 0.0 {
        let term = tape.scale_const(w.vol, vol)?;
        total = tape.add(total, term)?;
    }

    if let Some(t_inv) = inputs.t_inv {
        let inv = inv_loss(tape, tube, t_inv)?;
        breakdown.inv = tape.scalar_value(inv);
        if w.inv != 0.0 {
            let term = tape.scale_const(w.inv, inv)?;
            total = tape.add(total, term)?;
        }
    }

    if !inputs.velocity_dims.is_empty() {
        let vel = vel_loss(tape, tube, inputs.velocity_dims)?;
        breakdown.vel = tape.scalar_value(vel);
        if w.vel != 0.0 {
            let term = tape.scale_const(w.vel, vel)?;
            total = tape.add(total, term)?;
        }
    }

    if !inputs.sphere_obstacles.is_empty() {
        let entry = obs_entry_loss(tape, tube, inputs.sphere_obstacles, inputs.position_dims)?;
        breakdown.obs_entry = tape.scalar_value(entry);
        if w.obs_entry != 0.0 {
            let term = tape.scale_const(w.obs_entry, entry)?;
            total = tape.add(total, term)?;
        }
        let prox = obs_prox_loss(tape, tube, inputs.sphere_obstacles, inputs.position_dims)?;
        breakdown.obs_prox = tape.scalar_value(prox);
        if w.obs_prox != 0.0 {
            let term = tape.scale_const(w.obs_prox, prox)?;
            total = tape.add(total, term)?;
        }
    }

    breakdown.total = tape.scalar_value(total);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crown::HyperRect;

    fn tube_on_tape(tape: &mut Tape, rects: &[HyperRect]) -> Vec<TapeRect> {
        rects
            .iter()
            .map(|r| {
                let lo = tape.konst_vec(r.lo()).unwrap();
                let hi = tape.konst_vec(r.hi()).unwrap();
                TapeRect { lo, hi }
            })
            .collect()
    }

    #[test]
    fn overlap_inside_region_is_rect_volume() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![0.0, 0.0, -9.0], vec![0.5, 1.0, 9.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let region = BoxRegion::uniform(vec![0.5, 0.5], 2.0);
        let o = overlap_loss(&mut tape, &tube, &region, &[0, 1]).unwrap();
        assert!((tape.scalar_value(o) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn overlap_disjoint_is_zero() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let region = BoxRegion::uniform(vec![5.0, 5.0], 0.5);
        let o = overlap_loss(&mut tape, &tube, &region, &[0, 1]).unwrap();
        assert_eq!(tape.scalar_value(o), 0.0);
    }

    #[test]
    fn overlap_partial() {
        // rect [0,1]^2 against center (1,0) half-width 0.5: (1-0.5)*(0.5-0) = 0.25.
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let region = BoxRegion::uniform(vec![1.0, 0.0], 0.5);
        let o = overlap_loss(&mut tape, &tube, &region, &[0, 1]).unwrap();
        assert!((tape.scalar_value(o) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn overlap_monotone_in_rect_size_inside_region() {
        let region = BoxRegion::uniform(vec![0.0, 0.0], 10.0);
        let mut prev = 0.0;
        for k in 1..=5 {
            let mut tape = Tape::new();
            let h = 0.2 * k as f64;
            let rect = HyperRect::new(vec![-h, -h], vec![h, h]).unwrap();
            let tube = tube_on_tape(&mut tape, &[rect]);
            let o = overlap_loss(&mut tape, &tube, &region, &[0, 1]).unwrap();
            let v = tape.scalar_value(o);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn goal_loss_zero_at_center() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![6.0, 6.0, 0.0], vec![8.0, 8.0, 1.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect.clone(), rect]);
        let g = goal_loss(&mut tape, &tube, &[7.0, 7.0], &[0, 1]).unwrap();
        assert_eq!(tape.scalar_value(g), 0.0);
    }

    #[test]
    fn goal_loss_three_four_five() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![3.0, 4.0], vec![3.0, 4.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let g = goal_loss(&mut tape, &tube, &[0.0, 0.0], &[0, 1]).unwrap();
        assert!((tape.scalar_value(g) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn vol_loss_cases() {
        let mut tape = Tape::new();
        let zero_rect = HyperRect::new(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[zero_rect]);
        let v = vol_loss(&mut tape, &tube, None).unwrap();
        assert_eq!(tape.scalar_value(v), 0.0);

        let rect = HyperRect::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let v = vol_loss(&mut tape, &tube, None).unwrap();
        assert!((tape.scalar_value(v) - 6.0).abs() < 1e-15);

        // Normalized variant: (6 - 2)/2 = 2.
        let rect = HyperRect::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let v = vol_loss(&mut tape, &tube, Some(2.0)).unwrap();
        assert!((tape.scalar_value(v) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn inv_loss_stationary_is_zero() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![0.0], vec![1.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect.clone(), rect.clone(), rect]);
        let l = inv_loss(&mut tape, &tube, 0).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn inv_loss_single_shift() {
        let mut tape = Tape::new();
        let a = HyperRect::new(vec![0.0], vec![1.0]).unwrap();
        let b = HyperRect::new(vec![0.0], vec![1.25]).unwrap();
        let tube = tube_on_tape(&mut tape, &[a, b]);
        let l = inv_loss(&mut tape, &tube, 0).unwrap();
        assert!((tape.scalar_value(l) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn inv_loss_rejects_bad_t_inv() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![0.0], vec![1.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect.clone(), rect]);
        assert!(matches!(
            inv_loss(&mut tape, &tube, 1),
            Err(LossError::BadTInv { .. })
        ));
    }

    #[test]
    fn vel_loss_cases() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![9.0, 0.0, 0.0, 0.0], vec![9.0, 1.0, -0.0, 0.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let l = vel_loss(&mut tape, &tube, &[1, 2, 3]).unwrap();
        // hi = (1, -0, 0), lo = (0, 0, 0) -> sum of magnitudes 1.
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-15);

        let rect = HyperRect::new(vec![0.0, 0.0, 0.0], vec![1.0, -0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let l = vel_loss(&mut tape, &tube, &[0, 1, 2]).unwrap();
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn obstacle_losses_far_rect_zero() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let obs = [SphereObstacle { center: vec![10.0, 10.0], radius: 0.5, margin: 1.0 }];
        let e = obs_entry_loss(&mut tape, &tube, &obs, &[0, 1]).unwrap();
        let p = obs_prox_loss(&mut tape, &tube, &obs, &[0, 1]).unwrap();
        assert_eq!(tape.scalar_value(e), 0.0);
        assert_eq!(tape.scalar_value(p), 0.0);
    }

    #[test]
    fn obstacle_entry_center_inside_rect() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let obs = [SphereObstacle { center: vec![1.0, 1.0], radius: 0.5, margin: 1.0 }];
        let e = obs_entry_loss(&mut tape, &tube, &obs, &[0, 1]).unwrap();
        assert!((tape.scalar_value(e) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn obstacle_prox_face_at_half_margin() {
        // Face at distance r + m/2: prox = (m/2)^2, entry = 0.
        let (r, m) = (0.5, 1.0);
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![-1.0, -1.0], vec![0.0, 0.0]).unwrap();
        let d = r + m / 2.0;
        let obs = [SphereObstacle { center: vec![d, 0.0], radius: r, margin: m }];
        let tube = tube_on_tape(&mut tape, &[rect]);
        let e = obs_entry_loss(&mut tape, &tube, &obs, &[0, 1]).unwrap();
        let p = obs_prox_loss(&mut tape, &tube, &obs, &[0, 1]).unwrap();
        assert_eq!(tape.scalar_value(e), 0.0);
        assert!((tape.scalar_value(p) - (m / 2.0) * (m / 2.0)).abs() < 1e-12);
    }

    fn demo_inputs<'a>(
        goal: &'a BoxRegion,
        boxes: &'a [BoxRegion],
        spheres: &'a [SphereObstacle],
        weights: LossWeights,
    ) -> LossInputs<'a> {
        LossInputs {
            goal,
            box_obstacles: boxes,
            sphere_obstacles: spheres,
            position_dims: &[0, 1],
            velocity_dims: &[],
            weights,
            t_inv: None,
            vol_normalizer: None,
        }
    }

    #[test]
    fn total_loss_zero_weights() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let goal = BoxRegion::uniform(vec![7.0, 7.0], 0.5);
        let inputs = demo_inputs(&goal, &[], &[], LossWeights::default());
        let (total, _) = total_loss(&mut tape, &tube, &inputs).unwrap();
        assert_eq!(tape.scalar_value(total), 0.0);
    }

    #[test]
    fn total_loss_single_term_scales() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![3.0, 4.0], vec![3.0, 4.0]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let goal = BoxRegion::uniform(vec![0.0, 0.0], 0.5);
        let weights = LossWeights { goal: 8.0, ..Default::default() };
        let inputs = demo_inputs(&goal, &[], &[], weights);
        let (total, bd) = total_loss(&mut tape, &tube, &inputs).unwrap();
        assert!((tape.scalar_value(total) - 40.0).abs() < 1e-12);
        assert!((bd.goal - 5.0).abs() < 1e-15);
        assert!((bd.total - 40.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_goal_overlap_is_subtracted() {
        let mut tape = Tape::new();
        let rect = HyperRect::new(vec![-0.5, -0.5], vec![0.5, 0.5]).unwrap();
        let tube = tube_on_tape(&mut tape, &[rect]);
        let goal = BoxRegion::uniform(vec![0.0, 0.0], 0.5);
        let weights = LossWeights { overlap_goal: 20.0, ..Default::default() };
        let inputs = demo_inputs(&goal, &[], &[], weights);
        let (total, bd) = total_loss(&mut tape, &tube, &inputs).unwrap();
        assert!((bd.overlap_goal - 1.0).abs() < 1e-12);
        assert!((tape.scalar_value(total) + 20.0).abs() < 1e-12);
    }

    #[test]
    fn term_gradients_match_fd() {
        // Gradient of each term w.r.t. tube endpoints, away from clamps.
        let goal = BoxRegion::uniform(vec![0.6, 0.4], 2.0);
        let spheres = [SphereObstacle { center: vec![0.4, 0.7], radius: 2.0, margin: 0.5 }];
        let base_lo = [0.1, 0.2];
        let base_hi = [0.9, 1.1];

        type Term = u8;
        let eval = |term: Term, lo: &[f64], hi: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let l = tape.konst_vec(lo).unwrap();
            let h = tape.konst_vec(hi).unwrap();
            let second = HyperRect::new(vec![2.0, 2.0], vec![2.5, 2.6]).unwrap();
            let tube = vec![
                TapeRect { lo: l, hi: h },
                tube_on_tape(&mut tape, &[second])[0],
            ];
            let id = match term {
                0 => goal_loss(&mut tape, &tube, &goal.center, &[0, 1]).unwrap(),
                1 => overlap_loss(&mut tape, &tube, &goal, &[0, 1]).unwrap(),
                2 => vol_loss(&mut tape, &tube, None).unwrap(),
                3 => inv_loss(&mut tape, &tube, 0).unwrap(),
                4 => vel_loss(&mut tape, &tube, &[0, 1]).unwrap(),
                5 => obs_entry_loss(&mut tape, &tube, &spheres, &[0, 1]).unwrap(),
                _ => obs_prox_loss(&mut tape, &tube, &spheres, &[0, 1]).unwrap(),
            };
            tape.scalar_value(id)
        };

        let h = 1e-6;
        for term in 0..7u8 {
            for c in 0..2 {
                // Analytic gradient via param leaves.
                let mut tape = Tape::new();
                let l = tape
                    .leaf(&crate::diffcore::Tensor::vector(base_lo.to_vec()), true)
                    .unwrap();
                let hi_leaf = tape
                    .leaf(&crate::diffcore::Tensor::vector(base_hi.to_vec()), true)
                    .unwrap();
                let second = HyperRect::new(vec![2.0, 2.0], vec![2.5, 2.6]).unwrap();
                let tube = vec![
                    TapeRect { lo: l, hi: hi_leaf },
                    tube_on_tape(&mut tape, &[second])[0],
                ];
                let id = match term {
                    0 => goal_loss(&mut tape, &tube, &goal.center, &[0, 1]).unwrap(),
                    1 => overlap_loss(&mut tape, &tube, &goal, &[0, 1]).unwrap(),
                    2 => vol_loss(&mut tape, &tube, None).unwrap(),
                    3 => inv_loss(&mut tape, &tube, 0).unwrap(),
                    4 => vel_loss(&mut tape, &tube, &[0, 1]).unwrap(),
                    5 => obs_entry_loss(&mut tape, &tube, &spheres, &[0, 1]).unwrap(),
                    _ => obs_prox_loss(&mut tape, &tube, &spheres, &[0, 1]).unwrap(),
                };
                let grads = tape.backward(id).unwrap();

                let mut lo_p = base_lo;
                lo_p[c] += h;
                let mut lo_m = base_lo;
                lo_m[c] -= h;
                let fd_lo = (eval(term, &lo_p, &base_hi) - eval(term, &lo_m, &base_hi)) / (2.0 * h);
                let ad_lo = grads.get(l).unwrap().values()[c];
                let rel = (ad_lo - fd_lo).abs() / (ad_lo.abs() + fd_lo.abs() + 1e-6);
                assert!(rel < 1e-4, "term {term} lo[{c}]: {ad_lo} vs {fd_lo}");

                let mut hi_p = base_hi;
                hi_p[c] += h;
                let mut hi_m = base_hi;
                hi_m[c] -= h;
                let fd_hi = (eval(term, &base_lo, &hi_p) - eval(term, &base_lo, &hi_m)) / (2.0 * h);
                let ad_hi = grads.get(hi_leaf).unwrap().values()[c];
                let rel = (ad_hi - fd_hi).abs() / (ad_hi.abs() + fd_hi.abs() + 1e-6);
                assert!(rel < 1e-4, "term {term} hi[{c}]: {ad_hi} vs {fd_hi}");
            }
        }
    }
}
