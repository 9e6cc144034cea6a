//! Post-hoc and in-loop verification: reach-avoid checks, goal containment,
//! forward-invariance certificates, and the Monte-Carlo soundness oracle.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crown::{step_bounds, BoundConfig, BoundGraph, CrownError, HyperRect, ReachTube};
use crate::losses::{BoxRegion, SphereObstacle};

/// True iff the rect's projection onto `dims` shares no point with the box
/// region (closed sets: touching faces are not disjoint).
pub fn box_disjoint(rect: &HyperRect, region: &BoxRegion, dims: &[usize]) -> bool {
    let r_lo = region.lo();
    let r_hi = region.hi();
    dims.iter()
        .enumerate()
        .any(|(k, &d)| rect.hi()[d] < r_lo[k] || rect.lo()[d] > r_hi[k])
}

/// True iff `inner` is contained in `outer` dilated by `tol`.
pub fn box_contains(outer: &HyperRect, inner: &HyperRect, tol: f64) -> bool {
    outer.dim() == inner.dim()
        && (0..outer.dim()).all(|i| {
            inner.lo()[i] >= outer.lo()[i] - tol && inner.hi()[i] <= outer.hi()[i] + tol
        })
}

/// Signed per-face margins of `inner` inside `outer` (negative: sticking out).
pub fn containment_margins(outer: &HyperRect, inner: &HyperRect) -> Vec<(f64, f64)> {
    (0..outer.dim())
        .map(|i| (inner.lo()[i] - outer.lo()[i], outer.hi()[i] - inner.hi()[i]))
        .collect()
}

/// Distance from the rect (projected onto `dims`) to the sphere surface:
/// `||nearest - center|| - r`, negative inside the radius.
pub fn sphere_clearance(rect: &HyperRect, obs: &SphereObstacle, dims: &[usize]) -> f64 {
    let mut d2 = 0.0;
    for (k, &d) in dims.iter().enumerate() {
        let n = obs.center[k].clamp(rect.lo()[d], rect.hi()[d]);
        let diff = n - obs.center[k];
        d2 += diff * diff;
    }
    d2.sqrt() - obs.radius
}

/// A forward-invariance certificate: the one-step CROWN image of the
/// candidate set is contained in the set itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceCert {
    pub t_star: usize,
    pub set: HyperRect,
    pub image: HyperRect,
    /// Smallest per-face slack of the image inside the set.
    pub margin: f64,
}

/// Scan the tube from `start_t` for the first timestep whose rect is forward
/// invariant. The one-step image of the candidate itself is recomputed with
/// fresh bound propagation (a sound sufficient condition), not read from the
/// stored tube.
pub fn invariance_check(
    graph: &BoundGraph,
    tube: &ReachTube,
    start_t: usize,
    cfg: &BoundConfig,
    tol: f64,
) -> Result<Option<InvarianceCert>, CrownError> {
    for (t, rect) in tube.rects.iter().enumerate().skip(start_t) {
        let image = step_bounds(graph, rect, cfg)?;
        if box_contains(rect, &image, tol) {
            let margin = containment_margins(rect, &image)
                .into_iter()
                .flat_map(|(a, b)| [a, b])
                .fold(f64::INFINITY, f64::min);
            return Ok(Some(InvarianceCert { t_star: t, set: rect.clone(), image, margin }));
        }
    }
    Ok(None)
}

/// Simulate `n` exact trajectories from uniform samples of the tube's initial
/// set and count (t, dim) events where a state exits the stored bounds.
/// Sound bounds give exactly zero. Per-sample seeds are derived from `seed`,
/// so the result does not depend on iteration order.
pub fn mc_soundness(graph: &BoundGraph, tube: &ReachTube, n: usize, seed: u64) -> usize {
    let x0 = &tube.rects[0];
    let dims = x0.dim();
    let mut violations = 0usize;
    let mut scratch = Vec::new();
    for sample in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(sample as u64 + 1)));
        let mut x: Vec<f64> = (0..dims)
            .map(|i| {
                if x0.hi()[i] > x0.lo()[i] {
                    rng.gen_range(x0.lo()[i]..=x0.hi()[i])
                } else {
                    x0.lo()[i]
                }
            })
            .collect();
        for rect in tube.rects.iter().skip(1) {
            x = graph.forward_into(&x, &mut scratch);
            for d in 0..dims {
                if x[d] < rect.lo()[d] || x[d] > rect.hi()[d] {
                    violations += 1;
                }
            }
        }
    }
    violations
}

/// Exact closed-loop trajectories from uniform initial samples, for plotting
/// and reporting.
pub fn sample_trajectories(
    graph: &BoundGraph,
    x0: &HyperRect,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Vec<Vec<Vec<f64>>> {
    let dims = x0.dim();
    let mut scratch = Vec::new();
    (0..n)
        .map(|sample| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(sample as u64 + 1)));
            let mut x: Vec<f64> = (0..dims)
                .map(|i| {
                    if x0.hi()[i] > x0.lo()[i] {
                        rng.gen_range(x0.lo()[i]..=x0.hi()[i])
                    } else {
                        x0.lo()[i]
                    }
                })
                .collect();
            let mut traj = vec![x.clone()];
            for _ in 0..horizon {
                x = graph.forward_into(&x, &mut scratch);
                traj.push(x.clone());
            }
            traj
        })
        .collect()
}

/// Verification outcome of one tube against a scenario's regions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertReport {
    /// Per-timestep flag: rect disjoint from every obstacle (boxes and spheres).
    pub avoid_flags: Vec<bool>,
    /// First timestep whose positional bounds lie inside the goal box.
    pub goal_containment_t: Option<usize>,
    /// Distance from the final rect's positional center to the goal center.
    pub final_goal_distance: f64,
    pub invariance: Option<InvarianceCert>,
    pub mc_violations: Option<usize>,
    /// Minimum sphere clearance over all timesteps and obstacles, if any spheres.
    pub min_sphere_clearance: Option<f64>,
}

impl CertReport {
    pub fn all_avoided(&self) -> bool {
        self.avoid_flags.iter().all(|f| *f)
    }
}

/// Geometry checks of a tube against goal and obstacles.
pub fn check_tube(
    tube: &ReachTube,
    goal: &BoxRegion,
    box_obstacles: &[BoxRegion],
    sphere_obstacles: &[SphereObstacle],
    position_dims: &[usize],
) -> CertReport {
    let avoid_flags: Vec<bool> = tube
        .rects
        .iter()
        .map(|r| {
            box_obstacles.iter().all(|o| box_disjoint(r, o, position_dims))
                && sphere_obstacles
                    .iter()
                    .all(|o| sphere_clearance(r, o, position_dims) > 0.0)
        })
        .collect();

    let goal_lo = goal.lo();
    let goal_hi = goal.hi();
    let goal_containment_t = tube.rects.iter().position(|r| {
        position_dims.iter().enumerate().all(|(k, &d)| {
            r.lo()[d] >= goal_lo[k] && r.hi()[d] <= goal_hi[k]
        })
    });

    let last = tube.rects.last().expect("tube is non-empty");
    let center = last.center();
    let final_goal_distance = position_dims
        .iter()
        .enumerate()
        .map(|(k, &d)| (center[d] - goal.center[k]).powi(2))
        .sum::<f64>()
        .sqrt();

    let min_sphere_clearance = if sphere_obstacles.is_empty() {
        None
    } else {
        Some(
            tube.rects
                .iter()
                .flat_map(|r| {
                    sphere_obstacles
                        .iter()
                        .map(|o| sphere_clearance(r, o, position_dims))
                        .collect::<Vec<_>>()
                })
                .fold(f64::INFINITY, f64::min),
        )
    };

    CertReport {
        avoid_flags,
        goal_containment_t,
        final_goal_distance,
        invariance: None,
        mc_violations: None,
        min_sphere_clearance,
    }
}
