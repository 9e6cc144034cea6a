//! Scenario files: schema, validation, and builders for the closed-loop
//! system, regions, and training configuration they describe.
//!
//! The on-disk format is TOML. Parsing is strict (unknown fields are
//! rejected) and followed by semantic validation with field-level messages.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crown::{BoundMode, BoundConfig, HyperRect, Intermediate};
use crate::losses::{BoxRegion, LossWeights, SphereObstacle};
use crate::models::{compile, AffinePolicy, Dynamics, MlpPolicy, ModelError, Policy, QuadrotorParams};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("scenario field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DynamicsKind {
    Unicycle,
    Quadrotor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemCfg {
    pub dynamics: DynamicsKind,
    /// State dims treated as position coordinates for regions and overlap.
    pub position_dims: Vec<usize>,
    #[serde(default)]
    pub velocity_dims: Vec<usize>,
    #[serde(default)]
    pub quadrotor: Option<QuadrotorParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum PolicyCfg {
    Mlp { hidden: Vec<usize> },
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSetCfg {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalCfg {
    pub center: Vec<f64>,
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum ObstacleCfg {
    Box { center: Vec<f64>, half_width: f64 },
    Sphere {
        center: Vec<f64>,
        radius: f64,
        #[serde(default = "default_margin")]
        margin: f64,
    },
}

fn default_margin() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsCfg {
    #[serde(default)]
    pub goal: f64,
    #[serde(default)]
    pub overlap_goal: f64,
    #[serde(default)]
    pub overlap_obs: f64,
    #[serde(default)]
    pub vol: f64,
    #[serde(default)]
    pub inv: f64,
    #[serde(default)]
    pub vel: f64,
    #[serde(default)]
    pub obs_entry: f64,
    #[serde(default)]
    pub obs_prox: f64,
    #[serde(default)]
    pub t_inv: Option<usize>,
    /// Apply the per-step bias and scale by the initial-set volume to the
    /// volume term.
    #[serde(default)]
    pub normalize_vol: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCfg {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_plateau_window")]
    pub plateau_window: usize,
    #[serde(default = "default_plateau_tol")]
    pub plateau_tol: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_mode")]
    pub mode: BoundMode,
    #[serde(default)]
    pub early_stop_on_cert: bool,
    #[serde(default = "default_cert_check_every")]
    pub cert_check_every: usize,
    /// Use the forward interval pre-pass for intermediate bounds.
    #[serde(default)]
    pub ibp_intermediate: bool,
    /// Gradients through relaxation coefficients (ablation switch).
    #[serde(default = "default_true")]
    pub slope_grads: bool,
    /// Alternative bilinear plane pair.
    #[serde(default)]
    pub alt_bilinear: bool,
}

fn default_plateau_window() -> usize {
    500
}
fn default_plateau_tol() -> f64 {
    1e-5
}
fn default_checkpoint_every() -> usize {
    1000
}
fn default_mode() -> BoundMode {
    BoundMode::Crown
}
fn default_cert_check_every() -> usize {
    200
}
fn default_true() -> bool {
    true
}

/// Which verification criteria the trained system must meet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriteriaCfg {
    #[serde(default = "default_true")]
    pub avoid_obstacles: bool,
    /// "containment" | "none"
    #[serde(default = "default_goal_criterion")]
    pub goal: GoalCriterion,
    #[serde(default)]
    pub invariance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum GoalCriterion {
    /// Some rect's positional bounds lie inside the goal box.
    Containment,
    /// Final rect center within the given distance of the goal center.
    Proximity { distance: f64 },
    None,
}

fn default_goal_criterion() -> GoalCriterion {
    GoalCriterion::Containment
}

impl Default for CriteriaCfg {
    fn default() -> Self {
        CriteriaCfg { avoid_obstacles: true, goal: GoalCriterion::Containment, invariance: false }
    }
}

/// A complete scenario: system, regions, horizon, weights and training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub system: SystemCfg,
    pub policy: PolicyCfg,
    pub initial_set: InitialSetCfg,
    pub goal: GoalCfg,
    #[serde(default)]
    pub obstacles: Vec<ObstacleCfg>,
    pub horizon: usize,
    pub weights: WeightsCfg,
    pub train: TrainCfg,
    #[serde(default)]
    pub criteria: CriteriaCfg,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Hash of the canonical serialization; stamped into artifacts.
    pub fn config_hash(&self) -> String {
        let canon = self.to_toml().unwrap_or_default();
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        hex_string(&h.finalize())
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics().state_dim()
    }

    pub fn dynamics(&self) -> Dynamics {
        match self.system.dynamics {
            DynamicsKind::Unicycle => Dynamics::Unicycle,
            DynamicsKind::Quadrotor => {
                Dynamics::Quadrotor(self.system.quadrotor.unwrap_or_default())
            }
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n_x = self.state_dim();
        if self.initial_set.lo.len() != n_x || self.initial_set.hi.len() != n_x {
            return Err(invalid(
                "initial_set",
                format!("expected {n_x} dims, got {}/{}", self.initial_set.lo.len(), self.initial_set.hi.len()),
            ));
        }
        for (i, (l, h)) in self.initial_set.lo.iter().zip(&self.initial_set.hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(invalid("initial_set", format!("dim {i}: [{l}, {h}] inverted or non-finite")));
            }
        }
        if self.system.position_dims.is_empty() {
            return Err(invalid("system.position_dims", "must not be empty"));
        }
        for &d in self.system.position_dims.iter().chain(&self.system.velocity_dims) {
            if d >= n_x {
                return Err(invalid("system.position_dims", format!("dim {d} out of range (state dim {n_x})")));
            }
        }
        let n_p = self.system.position_dims.len();
        if self.goal.center.len() != n_p {
            return Err(invalid(
                "goal.center",
                format!("expected {n_p} coords (one per position dim), got {}", self.goal.center.len()),
            ));
        }
        if self.goal.half_width <= 0.0 {
            return Err(invalid("goal.half_width", "must be positive"));
        }
        for (k, obs) in self.obstacles.iter().enumerate() {
            match obs {
                ObstacleCfg::Box { center, half_width } => {
                    if center.len() != n_p {
                        return Err(invalid(&format!("obstacles[{k}].center"), format!("expected {n_p} coords")));
                    }
                    if *half_width <= 0.0 {
                        return Err(invalid(&format!("obstacles[{k}].half_width"), "must be positive"));
                    }
                }
                ObstacleCfg::Sphere { center, radius, margin } => {
                    if center.len() != n_p {
                        return Err(invalid(&format!("obstacles[{k}].center"), format!("expected {n_p} coords")));
                    }
                    if *radius <= 0.0 {
                        return Err(invalid(&format!("obstacles[{k}].radius"), "must be positive"));
                    }
                    if *margin < 0.0 {
                        return Err(invalid(&format!("obstacles[{k}].margin"), "must be non-negative"));
                    }
                }
            }
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if let Some(t_inv) = self.weights.t_inv {
            if t_inv >= self.horizon {
                return Err(invalid("weights.t_inv", format!("must be below horizon {}", self.horizon)));
            }
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(invalid("train.lr", "must be positive"));
        }
        if let PolicyCfg::Mlp { hidden } = &self.policy {
            if hidden.iter().any(|&w| w == 0) {
                return Err(invalid("policy.hidden", "layer widths must be positive"));
            }
        }
        if self.criteria.invariance && self.weights.t_inv.is_none() {
            return Err(invalid("criteria.invariance", "requires weights.t_inv"));
        }
        Ok(())
    }

    pub fn initial_rect(&self) -> HyperRect {
        HyperRect::new(self.initial_set.lo.clone(), self.initial_set.hi.clone())
            .expect("validated at load")
    }

    pub fn goal_region(&self) -> BoxRegion {
        BoxRegion::uniform(self.goal.center.clone(), self.goal.half_width)
    }

    pub fn box_obstacles(&self) -> Vec<BoxRegion> {
        self.obstacles
            .iter()
            .filter_map(|o| match o {
                ObstacleCfg::Box { center, half_width } => {
                    Some(BoxRegion::uniform(center.clone(), *half_width))
                }
                _ => None,
            })
            .collect()
    }

    pub fn sphere_obstacles(&self) -> Vec<SphereObstacle> {
        self.obstacles
            .iter()
            .filter_map(|o| match o {
                ObstacleCfg::Sphere { center, radius, margin } => Some(SphereObstacle {
                    center: center.clone(),
                    radius: *radius,
                    margin: *margin,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            goal: self.weights.goal,
            overlap_goal: self.weights.overlap_goal,
            overlap_obs: self.weights.overlap_obs,
            vol: self.weights.vol,
            inv: self.weights.inv,
            vel: self.weights.vel,
            obs_entry: self.weights.obs_entry,
            obs_prox: self.weights.obs_prox,
        }
    }

    pub fn bound_config(&self) -> BoundConfig {
        BoundConfig {
            mode: self.train.mode,
            intermediate: if self.train.ibp_intermediate {
                Intermediate::Forward
            } else {
                Intermediate::Backward
            },
            alt_bilinear: self.train.alt_bilinear,
            slope_grads: self.train.slope_grads,
            ..Default::default()
        }
    }

    /// Initialize the policy and compile the closed-loop graph.
    pub fn build_graph(&self, seed: u64) -> Result<crate::crown::BoundGraph, ScenarioError> {
        let dynamics = self.dynamics();
        let (n_x, n_u) = (dynamics.state_dim(), dynamics.control_dim());
        let policy = match &self.policy {
            PolicyCfg::Mlp { hidden } => {
                let mut widths = vec![n_x];
                widths.extend_from_slice(hidden);
                widths.push(n_u);
                Policy::Mlp(MlpPolicy::init(&widths, seed)?)
            }
            PolicyCfg::Affine => Policy::Affine(AffinePolicy::init(n_x, n_u, seed)),
        };
        Ok(compile(&dynamics, &policy)?)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_toml() -> String {
        r#"
name = "demo"
horizon = 8

[system]
dynamics = "unicycle"
position_dims = [0, 1]

[policy]
kind = "mlp"
hidden = [4, 4]

[initial_set]
lo = [-0.1, 0.9, -0.1]
hi = [0.1, 1.1, 0.1]

[goal]
center = [7.0, 7.0]
half_width = 0.5

[[obstacles]]
kind = "box"
center = [2.0, 4.0]
half_width = 0.5

[weights]
goal = 8.0
overlap_goal = 20.0
overlap_obs = 15.0
vol = 0.5

[train]
lr = 1e-4
epochs = 100
seed = 3
"#
        .to_string()
    }

    #[test]
    fn parse_and_roundtrip_identity() {
        let s1 = Scenario::from_toml(&demo_toml()).unwrap();
        let text = s1.to_toml().unwrap();
        let s2 = Scenario::from_toml(&text).unwrap();
        assert_eq!(s1, s2);
        // And the canonical form is a fixed point.
        assert_eq!(text, s2.to_toml().unwrap());
    }

    #[test]
    fn unknown_field_rejected() {
        let bad = demo_toml().replace("[train]", "[train]\nbogus_field = 1");
        let err = Scenario::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn dim_mismatch_diagnostic_names_field() {
        let bad = demo_toml().replace("lo = [-0.1, 0.9, -0.1]", "lo = [-0.1, 0.9]");
        let err = Scenario::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("initial_set"), "{err}");
    }

    #[test]
    fn t_inv_beyond_horizon_rejected() {
        let bad = demo_toml().replace("[weights]", "[weights]\nt_inv = 8");
        let err = Scenario::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("t_inv"), "{err}");
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let s1 = Scenario::from_toml(&demo_toml()).unwrap();
        let s2 = Scenario::from_toml(&demo_toml()).unwrap();
        assert_eq!(s1.config_hash(), s2.config_hash());
        let mut s3 = s1.clone();
        s3.train.seed = 4;
        assert_ne!(s1.config_hash(), s3.config_hash());
    }

    #[test]
    fn build_graph_deterministic_per_seed() {
        let s = Scenario::from_toml(&demo_toml()).unwrap();
        let a = s.build_graph(3).unwrap();
        let b = s.build_graph(3).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.values(), pb.values());
        }
    }
}
