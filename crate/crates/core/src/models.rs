//! Closed-loop system definitions: dynamics primitives and policy networks,
//! compiled into bound graphs.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crown::{BoundGraph, CrownError, GraphBuilder};
use crate::diffcore::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("policy output dim {policy} does not match control dim {control}")]
    ControlDim { policy: usize, control: usize },
    #[error("policy input dim {policy} does not match state dim {state}")]
    StateDim { policy: usize, state: usize },
    #[error("mlp needs at least input and output widths")]
    TooFewLayers,
    #[error(transparent)]
    Crown(#[from] CrownError),
}

/// Unicycle state: planar position and heading angle (radians). The heading
/// is never wrapped; intervals on it simply grow as needed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnicycleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Unicycle control: linear and angular velocity, per-step units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnicycleControl {
    pub v: f64,
    pub omega: f64,
}

/// Discrete-time unicycle update.
pub fn unicycle_step(s: UnicycleState, u: UnicycleControl) -> UnicycleState {
    UnicycleState {
        x: s.x + u.v * s.heading.cos(),
        y: s.y + u.v * s.heading.sin(),
        heading: s.heading + u.omega,
    }
}

/// 6D quadrotor state: position and velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadrotorState {
    pub pos: [f64; 3],
    pub vel: [f64; 3],
}

/// Acceleration commands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadrotorControl {
    pub accel: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuadrotorParams {
    pub dt: f64,
    /// Drag coefficient on v|v| terms.
    pub drag: f64,
    /// Coupling coefficient between velocity axes.
    pub coupling: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        QuadrotorParams { dt: 0.4, drag: 0.01, coupling: 0.005 }
    }
}

/// Three coupled double integrators with drag. The coupling factor orders
/// match the printed per-row equations (position rows: vy*vz, vz*vx, vx*vy;
/// velocity rows: vy*vz, vx*vz, vx*vy) and are transcribed verbatim even
/// though the y-row orders differ between position and velocity.
pub fn quadrotor_step(s: QuadrotorState, u: QuadrotorControl, p: &QuadrotorParams) -> QuadrotorState {
    let [vx, vy, vz] = s.vel;
    let [ax, ay, az] = u.accel;
    let (cc, cd, dt) = (p.coupling, p.drag, p.dt);
    let half_dt2 = dt * dt / 2.0;

    let acc_px = ax + cc * vy * vz - cd * vx * vx.abs();
    let acc_py = ay + cc * vz * vx - cd * vy * vy.abs();
    let acc_pz = az + cc * vx * vy - cd * vz * vz.abs();
    let acc_vx = ax + cc * vy * vz - cd * vx * vx.abs();
    let acc_vy = ay + cc * vx * vz - cd * vy * vy.abs();
    let acc_vz = az + cc * vx * vy - cd * vz * vz.abs();

    QuadrotorState {
        pos: [
            s.pos[0] + vx * dt + acc_px * half_dt2,
            s.pos[1] + vy * dt + acc_py * half_dt2,
            s.pos[2] + vz * dt + acc_pz * half_dt2,
        ],
        vel: [vx + acc_vx * dt, vy + acc_vy * dt, vz + acc_vz * dt],
    }
}

/// Dynamics selector for graph compilation.
#[derive(Clone, Debug)]
pub enum Dynamics {
    Unicycle,
    Quadrotor(QuadrotorParams),
}

impl Dynamics {
    pub fn state_dim(&self) -> usize {
        match self {
            Dynamics::Unicycle => 3,
            Dynamics::Quadrotor(_) => 6,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Dynamics::Unicycle => 2,
            Dynamics::Quadrotor(_) => 3,
        }
    }
}

/// Fully-connected ReLU network; `widths` is the full chain
/// `[n_x, hidden..., n_u]`.
#[derive(Clone, Debug)]
pub struct MlpPolicy {
    pub widths: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Scaled-uniform weight range for a layer: 0.1 * sqrt(6 / (n_in + n_out)).
pub fn init_weight_range(n_in: usize, n_out: usize) -> f64 {
    0.1 * (6.0 / (n_in + n_out) as f64).sqrt()
}

impl MlpPolicy {
    /// Deterministic initialization: weights uniform within the scaled range
    /// per layer, biases zero.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self, ModelError> {
        if widths.len() < 2 {
            return Err(ModelError::TooFewLayers);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let r = init_weight_range(n_in, n_out);
            let dist = Uniform::new_inclusive(-r, r);
            let w: Vec<f64> = (0..n_out * n_in).map(|_| dist.sample(&mut rng)).collect();
            weights.push(Tensor::matrix(n_out, n_in, w).expect("shape"));
            biases.push(Tensor::vector(vec![0.0; n_out]));
        }
        Ok(MlpPolicy { widths: widths.to_vec(), weights, biases })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Affine policy u = k^T x + b with gain stored as an n_x-by-n_u matrix.
#[derive(Clone, Debug)]
pub struct AffinePolicy {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl AffinePolicy {
    pub fn init(n_x: usize, n_u: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = init_weight_range(n_x, n_u);
        let dist = Uniform::new_inclusive(-r, r);
        let g: Vec<f64> = (0..n_x * n_u).map(|_| dist.sample(&mut rng)).collect();
        AffinePolicy {
            gain: Tensor::matrix(n_x, n_u, g).expect("shape"),
            bias: Tensor::vector(vec![0.0; n_u]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gain.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.gain.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub enum Policy {
    Mlp(MlpPolicy),
    Affine(AffinePolicy),
}

impl Policy {
    pub fn input_dim(&self) -> usize {
        match self {
            Policy::Mlp(p) => p.input_dim(),
            Policy::Affine(p) => p.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Policy::Mlp(p) => p.output_dim(),
            Policy::Affine(p) => p.output_dim(),
        }
    }
}

/// Append the policy subgraph; returns the control node.
fn build_policy(b: &mut GraphBuilder, policy: &Policy) -> Result<usize, ModelError> {
    match policy {
        Policy::Mlp(mlp) => {
            let mut h = b.input();
            let layers = mlp.weights.len();
            for l in 0..layers {
                h = b.affine(h, mlp.weights[l].clone(), mlp.biases[l].clone(), true)?;
                if l + 1 < layers {
                    h = b.relu(h)?;
                }
            }
            Ok(h)
        }
        Policy::Affine(p) => {
            // Graph affine nodes want (n_u x n_x); the gain is stored n_x x n_u.
            let (n_x, n_u) = (p.input_dim(), p.output_dim());
            let mut w = vec![0.0; n_u * n_x];
            for i in 0..n_x {
                for j in 0..n_u {
                    w[j * n_x + i] = p.gain.values()[i * n_u + j];
                }
            }
            let node = b.affine(
                b.input(),
                Tensor::matrix(n_u, n_x, w).expect("shape"),
                p.bias.clone(),
                true,
            )?;
            Ok(node)
        }
    }
}

/// Compile dynamics and policy into one closed-loop step graph whose forward
/// pass equals `dynamics(state, policy(state))` exactly.
pub fn compile(dynamics: &Dynamics, policy: &Policy) -> Result<BoundGraph, ModelError> {
    if policy.output_dim() != dynamics.control_dim() {
        return Err(ModelError::ControlDim {
            policy: policy.output_dim(),
            control: dynamics.control_dim(),
        });
    }
    if policy.input_dim() != dynamics.state_dim() {
        return Err(ModelError::StateDim {
            policy: policy.input_dim(),
            state: dynamics.state_dim(),
        });
    }
    match dynamics {
        Dynamics::Unicycle => {
            let mut b = GraphBuilder::new(3);
            let u = build_policy(&mut b, policy)?;
            let px = b.select(b.input(), &[0])?;
            let py = b.select(b.input(), &[1])?;
            let heading = b.select(b.input(), &[2])?;
            let v = b.select(u, &[0])?;
            let omega = b.select(u, &[1])?;
            let cos_h = b.cos(heading)?;
            let sin_h = b.sin(heading)?;
            let dx = b.bilinear(v, cos_h)?;
            let dy = b.bilinear(v, sin_h)?;
            let nx = b.add(px, dx)?;
            let ny = b.add(py, dy)?;
            let nh = b.add(heading, omega)?;
            let out = b.concat(&[nx, ny, nh])?;
            Ok(b.finish(out)?)
        }
        Dynamics::Quadrotor(p) => {
            let mut b = GraphBuilder::new(6);
            let u = build_policy(&mut b, policy)?;
            let (cc, cd, dt) = (p.coupling, p.drag, p.dt);
            let half_dt2 = dt * dt / 2.0;

            let vels: Vec<usize> = (0..3)
                .map(|i| b.select(b.input(), &[3 + i]))
                .collect::<Result<_, _>>()?;
            // Coupling operand order per row, exactly as printed.
            let pos_pairs = [(1usize, 2usize), (2, 0), (0, 1)];
            let vel_pairs = [(1usize, 2usize), (0, 2), (0, 1)];

            let accel = |b: &mut GraphBuilder, axis: usize, pair: (usize, usize)| -> Result<usize, ModelError> {
                let a = b.select(u, &[axis])?;
                let coup = b.bilinear(vels[pair.0], vels[pair.1])?;
                let coup_s = b.scale_const(coup, cc)?;
                let drag = b.signed_square(vels[axis])?;
                let drag_s = b.scale_const(drag, -cd)?;
                let s1 = b.add(a, coup_s)?;
                Ok(b.add(s1, drag_s)?)
            };

            let mut out_parts = Vec::with_capacity(6);
            for axis in 0..3 {
                let p_i = b.select(b.input(), &[axis])?;
                let acc = accel(&mut b, axis, pos_pairs[axis])?;
                let v_dt = b.scale_const(vels[axis], dt)?;
                let acc_dt2 = b.scale_const(acc, half_dt2)?;
                let s1 = b.add(p_i, v_dt)?;
                out_parts.push(b.add(s1, acc_dt2)?);
            }
            let mut vel_parts = Vec::with_capacity(3);
            for axis in 0..3 {
                let acc = accel(&mut b, axis, vel_pairs[axis])?;
                let acc_dt = b.scale_const(acc, dt)?;
                vel_parts.push(b.add(vels[axis], acc_dt)?);
            }
            out_parts.extend(vel_parts);
            let out = b.concat(&out_parts)?;
            Ok(b.finish(out)?)
        }
    }
}
