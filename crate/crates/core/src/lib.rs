//! Verification-in-the-loop training for neural control policies.
//!
//! The crate computes differentiable reachable-set outer bounds for a
//! discrete-time closed loop `x_{t+1} = f(x_t, pi_theta(x_t))`, descends loss
//! terms defined on those bounds (obstacle overlap, goal distance, bound
//! volume, non-invariance), and certifies the trained system's reach-avoid
//! and forward-invariance properties.
//!
//! Modules:
//! - [`diffcore`]: reverse-mode autodiff tape over dense `f64` tensors
//! - [`relax`]: sound interval arithmetic and per-primitive linear relaxations
//! - [`crown`]: backward bound propagation producing differentiable reach tubes
//! - [`models`]: unicycle / 6D quadrotor dynamics and policy networks
//! - [`losses`]: reachability-based loss terms and their weighted sum
//! - [`trainer`]: Adam-based verification-in-the-loop optimization
//! - [`certify`]: reach-avoid checks, invariance certificates, Monte-Carlo soundness
//! - [`scenario`]: scenario file schema, validation and builders

pub mod certify;
pub mod crown;
pub mod diffcore;
pub mod losses;
pub mod models;
pub mod relax;
pub mod scenario;
pub mod trainer;
