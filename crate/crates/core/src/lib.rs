//! Stable imitation learning with neural mixtures of linear dynamical systems.
//!
//! A policy commands the velocity of the controllable state as a
//! softmax-weighted sum of linear systems pulling toward a fixed attractor.
//! Each system matrix is reparameterized so its symmetric part is positive
//! definite for every parameter value, which makes global asymptotic
//! convergence a structural property rather than something training has to
//! achieve.
//!
//! Modules, bottom-up:
//! - [`policy`]: the policy, its Lyapunov quantities and stability certificate.
//! - [`autodiff`] and [`weightnet`]: reverse-mode tape and the weight network.
//! - [`dataset`]: demonstrations, velocity targets, attractor.
//! - [`trainer`] and [`checkpoint`]: imitation loss, Adam, persistence.
//! - [`rollout`]: closed-loop simulation with perturbations and observation
//!   switches.
//! - [`eval`] and [`fixtures`]: reproduction metrics and synthetic tasks.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fixtures;
pub mod linalg;
pub mod policy;
pub mod rollout;
pub mod state;
pub mod trainer;
pub mod weightnet;

pub use error::{Error, Result};
pub use exec::Execution;
pub use linalg::Matrix;
pub use policy::{
    lyapunov_rate, lyapunov_value, policy_eval, reconstruct_a, reconstruct_l, verify_certificate,
    weight_forward, CompiledPolicy, ElementaryDs, PolicyParams, StabilityCertificate,
};
pub use state::{Image, ObsKind, Observation, StateVector};
