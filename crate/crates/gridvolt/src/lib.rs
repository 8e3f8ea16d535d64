//! Differentiable distribution-grid and EV-fleet simulation with
//! physics-informed TD3 training.
//!
//! The crate is organized bottom-up:
//! - [`diffmath`]: reverse-mode autodiff tape (real scalars, complex pairs).
//! - [`powerflow`]: per-unit grid model, Z-bus fixed-point solver (plain and
//!   tape-valued), Newton-Raphson verification oracle, grid file format.
//! - [`fleet`]: EV sessions, charger state, piecewise SoC transition.
//! - [`scenario`]: synthetic exogenous trajectories (loads, PV, prices,
//!   sessions), scenario files, and the replay store for K-step segments.
//! - [`env`]: the MDP — observation assembly, step pipeline, reward, and the
//!   tape-valued K-step rollout.
//! - [`agents`]: MLP networks, TD3 and physics-informed TD3 trainers,
//!   heuristic baselines, checkpoints.
//! - [`evalharness`]: episode metrics, multi-scenario aggregation, the
//!   brute-force planning oracle, report emission.

pub mod agents;
pub mod diffmath;
pub mod env;
pub mod evalharness;
pub mod fleet;
pub mod powerflow;
pub mod scenario;
