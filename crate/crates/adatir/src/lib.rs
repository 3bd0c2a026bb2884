//! Difficulty-aware efficiency rewards and Clipped Advantage Shaping (CAS)
//! for group-relative policy optimization, exercised on a synthetic
//! tool-integrated-reasoning environment.
//!
//! The crate is organized around five pieces:
//!
//! - [`advantage`]: the reward shaping and advantage estimators (vanilla,
//!   naive shaping, CAS) as pure functions over trajectory groups.
//! - [`env`]: the synthetic environment — tasks with latent difficulty, a
//!   bucketed categorical policy over tool budgets, a parametric success
//!   model where tools help hard tasks but not easy ones.
//! - [`trainer`]: clipped-surrogate policy-gradient training with analytic
//!   gradients and a finite-difference oracle.
//! - [`metrics`]: accuracy / ATC / Tool Productivity and budget sweeps.
//! - [`config`], [`runlog`], [`harness`]: experiment orchestration, JSONL
//!   step logs, checkpoints, conformance vectors, CSV exports.

pub mod advantage;
pub mod config;
pub mod env;
pub mod harness;
pub mod metrics;
pub mod runlog;
pub mod trainer;
