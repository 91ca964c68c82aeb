//! Vectorized planning on synthetic driving scenes.
//!
//! The crate covers instance-level planning constraints (ego-agent collision,
//! ego-boundary overstepping, ego-lane direction), an attention-based
//! planner trained with a small reverse-mode autodiff engine, a closed-loop
//! simulator and the open-loop evaluation protocol (L2 displacement error
//! and collision rate at 1/2/3 s).

pub mod ablation;
pub mod autodiff;
pub mod constraints;
pub mod error;
mod generator;
pub mod geometry;
pub mod interact;
pub mod learning;
pub mod metrics;
pub mod scene;
pub mod simulator;

pub use error::{Error, Result};
