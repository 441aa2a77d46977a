//! Game-theoretic machine unlearning.
//!
//! An unlearning module (leader) and a privacy module (follower) take turns
//! updating the same parameter vector of the unlearned model: the leader pulls
//! its posteriors toward a cheap alternative of the retrained model while
//! keeping accuracy on the retained data, the follower drives a membership
//! inference attacker's confidence on the forgotten samples toward a target
//! `λ`. Everything runs on a small `f64` reverse-mode autodiff engine.

pub mod error;
pub mod numcore;
pub mod rng;

pub use error::{Error, Result};
pub mod datasets;
pub mod io;
pub mod models;
pub mod attack;
pub mod game;
pub mod eval;
