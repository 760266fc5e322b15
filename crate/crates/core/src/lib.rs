//! Gradient-flow training with loss path kernel accounting.
//!
//! The crate trains small differentiable models by explicit-Euler gradient
//! flow (or its mini-batch variant), accumulates the loss path kernel
//! `K_T(z, z') = ∫ ⟨∇ℓ(w_t, z), ∇ℓ(w_t, z')⟩ dt` along the way, and turns it
//! into generalization-bound quantities.

pub mod bounds;
pub mod data;
pub mod error;
pub mod flow;
pub mod lpk;
pub mod model;
pub mod numkit;
pub mod stability;

pub use error::{Error, Result};
