//! Energy-guided diffusion stratification for offline-to-online reinforcement learning.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece of the
//! laboratory: schedules and loss primitives, small MLPs with hand-written
//! backpropagation, toy point-mass environments, replay buffers, the diffusion
//! behavior model, the contrastive energy network, batch stratification, the
//! Cal-QL / IQL backbones and the sequential training loop. File formats, CLI and
//! anything touching the filesystem live in the `stratdiff-lab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agents;
pub mod diffusion;
pub mod energy;
pub mod envs;
mod error;
pub mod harness;
pub mod math;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod stratify;

pub use error::{Error, Result};
