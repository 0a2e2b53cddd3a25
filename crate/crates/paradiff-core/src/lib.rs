//! Joint text+image masked discrete diffusion at desk scale.
//!
//! The crate implements the full pipeline on a synthetic color-grid task:
//!
//! - a minimal dense-tensor engine with reverse-mode differentiation
//!   ([`tensor`], [`gradcheck`]),
//! - a unified vocabulary and interleaved sequence layout with an
//!   absorbing-state forward noising process ([`layout`]),
//! - a small bidirectional transformer mask predictor ([`model`]),
//! - supervised training with a timestep-reweighted, modality-weighted
//!   masked objective and classifier-free-guidance input dropout ([`sft`]),
//! - parallel denoising with dual per-modality reveal schedules,
//!   confidence-based unmasking, and guidance ([`schedule`], [`sampler`]),
//! - trajectory-level reinforcement learning with normalized rewards and
//!   group-relative advantages, plus an output-level baseline ([`rl`]),
//! - the color-grid task with an exact partial-alignment oracle ([`task`]),
//! - and an experiment harness with CSV/JSON reports ([`harness`]).

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layout;
pub mod model;
pub mod optim;
pub mod par;
pub mod metrics;
pub mod real;
pub mod rl;
pub mod sampler;
pub mod schedule;
pub mod seeds;
pub mod sft;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
pub use real::{Precision, Real};
