//! Absorbing-state discrete diffusion language models at desk scale.
//!
//! The crate covers the whole loop: corrupting token sequences toward the
//! all-`[MASK]` state ([`diffusion`]), scoring with a time-agnostic
//! bidirectional transformer or an exact enumeration oracle ([`denoiser`]),
//! training with the weighted masked cross-entropy ([`training`]), and
//! generating by iterative mask-predict decoding with length beams
//! ([`length`]).

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod exec;
pub mod length;
pub mod nn;
pub mod schedule;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use schedule::{NoiseSchedule, ScheduleFamily};
pub use vocab::{TokenId, Vocab};
