//! Review-remask-refine decoding for block-wise masked diffusion models.
//!
//! Text is generated block by block. A process reward model periodically
//! reviews the most recent window of blocks; low-scoring blocks are partly
//! remasked, in proportion to how badly they scored, and re-denoised. The
//! best of several refined candidates replaces the window.
//!
//! Models are reached through the [`model::Denoiser`] and
//! [`model::ProcessReward`] traits. [`toyworld`] supplies oracle models over
//! a synthetic arithmetic-chain task, so the whole loop can be checked
//! against closed-form expectations.

pub mod baselines;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod ledger;
pub mod model;
pub mod remask;
pub mod replay;
pub mod selftest;
pub mod seq;
pub mod stream;
pub mod toyworld;
pub mod transcript;

pub use config::{Metric, PositionPolicy, R3Config};
pub use engine::{run_r3, ItemState, RunOutput};
pub use error::{ContractViolation, Error, Result, RunFailure};
pub use model::{CallAccountant, CallCounts, Denoiser, ProcessReward};
pub use seq::{TokenId, TokenSeq};
pub use stream::{Phase, StreamKey};
pub use transcript::{EventKind, Transcript};
