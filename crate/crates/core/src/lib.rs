//! Whittle-index beam scheduling for a millimetre-wave base station serving
//! `K` users with `B < K` beams.
//!
//! Each user's queue is an arm of a restless bandit. Relaxing the beam
//! constraint with a per-slot tax `λ` on passive users decouples the arms into
//! single-user average-cost MDPs ([`mdp`]); the tax at which a user is
//! indifferent between forming a beam or not is its Whittle index
//! ([`whittle`]). The scheduler serves the `B` users with the smallest indices
//! ([`policies`]) and is compared against queue-length baselines in a
//! slot-synchronous simulator ([`simulator`]).
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! simulator and configuration layer use `f64`.

pub mod error;
pub mod experiments;
pub mod mdp;
pub mod model;
pub mod policies;
pub mod scalar;
pub mod simulator;
pub mod verify;
pub mod whittle;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use mdp::{QueueMdp, SolverKnobs, Threshold};
pub use model::{Action, PolicyKind, SystemConfig, UserParams};
pub use whittle::{IndexKnobs, WhittleTable};

// ── Concrete aliases ───────────────────────────────────────────────────────

pub type UserParams64 = UserParams<f64>;
pub type UserParams32 = UserParams<f32>;
pub type QueueMdp64 = QueueMdp<f64>;
pub type QueueMdp32 = QueueMdp<f32>;
pub type SolverKnobs64 = SolverKnobs<f64>;
pub type IndexKnobs64 = IndexKnobs<f64>;
pub type WhittleTable64 = WhittleTable<f64>;
pub type WhittleTable32 = WhittleTable<f32>;
pub type ValueSolution64 = mdp::ValueSolution<f64>;
