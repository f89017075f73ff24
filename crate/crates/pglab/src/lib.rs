//! A desk-scale laboratory for policy-gradient post-training.
//!
//! The crate is built around one observation: SFT, REINFORCE, PPO, GRPO, CISPO, GSPO and
//! the offline SRFT/LUFFY objectives all optimize the same gradient shape — a stabilization
//! mask, times an advantage, times the likelihood gradient, divided by a reference policy's
//! probability. [`estimator`] implements that shape once, with the four components swappable;
//! [`algorithms`] carries independent loss-based implementations of every algorithm (plus
//! exact enumeration and finite differences) so the two routes can be differential-tested
//! against each other.
//!
//! Everything runs on an exactly-differentiable toy stack: a linear-softmax policy over a
//! sliding token window ([`policy`]), synthetic tasks with programmatic verifiers and
//! demonstrators ([`tasks`]), a performance-gated SFT/RL trainer ([`hpt`], [`trainer`]) and
//! evaluation metrics ([`metrics`]). All randomness flows through seeded ChaCha streams;
//! identical configs reproduce byte-identical metric streams.

pub mod algorithms;
pub mod estimator;
pub mod hpt;
pub mod metrics;
pub mod policy;
pub mod tasks;
pub mod trainer;

pub use estimator::{AdvantageInputs, EstimatorBatchItem, EstimatorComponents};
pub use policy::{Context, GradientVector, PolicyParams, TokenId, Trajectory, Vocabulary};
pub use tasks::Task;
