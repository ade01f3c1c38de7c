//! Confidence-conditioned value learning for tabular offline RL.
//!
//! Learns `Q(s, a, δ)`, a family of lower bounds on the optimal values indexed
//! by a confidence level δ, from a fixed dataset, and adapts δ online from the
//! Bellman residuals of observed transitions.

pub mod baselines;
pub mod ccvl;
pub mod data;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod mdp;
pub mod policy;
pub mod saddle;

pub use ccvl::{BoundKind, ConfidenceGrid, ConfidenceQ, SolveReport, Update};
pub use data::{OfflineDataset, Transition};
pub use error::{Error, Result};
pub use mdp::{Policy, QTable, TabularMdp};
