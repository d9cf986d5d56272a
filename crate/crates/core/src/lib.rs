//! Hyperparameter optimization with a seed-aware evaluation protocol.
//!
//! Optimizers (random search, DEHB, the PBT family) run against objectives
//! that map a configuration, a budget fraction and a seed to a cost. The
//! [`protocol`] module tunes on one set of seeds, tests incumbents on a
//! disjoint set, ranks methods and renders a reproducibility checklist.
//! Every evaluation goes through a [`runner::Runner`], which writes an
//! append-only [`journal`] that interrupted runs resume from.

pub mod budgets;
pub mod dehb;
pub mod export;
pub mod journal;
pub mod objectives;
pub mod pbt;
pub mod protocol;
pub mod rs;
pub mod runner;
pub mod seeding;
pub mod space;
pub mod stats;
pub mod sweeps;
