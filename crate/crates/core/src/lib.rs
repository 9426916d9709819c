//! Exact energy-based and autoregressive sequence models over finite token
//! spaces.
//!
//! The response space is small enough to enumerate, so every quantity
//! (log-partitions, sequence probabilities, KL divergences, expected risks)
//! can be computed exactly and cross-checked against brute force. The core
//! objects are:
//!
//! * [`seqspace::PrefixTree`]: the response prefixes, indexed breadth-first.
//! * [`RewardTable`] / [`LogitTable`]: per-(state, action) scores of an
//!   energy-based model and of an autoregressive model.
//! * [`bijection::map_r_to_q`] / [`bijection::map_q_to_r`]: the soft Bellman
//!   correspondence under which both models define the same distribution.
//!
//! All numeric types are generic over [`Scalar`] (`f32` or `f64`) and default
//! to `f64`; the `*32` aliases below name the single-precision variants.

pub mod arm;
pub mod bijection;
pub mod dist;
pub mod ebm;
pub mod error;
pub mod io;
pub mod rng;
pub mod scalar;
pub mod seqspace;
pub mod table;
pub mod train;

pub use dist::{NextTokenPolicy, SeqDistribution};
pub use error::{Error, Result};
pub use rng::RandomStream;
pub use scalar::Scalar;
pub use seqspace::{Mode, PrefixTree, SequenceId, StateId, VocabSpec};
pub use table::{EdgeTable, LogitTable, RewardTable};

pub type RewardTable32 = table::RewardTable<f32>;
pub type LogitTable32 = table::LogitTable<f32>;
pub type SeqDistribution32 = dist::SeqDistribution<f32>;
pub type NextTokenPolicy32 = dist::NextTokenPolicy<f32>;
pub type DataDistribution = train::DataDistribution<f64>;
pub type DataDistribution32 = train::DataDistribution<f32>;
