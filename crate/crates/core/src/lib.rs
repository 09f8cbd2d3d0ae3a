//! Tree-search engines for LLM-in-the-loop inference.
//!
//! The crate casts step-by-step reasoning as search over an MDP: states are
//! partial solutions, actions are reasoning steps, and LLMs are profiled into
//! roles (policy, reward, transition, plus auxiliary branching-necessity
//! evaluators). Two engines are provided, beam search ([`beam`]) and MCTS
//! ([`mcts`]), and both accept a plug-in chaining phase ([`cit`]) that extends
//! a node linearly while branching is unnecessary.
//!
//! [`costlab`] keeps a per-invocation ledger and the closed-form cost
//! calculators used to verify the efficiency guarantees against live runs.
//! [`backends`] offers an OpenAI-compatible HTTP client and a deterministic
//! scripted world that makes every cost law exactly checkable.

pub mod backends;
pub mod beam;
pub mod cit;
pub mod costlab;
pub mod error;
pub mod harness;
pub mod mcts;
pub mod roles;
pub mod tree;

pub use cit::{CitConfig, CitMethod, ClusterSet};
pub use costlab::{CostLedger, Phase, Recorder};
pub use error::Error;
pub use roles::{RoleKind, RoleSet};
pub use tree::{Action, ActionSource, NodeId, RewardSignal, SearchNode, SearchTree, State};
