//! Multi-objective reinforcement learning workbench for autonomous
//! intersection management.
//!
//! A mixed petrol/electric fleet crosses a four-way unsignalized
//! intersection. A single ω-conditioned TD3 agent, built on relational graph
//! networks, learns a family of policies trading traffic efficiency against
//! CO₂ emissions; the resulting Pareto front is then analysed for fairness of
//! service between the two fleets.

pub mod error;
pub mod harness;
pub mod neural;
pub mod pareto;
pub mod reward;
pub mod scene_graph;
pub mod td3;
pub mod world;

pub use error::{Error, Result};
