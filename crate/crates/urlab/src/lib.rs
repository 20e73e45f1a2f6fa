//! Universal reinforcement learning laboratory.
//!
//! Bayesian history-based agents (AIXI-style Bayes-optimal agents,
//! knowledge-seeking agents, BayesExp, Thompson sampling, MDL) acting in
//! partially observable gridworlds, planned with history-based Monte-Carlo
//! tree search, plus a seeded experiment harness.

pub mod agents;
pub mod gridworld;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod planner;
pub mod primitives;
