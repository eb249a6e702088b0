//! Memory-aware proactive dialogue engine.
//!
//! Stored dialogue histories are condensed into topics ([`summarizer`]),
//! ranked against the live context by a pairwise-trained linear scorer
//! ([`ranker`]), and a per-turn policy decides when to steer the conversation
//! back to the top topic ([`engine`]). [`forge`] builds synthetic training and
//! test data, [`eval`] scores retrieval and sessions, and [`service`] / [`cli`]
//! expose it all. Every model call goes through [`gateway`].

pub mod cli;
pub mod config;
pub mod engine;
pub mod eval;
pub mod forge;
pub mod gateway;
pub mod prompts;
pub mod ranker;
pub mod service;
pub mod store;
pub mod summarizer;
