//! Pairwise topic ranking.
//!
//! A linear head scores a (context, topic) feature vector; training
//! maximizes the Bradley-Terry likelihood that judged-relevant topics
//! outscore judged-irrelevant ones. Ranking sorts topics by score.

mod features;
mod model;
mod pairs;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::store::{Speaker, Utterance};

pub use features::{context_text, feature_dim, featurize, featurize_all, featurize_embeddings};
pub use model::{
    loss_and_gradient, pair_probability, pairwise_loss, rank, rank_scores, score, softplus, train, train_traced,
    Gradient, RankerModel, TrainConfig, TrainMeta,
};
pub use pairs::{build_preference_pairs, judge_order, judge_request, parse_judge_order, JudgedPairs};

/// Topics sampled alongside the target when asking the judge.
pub const JUDGE_DISTRACTORS: usize = 29;
/// Width of the retrieval context window, in utterances.
pub const CONTEXT_WIDTH: usize = 5;

#[derive(Debug, Error)]
pub enum RankerError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("no topic ranked below the target")]
    NoNegatives,
    #[error("could not parse judge output: {0}")]
    JudgeParse(String),
    #[error("invalid context: {0}")]
    InvalidContext(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidConfig(String),
    #[error("no topics to rank")]
    NoTopics,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// The most recent utterances of a conversation (at most [`CONTEXT_WIDTH`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextWindow {
    utterances: Vec<Utterance>,
}

impl ContextWindow {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self, RankerError> {
        if utterances.is_empty() {
            return Err(RankerError::InvalidContext("context is empty".into()));
        }
        if utterances.len() > CONTEXT_WIDTH {
            return Err(RankerError::InvalidContext(format!(
                "context holds {} utterances, max {CONTEXT_WIDTH}",
                utterances.len()
            )));
        }
        Ok(Self { utterances })
    }

    /// The trailing [`CONTEXT_WIDTH`] utterances of `transcript`.
    pub fn tail(transcript: &[Utterance]) -> Result<Self, RankerError> {
        let start = transcript.len().saturating_sub(CONTEXT_WIDTH);
        Self::new(transcript[start..].to_vec())
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn ends_with_user(&self) -> bool {
        self.utterances.last().is_some_and(|u| u.speaker == Speaker::User)
    }

    pub fn text(&self) -> String {
        context_text(&self.utterances)
    }
}

/// A preference judgment in feature space: `pos` should outscore `neg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub topic_index: usize,
    pub score: f64,
}
