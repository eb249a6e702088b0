//! Judge-labelled preference pairs.
//!
//! The judge orders the target topic among up to [`JUDGE_DISTRACTORS`]
//! sampled distractors. Positives are the judge's top topic and the target
//! (one positive when they coincide); negatives are the topics the judge
//! placed strictly below the target. Each positive is paired with one
//! negative drawn uniformly at random.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gateway::{self, ChatBackend, EmbedBackend, GenerationRequest, Message, JUDGE_TEMPERATURE};
use crate::prompts;
use crate::store::render_transcript;
use crate::summarizer::TopicEntry;

use super::{featurize_all, ContextWindow, PreferencePair, RankerError, JUDGE_DISTRACTORS};

#[derive(Debug, Clone, PartialEq)]
pub struct JudgedPairs {
    /// Candidates in the order shown to the judge.
    pub candidates: Vec<TopicEntry>,
    /// Judge order as indices into `candidates`, most relevant first.
    pub order: Vec<usize>,
    pub positives: Vec<TopicEntry>,
    pub negatives: Vec<TopicEntry>,
    /// The negative paired with each positive, aligned with `positives`.
    pub chosen_negatives: Vec<TopicEntry>,
    pub pairs: Vec<PreferencePair>,
}

pub fn judge_request(context: &ContextWindow, candidates: &[TopicEntry]) -> GenerationRequest {
    let mut body =
        format!("Conversation:\n{}\n\n{}\n", render_transcript(context.utterances()), prompts::TOPICS_HEADER);
    for (i, t) in candidates.iter().enumerate() {
        body.push_str(&format!("{}. {}\n", i + 1, t.topic));
    }
    let mut req = GenerationRequest::new(
        vec![Message::system(prompts::JUDGE_SYSTEM), Message::user(body.trim_end())],
        JUDGE_TEMPERATURE,
    );
    req.max_tokens = 256;
    req
}

/// Parses a 1-based ranking of `n` items into 0-based indices.
pub fn parse_judge_order(raw: &str, n: usize) -> Result<Vec<usize>, RankerError> {
    let numbers: Vec<usize> = raw
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| RankerError::JudgeParse(e.to_string())))
        .collect::<Result<_, _>>()?;
    if numbers.len() != n {
        return Err(RankerError::JudgeParse(format!("expected {n} topic numbers, got {}", numbers.len())));
    }
    let mut seen = vec![false; n];
    for &k in &numbers {
        if k == 0 || k > n || std::mem::replace(&mut seen[k - 1], true) {
            return Err(RankerError::JudgeParse(format!("`{raw}` is not a permutation of 1..={n}")));
        }
    }
    Ok(numbers.into_iter().map(|k| k - 1).collect())
}

pub fn judge_order(
    context: &ContextWindow,
    candidates: &[TopicEntry],
    judge: &dyn ChatBackend,
) -> Result<Vec<usize>, RankerError> {
    let raw = gateway::chat(judge, &judge_request(context, candidates))?;
    parse_judge_order(&raw, candidates.len())
}

pub fn build_preference_pairs(
    context: &ContextWindow,
    target: &TopicEntry,
    pool: &[TopicEntry],
    judge: &dyn ChatBackend,
    embedder: &dyn EmbedBackend,
    rng_seed: u64,
) -> Result<JudgedPairs, RankerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let others: Vec<&TopicEntry> = pool.iter().filter(|t| t.dialogue_id != target.dialogue_id).collect();
    let mut candidates: Vec<TopicEntry> =
        others.choose_multiple(&mut rng, JUDGE_DISTRACTORS.min(others.len())).map(|t| (*t).clone()).collect();
    candidates.push(target.clone());
    candidates.shuffle(&mut rng);
    let target_idx =
        candidates.iter().position(|t| t.dialogue_id == target.dialogue_id).expect("target is a candidate");

    let order = judge_order(context, &candidates, judge)?;
    let target_rank = order.iter().position(|&i| i == target_idx).expect("order is a permutation");
    let negatives: Vec<TopicEntry> = order[target_rank + 1..].iter().map(|&i| candidates[i].clone()).collect();
    if negatives.is_empty() {
        return Err(RankerError::NoNegatives);
    }
    let mut positives = vec![candidates[order[0]].clone()];
    if order[0] != target_idx {
        positives.push(target.clone());
    }
    let chosen_negatives: Vec<TopicEntry> =
        positives.iter().map(|_| negatives.choose(&mut rng).expect("non-empty").clone()).collect();

    let mut topics = positives.clone();
    topics.extend(chosen_negatives.iter().cloned());
    let feats = featurize_all(context, &topics, embedder)?;
    let k = positives.len();
    let pairs = (0..k).map(|i| PreferencePair { pos: feats[i].clone(), neg: feats[k + i].clone() }).collect();
    Ok(JudgedPairs { candidates, order, positives, negatives, chosen_negatives, pairs })
}
