//! Condenses dialogues into short topic sentences.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{self, ChatBackend, GatewayError, GenerationRequest, Message, JUDGE_TEMPERATURE};
use crate::prompts;
use crate::store::{Dialogue, HistoryBundle};

pub const MAX_TOPIC_CHARS: usize = 64;

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("dialogue `{0}` has no turns")]
    EmptyDialogue(String),
    #[error("summary for dialogue `{0}` is empty")]
    EmptyTopic(String),
    #[error("summarizing dialogue `{id}`: {source}")]
    Gateway {
        id: String,
        #[source]
        source: GatewayError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopicSource {
    Generated,
    Provided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub dialogue_id: String,
    pub topic: String,
    pub source: TopicSource,
}

impl TopicEntry {
    pub fn provided(dialogue_id: impl Into<String>, topic: impl Into<String>) -> Self {
        Self { dialogue_id: dialogue_id.into(), topic: topic.into(), source: TopicSource::Provided }
    }
}

pub fn summarize_request(dialogue: &Dialogue) -> GenerationRequest {
    let mut req = GenerationRequest::new(
        vec![Message::system(prompts::SUMMARIZE_SYSTEM), Message::user(dialogue.transcript())],
        JUDGE_TEMPERATURE,
    );
    req.max_tokens = 64;
    req
}

/// Cleans a raw completion into a topic: first non-blank line, optional
/// `Topic:` label and quotes removed, capped at [`MAX_TOPIC_CHARS`].
pub fn clean_topic(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or_default();
    let line = match line.get(..6) {
        Some(head) if head.eq_ignore_ascii_case("topic:") => line[6..].trim(),
        _ => line,
    };
    let line = line.trim_matches(|c| matches!(c, '"' | '\'' | '“' | '”' | '「' | '」')).trim();
    cap_topic(line)
}

/// Truncates to [`MAX_TOPIC_CHARS`] characters, at the last whitespace before
/// the cap when there is one.
pub fn cap_topic(text: &str) -> String {
    let text = text.trim();
    if text.chars().count() <= MAX_TOPIC_CHARS {
        return text.to_string();
    }
    let head: String = text.chars().take(MAX_TOPIC_CHARS).collect();
    // Whitespace right at the cap still counts as a clean cut.
    let next_is_space = text.chars().nth(MAX_TOPIC_CHARS).is_some_and(char::is_whitespace);
    if next_is_space {
        return head.trim_end().to_string();
    }
    match head.rfind(char::is_whitespace) {
        Some(i) if !head[..i].trim().is_empty() => head[..i].trim_end().to_string(),
        _ => head,
    }
}

pub fn summarize_topic(dialogue: &Dialogue, backend: &dyn ChatBackend) -> Result<TopicEntry, SummarizerError> {
    if dialogue.turns.is_empty() {
        return Err(SummarizerError::EmptyDialogue(dialogue.id.clone()));
    }
    let raw = gateway::chat(backend, &summarize_request(dialogue))
        .map_err(|source| SummarizerError::Gateway { id: dialogue.id.clone(), source })?;
    let topic = clean_topic(&raw);
    if topic.is_empty() {
        return Err(SummarizerError::EmptyTopic(dialogue.id.clone()));
    }
    Ok(TopicEntry { dialogue_id: dialogue.id.clone(), topic, source: TopicSource::Generated })
}

/// Summarizer with a per-run cache keyed by dialogue id and transcript hash.
pub struct Summarizer {
    backend: Arc<dyn ChatBackend>,
    cache: Mutex<HashMap<(String, [u8; 32]), TopicEntry>>,
}

impl Summarizer {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self { backend, cache: Mutex::new(HashMap::new()) }
    }

    pub fn summarize(&self, dialogue: &Dialogue) -> Result<TopicEntry, SummarizerError> {
        let digest: [u8; 32] = Sha256::digest(dialogue.transcript().as_bytes()).into();
        let key = (dialogue.id.clone(), digest);
        if let Some(hit) = self.cache.lock().expect("summary cache").get(&key) {
            return Ok(hit.clone());
        }
        let entry = summarize_topic(dialogue, self.backend.as_ref())?;
        self.cache.lock().expect("summary cache").insert(key, entry.clone());
        Ok(entry)
    }

    /// One entry per dialogue, in bundle order. Pre-set topics are kept.
    pub fn ensure_topics(&self, bundle: &HistoryBundle) -> Result<Vec<TopicEntry>, SummarizerError> {
        bundle
            .dialogues
            .iter()
            .map(|d| match d.topic.as_deref().map(str::trim) {
                Some(t) if !t.is_empty() => Ok(TopicEntry::provided(&d.id, cap_topic(t))),
                _ => self.summarize(d),
            })
            .collect()
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("summary cache").len()
    }
}

pub fn ensure_topics(
    bundle: &HistoryBundle,
    backend: Arc<dyn ChatBackend>,
) -> Result<Vec<TopicEntry>, SummarizerError> {
    Summarizer::new(backend).ensure_topics(bundle)
}
