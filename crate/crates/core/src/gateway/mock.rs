//! Deterministic offline backend.
//!
//! Chat replies come from, in order: exact-fingerprint fixtures, pattern
//! rules (first match wins), then the fallback. Every reply is a function of
//! the request content alone.
//!
//! A fixture directory may hold:
//! - `chat.jsonl`: one [`ChatRule`] per line
//! - `embeddings.jsonl`: one [`EmbedRule`] per line
//! - `mock.json`: `{"fallback": "echo" | "synthetic", "embedding_dim": 256}`

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ChatBackend, EmbedBackend, EmbeddingVector, GatewayError, GenerationRequest, HashedEmbedder, Role,
    DEFAULT_EMBEDDING_DIM,
};
use crate::prompts;
use crate::store::read_jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    /// Every substring must occur somewhere in the request's message texts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// The last user message, trimmed, must end with this text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ends_with: Option<String>,
    pub response: String,
}

impl ChatRule {
    pub fn ends_with(tail: impl Into<String>, response: impl Into<String>) -> Self {
        Self { fingerprint: None, contains: Vec::new(), ends_with: Some(tail.into()), response: response.into() }
    }

    pub fn contains(needles: &[&str], response: impl Into<String>) -> Self {
        Self {
            fingerprint: None,
            contains: needles.iter().map(|s| s.to_string()).collect(),
            ends_with: None,
            response: response.into(),
        }
    }

    fn matches(&self, request: &GenerationRequest) -> bool {
        let contains_ok =
            self.contains.iter().all(|needle| request.messages.iter().any(|m| m.content.contains(needle.as_str())));
        let tail_ok = match &self.ends_with {
            Some(tail) => request.last_user_text().is_some_and(|t| t.trim_end().ends_with(tail.as_str())),
            None => true,
        };
        contains_ok && tail_ok
    }
}

/// Adds `weight` (or `vector`) for every occurrence of `keyword`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedRule {
    pub keyword: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl EmbedRule {
    pub fn axis(keyword: impl Into<String>, axis: usize) -> Self {
        Self { keyword: keyword.into(), axis: Some(axis), vector: None, weight: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    /// `"ECHO:" + last user text`.
    #[default]
    Echo,
    /// Well-formed, hash-seeded replies for this crate's own prompt templates.
    Synthetic,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MockOptions {
    #[serde(default)]
    fallback: Fallback,
    #[serde(default = "default_dim")]
    embedding_dim: usize,
}

fn default_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    by_fingerprint: HashMap<String, String>,
    rules: Vec<ChatRule>,
    embed_rules: Vec<EmbedRule>,
    fallback: Fallback,
    hashed: HashedEmbedder,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM)
    }
}

impl MockBackend {
    pub fn new(embedding_dim: usize) -> Self {
        Self {
            by_fingerprint: HashMap::new(),
            rules: Vec::new(),
            embed_rules: Vec::new(),
            fallback: Fallback::Echo,
            hashed: HashedEmbedder::new(embedding_dim),
        }
    }

    pub fn synthetic(embedding_dim: usize) -> Self {
        Self::new(embedding_dim).with_fallback(Fallback::Synthetic)
    }

    pub fn with_fallback(mut self, fallback: Fallback) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>, response: impl Into<String>) -> Self {
        self.by_fingerprint.insert(fingerprint.into(), response.into());
        self
    }

    pub fn with_rule(mut self, rule: ChatRule) -> Self {
        self.push_rule(rule);
        self
    }

    pub fn with_embed_rule(mut self, rule: EmbedRule) -> Self {
        self.embed_rules.push(rule);
        self
    }

    fn push_rule(&mut self, rule: ChatRule) {
        match &rule.fingerprint {
            Some(fp) => {
                self.by_fingerprint.insert(fp.clone(), rule.response);
            }
            None => self.rules.push(rule),
        }
    }

    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(GatewayError::Fixture(format!("{} is not a directory", dir.display())));
        }
        let fixture_err = |e: crate::store::StoreError| GatewayError::Fixture(e.to_string());
        let options = match std::fs::read_to_string(dir.join("mock.json")) {
            Ok(text) => serde_json::from_str::<MockOptions>(&text)
                .map_err(|e| GatewayError::Fixture(format!("mock.json: {e}")))?,
            Err(_) => MockOptions { fallback: Fallback::Echo, embedding_dim: DEFAULT_EMBEDDING_DIM },
        };
        let mut mock = Self::new(options.embedding_dim).with_fallback(options.fallback);
        let chat_path = dir.join("chat.jsonl");
        if chat_path.exists() {
            for rule in read_jsonl::<ChatRule>(&chat_path).map_err(fixture_err)? {
                if rule.fingerprint.is_none() && rule.contains.is_empty() && rule.ends_with.is_none() {
                    return Err(GatewayError::Fixture("chat rule without any match condition".into()));
                }
                mock.push_rule(rule);
            }
        }
        let embed_path = dir.join("embeddings.jsonl");
        if embed_path.exists() {
            for rule in read_jsonl::<EmbedRule>(&embed_path).map_err(fixture_err)? {
                mock.check_embed_rule(&rule)?;
                mock.embed_rules.push(rule);
            }
        }
        Ok(mock)
    }

    fn check_embed_rule(&self, rule: &EmbedRule) -> Result<(), GatewayError> {
        let dim = self.hashed.dim();
        match (&rule.axis, &rule.vector) {
            (Some(a), None) if *a < dim => Ok(()),
            (None, Some(v)) if v.len() == dim => Ok(()),
            _ => Err(GatewayError::Fixture(format!(
                "embedding rule `{}` needs exactly one of axis < {dim} or a {dim}-long vector",
                rule.keyword
            ))),
        }
    }

    fn keyword_embedding(&self, text: &str) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.hashed.dim()];
        let mut hit = false;
        for rule in &self.embed_rules {
            let n = text.matches(rule.keyword.as_str()).count();
            if n == 0 {
                continue;
            }
            hit = true;
            let w = n as f64 * rule.weight;
            match (&rule.axis, &rule.vector) {
                (Some(a), _) => acc[*a] += w,
                (None, Some(v)) => acc.iter_mut().zip(v).for_each(|(x, y)| *x += w * y),
                (None, None) => {}
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>();
        (hit && norm > 0.0).then_some(acc)
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        let fp = request.fingerprint();
        if let Some(r) = self.by_fingerprint.get(&fp) {
            return Ok(r.clone());
        }
        if let Some(rule) = self.rules.iter().find(|r| r.matches(request)) {
            return Ok(rule.response.clone());
        }
        Ok(match self.fallback {
            Fallback::Echo => format!("ECHO:{}", request.last_user_text().unwrap_or_default()),
            Fallback::Synthetic => synthetic_reply(request, &fp),
        })
    }
}

impl EmbedBackend for MockBackend {
    fn dim(&self) -> usize {
        self.hashed.dim()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        Ok(texts
            .iter()
            .map(|t| match self.keyword_embedding(t) {
                Some(values) => EmbeddingVector { values },
                None => self.hashed.embed_one(t),
            })
            .collect())
    }
}

fn seed_of(fingerprint: &str) -> u64 {
    u64::from_str_radix(&fingerprint[..16], 16).unwrap_or(0)
}

fn text_hash(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

const ACTIVITIES: [&str; 8] = [
    "learning piano",
    "training for a half marathon",
    "studying Japanese",
    "planning a trip to Yunnan",
    "taking a pottery class",
    "preparing for a job interview",
    "growing tomatoes on the balcony",
    "reading a history of the Song dynasty",
];

const SMALL_TALK: [&str; 6] = [
    "The weather has been strange this week.",
    "I tried a new noodle place near the station.",
    "Work kept me busy until late yesterday.",
    "My cousin visited over the weekend.",
    "I finally cleaned up my desk.",
    "There was a long queue at the bank today.",
];

fn synthetic_reply(request: &GenerationRequest, fp: &str) -> String {
    let seed = seed_of(fp);
    let last_user = request.last_user_text().unwrap_or_default();
    match request.system_text() {
        Some(prompts::TOPIC_DIALOGUE_SYSTEM) => synthetic_topic_dialogue(last_user, seed),
        Some(prompts::SUMMARIZE_SYSTEM) => {
            let activity =
                ACTIVITIES.iter().find(|a| last_user.contains(*a)).copied().unwrap_or("chatting about daily life");
            format!("User is {activity}")
        }
        Some(prompts::CONTINUE_FIRST_SYSTEM) => format!(
            "User: Hi again, it has been a few days. {}\nBot: Good to hear from you! How have things been going?",
            SMALL_TALK[(seed % SMALL_TALK.len() as u64) as usize]
        ),
        Some(prompts::CONTINUE_SECOND_SYSTEM) => format!(
            "User: {}\nBot: That sounds like quite a day. What else is new?",
            SMALL_TALK[((seed >> 8) % SMALL_TALK.len() as u64) as usize]
        ),
        Some(prompts::SHIFT_SYSTEM) => synthetic_turn(request, seed),
        Some(prompts::USER_ROLE_SYSTEM) => {
            format!("{} Anyway, what do you think?", SMALL_TALK[(seed % SMALL_TALK.len() as u64) as usize])
        }
        Some(prompts::JUDGE_SYSTEM) => synthetic_judge(last_user, seed),
        _ => format!("ECHO:{last_user}"),
    }
}

fn synthetic_topic_dialogue(prompt: &str, seed: u64) -> String {
    let subject = prompt.lines().find_map(|l| l.strip_prefix(prompts::SUBJECT_PREFIX)).unwrap_or("daily life").trim();
    let activity = ACTIVITIES[(seed % ACTIVITIES.len() as u64) as usize];
    let pairs = 5 + (seed >> 16) % 4;
    let mut out = format!("Topic: User is {activity}\n");
    for i in 0..pairs {
        out.push_str(&format!(
            "User: About {subject}, {activity} is going on, part {}.\nBot: Tell me more about {activity}, step {}.\n",
            i + 1,
            i + 1
        ));
    }
    out
}

fn synthetic_turn(request: &GenerationRequest, seed: u64) -> String {
    let section = |header: &str| {
        request
            .messages
            .iter()
            .find(|m| m.role == Role::User && m.content.starts_with(header))
            .map(|m| m.content.as_str())
            .unwrap_or_default()
    };
    let history = section(prompts::HISTORY_HEADER);
    let current = section(prompts::CURRENT_HEADER);
    let user_lines = current.lines().filter(|l| l.starts_with("User:")).count() as u64;
    let h = text_hash(history);
    // One session in five never shifts; others shift once the user has spoken
    // 3 to 6 times.
    let threshold = if h.is_multiple_of(5) { u64::MAX } else { 3 + (h >> 8) % 4 };
    let shift = user_lines >= threshold;
    let topic = history
        .lines()
        .next()
        .and_then(|l| l.split_once("topic: "))
        .map(|(_, t)| t.trim())
        .unwrap_or("what we talked about before");
    if shift {
        format!(
            "Thoughts: The user sounds settled in this exchange, a good moment to recall that {topic}.\nShift: Yes\nResponse: By the way, last time you told me about this: {topic}. How is that going?"
        )
    } else {
        format!(
            "Thoughts: The conversation is still on its own track (note {}), too early to bring up the earlier topic.\nShift: No\nResponse: I see. Tell me more about that.",
            seed % 997
        )
    }
}

fn synthetic_judge(prompt: &str, seed: u64) -> String {
    let n = prompt
        .lines()
        .skip_while(|l| l.trim() != prompts::TOPICS_HEADER)
        .skip(1)
        .filter(|l| {
            l.split_once('.').is_some_and(|(num, _)| !num.is_empty() && num.trim().chars().all(|c| c.is_ascii_digit()))
        })
        .count();
    let mut order: Vec<usize> = (1..=n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}
