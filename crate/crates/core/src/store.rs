//! Dialogue history store.
//!
//! Dialogues are persisted as line-delimited JSON, one [`Dialogue`] per line,
//! in insertion order. Unknown fields are rejected on load.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate dialogue id `{0}`")]
    DuplicateId(String),
    #[error("invalid dialogue `{id}`: {reason}")]
    InvalidDialogue { id: String, reason: String },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::User => f.write_str("User"),
            Speaker::Bot => f.write_str("Bot"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thoughts: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<bool>,
}

impl Utterance {
    pub fn user(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::User, text: text.into(), thoughts: None, shift: None }
    }

    pub fn bot(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::Bot, text: text.into(), thoughts: None, shift: None }
    }

    /// A bot turn annotated with its reasoning and shift decision.
    pub fn bot_decision(text: impl Into<String>, thoughts: impl Into<String>, shift: bool) -> Self {
        Self { speaker: Speaker::Bot, text: text.into(), thoughts: Some(thoughts.into()), shift: Some(shift) }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("utterance text is empty".into());
        }
        if self.speaker == Speaker::User && (self.thoughts.is_some() || self.shift.is_some()) {
            return Err("user utterance carries bot-only fields".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DialogueKind {
    Memorable,
    General,
}

/// The 11 subjects of the dialogue catalog: six memorable, five general.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subject {
    #[serde(rename = "personal interests")]
    PersonalInterests,
    #[serde(rename = "feelings")]
    Feelings,
    #[serde(rename = "skills")]
    Skills,
    #[serde(rename = "traits")]
    Traits,
    #[serde(rename = "participating events")]
    ParticipatingEvents,
    #[serde(rename = "events' progression")]
    EventsProgression,
    #[serde(rename = "social events")]
    SocialEvents,
    #[serde(rename = "opinion debates")]
    OpinionDebates,
    #[serde(rename = "humorous jokes")]
    HumorousJokes,
    #[serde(rename = "audience stories")]
    AudienceStories,
    #[serde(rename = "knowledge sharing")]
    KnowledgeSharing,
}

impl Subject {
    pub const MEMORABLE: [Subject; 6] = [
        Subject::PersonalInterests,
        Subject::Feelings,
        Subject::Skills,
        Subject::Traits,
        Subject::ParticipatingEvents,
        Subject::EventsProgression,
    ];

    pub const GENERAL: [Subject; 5] = [
        Subject::SocialEvents,
        Subject::OpinionDebates,
        Subject::HumorousJokes,
        Subject::AudienceStories,
        Subject::KnowledgeSharing,
    ];

    pub fn kind(self) -> DialogueKind {
        if Self::MEMORABLE.contains(&self) {
            DialogueKind::Memorable
        } else {
            DialogueKind::General
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subject::PersonalInterests => "personal interests",
            Subject::Feelings => "feelings",
            Subject::Skills => "skills",
            Subject::Traits => "traits",
            Subject::ParticipatingEvents => "participating events",
            Subject::EventsProgression => "events' progression",
            Subject::SocialEvents => "social events",
            Subject::OpinionDebates => "opinion debates",
            Subject::HumorousJokes => "humorous jokes",
            Subject::AudienceStories => "audience stories",
            Subject::KnowledgeSharing => "knowledge sharing",
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialogue {
    pub id: String,
    pub kind: DialogueKind,
    pub subject: Subject,
    pub topic: Option<String>,
    #[serde(default)]
    pub day_offset: u32,
    pub turns: Vec<Utterance>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<(), StoreError> {
        let invalid = |reason: String| StoreError::InvalidDialogue { id: self.id.clone(), reason };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            turn.validate().map_err(|e| invalid(format!("turn {i}: {e}")))?;
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Bot };
            if turn.speaker != expected {
                return Err(invalid(format!(
                    "turn {i}: expected {expected} to speak, speakers must alternate starting with user"
                )));
            }
        }
        Ok(())
    }

    /// Number of complete user/bot exchanges.
    pub fn turn_pairs(&self) -> usize {
        self.turns.len() / 2
    }

    /// Transcript with `User:` / `Bot:` speaker tags, one utterance per line.
    pub fn transcript(&self) -> String {
        render_transcript(&self.turns)
    }
}

pub fn render_transcript(turns: &[Utterance]) -> String {
    turns.iter().map(|u| format!("{}: {}", u.speaker, u.text)).collect::<Vec<_>>().join("\n")
}

/// The dialogue history a session is built around: one memorable anchor
/// plus the other dialogues that precede the current conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryBundle {
    pub anchor_id: String,
    pub dialogues: Vec<Dialogue>,
}

impl HistoryBundle {
    pub fn validate(&self) -> Result<(), StoreError> {
        let anchors =
            self.dialogues.iter().filter(|d| d.id == self.anchor_id && d.kind == DialogueKind::Memorable).count();
        if anchors != 1 {
            return Err(StoreError::InvalidDialogue {
                id: self.anchor_id.clone(),
                reason: format!("bundle must hold exactly one memorable anchor, found {anchors}"),
            });
        }
        let mut seen = HashMap::new();
        for d in &self.dialogues {
            d.validate()?;
            if seen.insert(d.id.as_str(), ()).is_some() {
                return Err(StoreError::DuplicateId(d.id.clone()));
            }
        }
        Ok(())
    }

    pub fn anchor(&self) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == self.anchor_id)
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }
}

/// In-memory dialogue store with id lookup.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    dialogues: Vec<Dialogue>,
    index: HashMap<String, usize>,
}

impl PartialEq for MemoryStore {
    fn eq(&self, other: &Self) -> bool {
        self.dialogues == other.dialogues
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_dialogue(&mut self, dialogue: Dialogue) -> Result<String, StoreError> {
        dialogue.validate()?;
        if self.index.contains_key(&dialogue.id) {
            return Err(StoreError::DuplicateId(dialogue.id));
        }
        let id = dialogue.id.clone();
        self.index.insert(id.clone(), self.dialogues.len());
        self.dialogues.push(dialogue);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.index.get(id).map(|&i| &self.dialogues[i])
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.iter()
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let mut store = Self::new();
        for dialogue in read_jsonl::<Dialogue>(path.as_ref())? {
            store.add_dialogue(dialogue)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        write_jsonl(path.as_ref(), &self.dialogues)
    }
}

pub fn load_bundles(path: impl AsRef<Path>) -> Result<Vec<HistoryBundle>, StoreError> {
    let bundles = read_jsonl::<HistoryBundle>(path.as_ref())?;
    for b in &bundles {
        b.validate()?;
    }
    Ok(bundles)
}

pub fn save_bundles(path: impl AsRef<Path>, bundles: &[HistoryBundle]) -> Result<(), StoreError> {
    write_jsonl(path.as_ref(), bundles)
}

/// Reads one JSON record per non-blank line. Line numbers in errors are 1-based.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|e| StoreError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
