//! Synthetic dialogue data construction.
//!
//! 1. Subjects come from a fixed catalog: six memorable, five general.
//! 2. Subjects yield topic-labelled dialogues of 5–8 turn pairs, twice as
//!    many general dialogues as memorable ones. Each memorable dialogue is an
//!    anchor for a history of 1–10 further dialogues.
//! 3. Two opening turns of a later conversation are generated separately:
//!    the first from the anchor, the second from the first turn only.
//! 4. The rest of the conversation is generated turn by turn, with bot turns
//!    carrying thoughts and a shift decision.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, clean_user_line, generate_turn, shift_request, user_turn_request, EngineError};
use crate::eval::{TestInstance, NOMINAL_CANDIDATES};
use crate::gateway::{self, ChatBackend, GatewayError, GenerationRequest, Message, DIALOGUE_TEMPERATURE};
use crate::prompts;
use crate::ranker::{judge_order, ContextWindow, RankerError, JUDGE_DISTRACTORS};
use crate::store::{
    render_transcript, save_bundles, write_jsonl, Dialogue, DialogueKind, HistoryBundle, Speaker, StoreError, Subject,
    Utterance,
};
use crate::summarizer::TopicEntry;

/// Regeneration attempts after an out-of-bounds dialogue.
pub const MAX_REGENERATIONS: usize = 2;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("generated dialogue has {got} turn pairs, outside {min}..={max}")]
    TurnBoundViolation { got: usize, min: usize, max: usize },
    #[error("could not parse generated transcript: {0}")]
    Parse(String),
    #[error("{what} = {value} outside {min}..={max}")]
    Range { what: &'static str, value: usize, min: usize, max: usize },
    #[error("pool holds {available} dialogues, {needed} needed")]
    PoolExhausted { needed: usize, available: usize },
    #[error("anchor dialogue has no topic")]
    EmptyTopic,
    #[error("malformed turn after repairs: {0}")]
    MalformedTurn(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(EngineError),
}

impl From<EngineError> for ForgeError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::MalformedTurn(m) => ForgeError::MalformedTurn(m),
            EngineError::Gateway(g) => ForgeError::Gateway(g),
            other => ForgeError::Engine(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectCatalog {
    pub memorable: Vec<Subject>,
    pub general: Vec<Subject>,
}

impl Default for SubjectCatalog {
    fn default() -> Self {
        Self { memorable: Subject::MEMORABLE.to_vec(), general: Subject::GENERAL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgePlan {
    /// Memorable dialogues in total, spread round-robin over the subjects.
    pub per_memorable: usize,
    /// General dialogues in total; twice `per_memorable`, up to rounding.
    pub per_general: usize,
    pub turn_bounds: (usize, usize),
    /// Additional dialogues per history, besides the anchor.
    pub history_extra_range: (usize, usize),
    /// Anchors extended into current conversations.
    pub continuations: usize,
    pub max_turns: u32,
    pub seed: u64,
}

impl Default for ForgePlan {
    fn default() -> Self {
        Self {
            per_memorable: 10,
            per_general: 20,
            turn_bounds: (5, 8),
            history_extra_range: (1, 10),
            continuations: 10,
            max_turns: engine::DEFAULT_MAX_TURNS,
            seed: 42,
        }
    }
}

impl ForgePlan {
    /// Named presets: `small` (the default, 40 dialogues) and `chmap-test`,
    /// the test-set recipe of 400 dialogues, 150 of them continuations.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Self::default()),
            "chmap-test" => Some(Self { per_memorable: 83, per_general: 167, continuations: 150, ..Self::default() }),
            _ => None,
        }
    }

    pub fn with_per_memorable(mut self, n: usize) -> Self {
        self.per_memorable = n;
        self.per_general = 2 * n;
        self
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        if self.per_general.abs_diff(2 * self.per_memorable) > 1 {
            return Err(ForgeError::InvalidPlan(format!(
                "general:memorable must be 2:1, got {}:{}",
                self.per_general, self.per_memorable
            )));
        }
        let (lo, hi) = self.turn_bounds;
        if lo == 0 || lo > hi {
            return Err(ForgeError::InvalidPlan(format!("turn bounds {lo}..={hi}")));
        }
        let (lo, hi) = self.history_extra_range;
        if lo == 0 || lo > hi {
            return Err(ForgeError::InvalidPlan(format!("history range {lo}..={hi}")));
        }
        Ok(())
    }

    pub fn historical_count(&self) -> usize {
        self.per_memorable + self.per_general
    }
}

fn labelled<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let line = line.trim();
    let head = line.get(..label.len())?;
    head.eq_ignore_ascii_case(label).then(|| line[label.len()..].trim())
}

/// Parses `User:` / `Bot:` lines. Unlabelled lines continue the previous
/// utterance; a trailing unanswered user line is dropped.
pub fn parse_exchanges(raw: &str) -> Result<Vec<Utterance>, ForgeError> {
    let mut turns: Vec<Utterance> = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        if labelled(line, "Topic:").is_some() {
            continue;
        }
        let (speaker, text) = if let Some(t) = labelled(line, "User:") {
            (Speaker::User, t)
        } else if let Some(t) = labelled(line, "Bot:") {
            (Speaker::Bot, t)
        } else if let Some(last) = turns.last_mut() {
            last.text.push('\n');
            last.text.push_str(line.trim());
            continue;
        } else {
            return Err(ForgeError::Parse(format!("unlabelled line `{}`", line.trim())));
        };
        let expected = if turns.len().is_multiple_of(2) { Speaker::User } else { Speaker::Bot };
        if speaker != expected {
            return Err(ForgeError::Parse(format!("expected a {expected} line, got `{}`", line.trim())));
        }
        if text.is_empty() {
            return Err(ForgeError::Parse("empty utterance".into()));
        }
        turns.push(Utterance { speaker, text: text.to_string(), thoughts: None, shift: None });
    }
    if turns.len() % 2 == 1 {
        turns.pop();
    }
    Ok(turns)
}

pub fn topic_dialogue_request(subject: Subject, variant: u64, attempt: usize) -> GenerationRequest {
    let kind = match subject.kind() {
        DialogueKind::Memorable => "memorable (about the user's own life)",
        DialogueKind::General => "general (not about the user's own life)",
    };
    let body =
        format!("{}{}\nKind: {kind}\nVariant: {variant}\nAttempt: {attempt}", prompts::SUBJECT_PREFIX, subject.name());
    GenerationRequest::new(
        vec![Message::system(prompts::TOPIC_DIALOGUE_SYSTEM), Message::user(body)],
        DIALOGUE_TEMPERATURE,
    )
}

/// Generates one topic-labelled dialogue, regenerating up to
/// [`MAX_REGENERATIONS`] times when its length is out of bounds.
pub fn generate_topic_dialogue(
    subject: Subject,
    backend: &dyn ChatBackend,
    seed: u64,
    id: impl Into<String>,
    turn_bounds: (usize, usize),
) -> Result<Dialogue, ForgeError> {
    let (lo, hi) = turn_bounds;
    let mut got = 0;
    for attempt in 0..=MAX_REGENERATIONS {
        let raw = gateway::chat(backend, &topic_dialogue_request(subject, seed, attempt))?;
        let topic = raw
            .lines()
            .find_map(|l| labelled(l, "Topic:"))
            .filter(|t| !t.is_empty())
            .ok_or_else(|| ForgeError::Parse("missing `Topic:` line".into()))?
            .to_string();
        let turns = parse_exchanges(&raw)?;
        got = turns.len() / 2;
        if (lo..=hi).contains(&got) {
            let d = Dialogue { id: id.into(), kind: subject.kind(), subject, topic: Some(topic), day_offset: 0, turns };
            d.validate()?;
            return Ok(d);
        }
    }
    Err(ForgeError::TurnBoundViolation { got, min: lo, max: hi })
}

/// Anchor plus `k` dialogues drawn from `pool` without replacement, in a
/// seeded order with strictly decreasing `day_offset` (all ≥ 1).
pub fn assemble_history(
    anchor: &Dialogue,
    pool: &[Dialogue],
    k: usize,
    seed: u64,
) -> Result<HistoryBundle, ForgeError> {
    if !(1..=10).contains(&k) {
        return Err(ForgeError::Range { what: "k", value: k, min: 1, max: 10 });
    }
    if anchor.kind != DialogueKind::Memorable {
        return Err(ForgeError::Precondition("anchor must be a memorable dialogue".into()));
    }
    let candidates: Vec<&Dialogue> = pool.iter().filter(|d| d.id != anchor.id).collect();
    if candidates.len() < k {
        return Err(ForgeError::PoolExhausted { needed: k, available: candidates.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dialogues: Vec<Dialogue> = candidates.choose_multiple(&mut rng, k).map(|d| (*d).clone()).collect();
    dialogues.push(anchor.clone());
    dialogues.shuffle(&mut rng);
    let mut offset = 0u32;
    for d in dialogues.iter_mut().rev() {
        offset += rng.gen_range(1..=7);
        d.day_offset = offset;
    }
    let bundle = HistoryBundle { anchor_id: anchor.id.clone(), dialogues };
    bundle.validate()?;
    Ok(bundle)
}

pub fn continue_first_request(anchor: &Dialogue) -> Result<GenerationRequest, ForgeError> {
    let topic = anchor.topic.as_deref().map(str::trim).filter(|t| !t.is_empty()).ok_or(ForgeError::EmptyTopic)?;
    Ok(GenerationRequest::new(
        vec![
            Message::system(prompts::CONTINUE_FIRST_SYSTEM),
            Message::user(format!("Topic: {topic}\n{}", anchor.transcript())),
        ],
        DIALOGUE_TEMPERATURE,
    ))
}

/// Built from the first opening turn alone.
pub fn continue_second_request(first_turn: &[Utterance]) -> GenerationRequest {
    GenerationRequest::new(
        vec![Message::system(prompts::CONTINUE_SECOND_SYSTEM), Message::user(render_transcript(first_turn))],
        DIALOGUE_TEMPERATURE,
    )
}

fn one_exchange(raw: &str) -> Result<Vec<Utterance>, ForgeError> {
    let mut turns = parse_exchanges(raw)?;
    if turns.len() < 2 {
        return Err(ForgeError::Parse("expected one User line and one Bot line".into()));
    }
    turns.truncate(2);
    Ok(turns)
}

/// The two opening turns (four utterances) of a later conversation.
pub fn continue_dialogue(bundle: &HistoryBundle, backend: &dyn ChatBackend) -> Result<Vec<Utterance>, ForgeError> {
    let anchor = bundle.anchor().ok_or_else(|| ForgeError::Precondition("bundle has no anchor".into()))?;
    let first = one_exchange(&gateway::chat(backend, &continue_first_request(anchor)?)?)?;
    let second = one_exchange(&gateway::chat(backend, &continue_second_request(&first))?)?;
    Ok(first.into_iter().chain(second).collect())
}

/// Generates the remainder of a current conversation after `opening`,
/// aiming shifts at the bundle's anchor. Stops one exchange after the first
/// shift, or at `max_turns` bot turns.
pub fn generate_current_session(
    bundle: &HistoryBundle,
    opening: &[Utterance],
    backend: &dyn ChatBackend,
    max_turns: u32,
    id: impl Into<String>,
) -> Result<Dialogue, ForgeError> {
    let anchor = bundle.anchor().ok_or_else(|| ForgeError::Precondition("bundle has no anchor".into()))?;
    let topic = anchor.topic.clone().filter(|t| !t.trim().is_empty()).ok_or(ForgeError::EmptyTopic)?;
    let mut turns = opening.to_vec();
    let mut shift_turn = None;
    for turn in 1..=max_turns {
        if shift_turn.is_some_and(|tau| turn > tau + 1) {
            break;
        }
        let raw = gateway::chat(backend, &user_turn_request(bundle, &turns))?;
        let text = clean_user_line(&raw);
        if text.is_empty() {
            return Err(ForgeError::Parse("empty user turn".into()));
        }
        turns.push(Utterance::user(text));
        let d = generate_turn(backend, &shift_request(&turns, anchor, &topic))?;
        if d.shift && shift_turn.is_none() {
            shift_turn = Some(turn);
        }
        turns.push(Utterance::bot_decision(d.response, d.thoughts, d.shift));
    }
    let dialogue = Dialogue {
        id: id.into(),
        kind: anchor.kind,
        subject: anchor.subject,
        topic: Some(topic),
        day_offset: 0,
        turns,
    };
    dialogue.validate()?;
    Ok(dialogue)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgedDataset {
    pub historical: Vec<Dialogue>,
    /// Aligned with `current`: `bundles[i]` is the history of `current[i]`.
    pub bundles: Vec<HistoryBundle>,
    pub current: Vec<Dialogue>,
    pub dropped_historical: usize,
    pub dropped_malformed: usize,
}

/// Runs the whole pipeline, dropping and counting failed generations.
pub struct Forge<'a> {
    backend: &'a dyn ChatBackend,
    plan: ForgePlan,
    pub dropped_historical: usize,
    pub dropped_malformed: usize,
}

impl<'a> Forge<'a> {
    pub fn new(backend: &'a dyn ChatBackend, plan: ForgePlan) -> Result<Self, ForgeError> {
        plan.validate()?;
        Ok(Self { backend, plan, dropped_historical: 0, dropped_malformed: 0 })
    }

    /// `None` (and a counted drop) when the bot's output stays malformed.
    pub fn current_session(
        &mut self,
        bundle: &HistoryBundle,
        opening: &[Utterance],
        id: &str,
    ) -> Result<Option<Dialogue>, ForgeError> {
        match generate_current_session(bundle, opening, self.backend, self.plan.max_turns, id) {
            Ok(d) => Ok(Some(d)),
            Err(ForgeError::MalformedTurn(_)) => {
                self.dropped_malformed += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    pub fn historical(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<Dialogue>, ForgeError> {
        let catalog = SubjectCatalog::default();
        let jobs = catalog
            .memorable
            .iter()
            .copied()
            .cycle()
            .take(self.plan.per_memorable)
            .chain(catalog.general.iter().copied().cycle().take(self.plan.per_general));
        let mut out = Vec::new();
        for (i, subject) in jobs.enumerate() {
            let seed = rng.next_u64();
            match generate_topic_dialogue(subject, self.backend, seed, format!("hist-{i:05}"), self.plan.turn_bounds) {
                Ok(d) => out.push(d),
                Err(ForgeError::TurnBoundViolation { .. } | ForgeError::Parse(_)) => self.dropped_historical += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    pub fn run(mut self) -> Result<ForgedDataset, ForgeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
        let historical = self.historical(&mut rng)?;
        let mut anchors: Vec<&Dialogue> = historical.iter().filter(|d| d.kind == DialogueKind::Memorable).collect();
        anchors.shuffle(&mut rng);
        anchors.truncate(self.plan.continuations);

        let (lo, hi) = self.plan.history_extra_range;
        let mut bundles = Vec::new();
        let mut current = Vec::new();
        for anchor in anchors {
            let available = historical.len() - 1;
            if available < lo {
                return Err(ForgeError::PoolExhausted { needed: lo, available });
            }
            let k = rng.gen_range(lo..=hi.min(available));
            let bundle = assemble_history(anchor, &historical, k, rng.next_u64())?;
            let opening = continue_dialogue(&bundle, self.backend)?;
            if let Some(d) = self.current_session(&bundle, &opening, &format!("cur-{}", anchor.id))? {
                bundles.push(bundle);
                current.push(d);
            }
        }
        Ok(ForgedDataset {
            historical,
            bundles,
            current,
            dropped_historical: self.dropped_historical,
            dropped_malformed: self.dropped_malformed,
        })
    }
}

/// Builds ten-candidate retrieval test instances. The judge orders the
/// anchor topic among [`JUDGE_DISTRACTORS`] random topics; the anchor is the
/// ground truth and the judge's top topic the alternative one. Remaining
/// candidates are topics ranked below the anchor, and the instance's
/// history is the anchor plus 1–10 of those lower-ranked dialogues.
/// Sessions with too few lower-ranked topics are skipped.
pub fn forge_testset(
    data: &ForgedDataset,
    judge: &dyn ChatBackend,
    seed: u64,
) -> Result<(Vec<TestInstance>, Vec<HistoryBundle>, usize), ForgeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_topics: Vec<TopicEntry> =
        data.historical.iter().filter_map(|d| d.topic.as_ref().map(|t| TopicEntry::provided(&d.id, t))).collect();
    let mut instances = Vec::new();
    let mut bundles = Vec::new();
    let mut skipped = 0;
    for (bundle, current) in data.bundles.iter().zip(&data.current) {
        let anchor = bundle.anchor().expect("validated bundle");
        let target = TopicEntry::provided(&anchor.id, anchor.topic.clone().ok_or(ForgeError::EmptyTopic)?);
        let context_len = current.turns.len().min(5);
        let context = ContextWindow::new(current.turns[..context_len].to_vec())?;

        let others: Vec<&TopicEntry> = all_topics.iter().filter(|t| t.dialogue_id != anchor.id).collect();
        let mut shown: Vec<TopicEntry> =
            others.choose_multiple(&mut rng, JUDGE_DISTRACTORS.min(others.len())).map(|t| (*t).clone()).collect();
        shown.push(target.clone());
        shown.shuffle(&mut rng);
        let order = judge_order(&context, &shown, judge)?;
        let target_pos = order.iter().position(|&i| shown[i].dialogue_id == anchor.id).expect("permutation");
        let top = shown[order[0]].clone();
        let below: Vec<&TopicEntry> = order[target_pos + 1..].iter().map(|&i| &shown[i]).collect();

        let mut picked = vec![target.clone()];
        if top.dialogue_id != target.dialogue_id {
            picked.push(top.clone());
        }
        let need = NOMINAL_CANDIDATES - picked.len();
        if below.len() < need.max(1) {
            skipped += 1;
            continue;
        }
        let negatives: Vec<TopicEntry> = below.choose_multiple(&mut rng, need).map(|t| (*t).clone()).collect();
        picked.extend(negatives.iter().cloned());
        picked.shuffle(&mut rng);
        let index_of = |id: &str| picked.iter().position(|t| t.dialogue_id == id).expect("picked");

        let k = rng.gen_range(1..=10usize.min(below.len()));
        let history_ids: HashSet<&str> = below.choose_multiple(&mut rng, k).map(|t| t.dialogue_id.as_str()).collect();
        let pool: Vec<Dialogue> =
            data.historical.iter().filter(|d| history_ids.contains(d.id.as_str())).cloned().collect();
        bundles.push(assemble_history(anchor, &pool, k, rng.next_u64())?);

        instances.push(TestInstance {
            context: context.utterances().to_vec(),
            candidates: picked.iter().map(|t| t.topic.clone()).collect(),
            truth_index: index_of(&anchor.id),
            alt_truth_index: Some(index_of(&top.dialogue_id)),
        });
    }
    Ok((instances, bundles, skipped))
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x2E80..=0x2FDF
        | 0x3000..=0x303F
        | 0x3040..=0x30FF
        | 0x3100..=0x31FF
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF
        | 0xF900..=0xFAFF
        | 0xFE30..=0xFE4F
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2FFFF)
}

/// One token per CJK character; otherwise whitespace-separated runs.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() || is_cjk(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if is_cjk(c) {
                tokens.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub dialogues: usize,
    /// Dialogue utterances only; thoughts are counted separately.
    pub utterances: usize,
    pub unique_tokens: usize,
    pub thoughts: usize,
    pub topic_shift_sessions: usize,
    /// In characters.
    pub avg_utterance_length: f64,
    pub avg_utterances_per_session: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub historical: PartitionStats,
    pub current: PartitionStats,
}

pub fn partition_stats(dialogues: &[Dialogue]) -> PartitionStats {
    let utterances: Vec<&Utterance> = dialogues.iter().flat_map(|d| &d.turns).collect();
    let vocab: HashSet<String> = utterances.iter().flat_map(|u| tokenize(&u.text)).collect();
    let chars: usize = utterances.iter().map(|u| u.text.chars().count()).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    PartitionStats {
        dialogues: dialogues.len(),
        utterances: utterances.len(),
        unique_tokens: vocab.len(),
        thoughts: utterances.iter().filter(|u| u.thoughts.is_some()).count(),
        topic_shift_sessions: dialogues.iter().filter(|d| d.turns.iter().any(|u| u.shift == Some(true))).count(),
        avg_utterance_length: ratio(chars, utterances.len()),
        avg_utterances_per_session: ratio(utterances.len(), dialogues.len()),
    }
}

pub fn forge_stats(historical: &[Dialogue], current: &[Dialogue]) -> StatsReport {
    StatsReport { historical: partition_stats(historical), current: partition_stats(current) }
}

/// Writes `historical.jsonl`, `bundles.jsonl`, `current.jsonl` and `stats.json`.
pub fn write_dataset(dir: &Path, data: &ForgedDataset) -> Result<StatsReport, ForgeError> {
    std::fs::create_dir_all(dir).map_err(StoreError::from)?;
    write_jsonl(&dir.join("historical.jsonl"), &data.historical)?;
    save_bundles(dir.join("bundles.jsonl"), &data.bundles)?;
    write_jsonl(&dir.join("current.jsonl"), &data.current)?;
    let stats = forge_stats(&data.historical, &data.current);
    let text = serde_json::to_string_pretty(&stats).map_err(|e| StoreError::from(std::io::Error::from(e)))?;
    std::fs::write(dir.join("stats.json"), text + "\n").map_err(StoreError::from)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::parse_turn_output;
    use crate::gateway::{ChatRule, MockBackend, Recorder};

    fn dialogue_text(pairs: usize) -> String {
        let mut s = String::from("Topic: User is learning piano\n");
        for i in 0..pairs {
            s.push_str(&format!("User: piano line {i}\nBot: reply {i}\n"));
        }
        s
    }

    fn dialogue(id: &str, kind: DialogueKind) -> Dialogue {
        Dialogue {
            id: id.into(),
            kind,
            subject: if kind == DialogueKind::Memorable { Subject::Skills } else { Subject::SocialEvents },
            topic: Some(format!("topic of {id}")),
            day_offset: 0,
            turns: vec![Utterance::user(format!("{id} hello there")), Utterance::bot("hi")],
        }
    }

    #[test]
    fn six_turn_piano_dialogue_accepted() {
        let mock = MockBackend::default().with_rule(ChatRule::contains(&["Subject: skills"], dialogue_text(6)));
        let d = generate_topic_dialogue(Subject::Skills, &mock, 1, "d1", (5, 8)).unwrap();
        assert_eq!(d.topic.as_deref(), Some("User is learning piano"));
        assert_eq!(d.turn_pairs(), 6);
        assert_eq!(d.kind, DialogueKind::Memorable);
    }

    #[test]
    fn short_dialogue_thrice_violates_bounds() {
        let rec =
            Recorder::new(MockBackend::default().with_rule(ChatRule::contains(&["Subject: skills"], dialogue_text(4))));
        let r = generate_topic_dialogue(Subject::Skills, &rec, 1, "d1", (5, 8));
        assert!(matches!(r, Err(ForgeError::TurnBoundViolation { got: 4, .. })));
        assert_eq!(rec.requests().len(), 1 + MAX_REGENERATIONS);
    }

    #[test]
    fn general_subject_tagged_general() {
        let mock = MockBackend::default().with_rule(ChatRule::contains(&["Subject: humorous jokes"], dialogue_text(5)));
        let d = generate_topic_dialogue(Subject::HumorousJokes, &mock, 1, "j", (5, 8)).unwrap();
        assert_eq!(d.kind, DialogueKind::General);
    }

    #[test]
    fn unparseable_transcript() {
        let mock = MockBackend::default().with_rule(ChatRule::contains(&["Subject:"], "Topic: x\nBot: who starts?"));
        assert!(matches!(generate_topic_dialogue(Subject::Skills, &mock, 1, "d", (5, 8)), Err(ForgeError::Parse(_))));
    }

    fn pool(n: usize) -> Vec<Dialogue> {
        (0..n).map(|i| dialogue(&format!("p{i}"), DialogueKind::General)).collect()
    }

    #[test]
    fn history_bounds() {
        let anchor = dialogue("a", DialogueKind::Memorable);
        assert_eq!(assemble_history(&anchor, &pool(3), 1, 0).unwrap().dialogues.len(), 2);
        let b = assemble_history(&anchor, &pool(12), 10, 0).unwrap();
        assert_eq!(b.dialogues.len(), 11);
        let ids: HashSet<_> = b.dialogues.iter().map(|d| &d.id).collect();
        assert_eq!(ids.len(), 11);
        assert!(b.dialogues.windows(2).all(|w| w[0].day_offset > w[1].day_offset));
        assert!(b.dialogues.last().unwrap().day_offset >= 1);
        assert!(matches!(assemble_history(&anchor, &pool(3), 0, 0), Err(ForgeError::Range { .. })));
        assert!(matches!(assemble_history(&anchor, &pool(3), 11, 0), Err(ForgeError::Range { .. })));
        assert!(matches!(assemble_history(&anchor, &pool(3), 4, 0), Err(ForgeError::PoolExhausted { .. })));
        let general = dialogue("g", DialogueKind::General);
        assert!(assemble_history(&general, &pool(3), 1, 0).is_err());
        assert_eq!(
            assemble_history(&anchor, &pool(12), 5, 9).unwrap(),
            assemble_history(&anchor, &pool(12), 5, 9).unwrap()
        );
    }

    fn anchor_bundle() -> HistoryBundle {
        let mut anchor = dialogue("a", DialogueKind::Memorable);
        anchor.topic = Some("User is learning piano".into());
        anchor.turns = vec![
            Utterance::user("My piano teacher assigned a new Chopin nocturne"),
            Utterance::bot("Which one are you learning first?"),
        ];
        assemble_history(&anchor, &pool(4), 2, 3).unwrap()
    }

    #[test]
    fn second_turn_never_sees_the_anchor() {
        let rec = Recorder::new(MockBackend::synthetic(32));
        let opening = continue_dialogue(&anchor_bundle(), &rec).unwrap();
        assert_eq!(opening.len(), 4);
        let speakers: Vec<_> = opening.iter().map(|u| u.speaker).collect();
        assert_eq!(speakers, [Speaker::User, Speaker::Bot, Speaker::User, Speaker::Bot]);
        let reqs = rec.requests();
        assert_eq!(reqs.len(), 2);
        let second: String = reqs[1].messages.iter().map(|m| m.content.as_str()).collect();
        assert!(second.contains(&opening[0].text));
        let anchor_text = anchor_bundle().anchor().unwrap().transcript();
        let chars: Vec<char> = anchor_text.chars().collect();
        for w in chars.windows(8) {
            let needle: String = w.iter().collect();
            assert!(!second.contains(&needle), "leaked `{needle}`");
        }
    }

    #[test]
    fn empty_anchor_topic() {
        let mut b = anchor_bundle();
        let id = b.anchor_id.clone();
        b.dialogues.iter_mut().find(|d| d.id == id).unwrap().topic = None;
        assert!(matches!(continue_dialogue(&b, &MockBackend::synthetic(32)), Err(ForgeError::EmptyTopic)));
    }

    fn opening() -> Vec<Utterance> {
        vec![
            Utterance::user("Hi again"),
            Utterance::bot("Hello!"),
            Utterance::user("Busy week"),
            Utterance::bot("Tell me"),
        ]
    }

    fn session_mock(shift_at: usize) -> MockBackend {
        let mut mock = MockBackend::default();
        for t in 1..=10 {
            mock = mock
                .with_rule(ChatRule {
                    fingerprint: None,
                    contains: vec![prompts::USER_ROLE_SYSTEM.into()],
                    ends_with: Some(if t == 1 { "Bot: Tell me".into() } else { format!("answer {}", t - 1) }),
                    response: format!("user says {t}"),
                })
                .with_rule(ChatRule::ends_with(
                    format!("User: user says {t}"),
                    format!(
                        "Thoughts: turn {t}\nShift: {}\nResponse: answer {t}",
                        if t == shift_at { "Yes" } else { "No" }
                    ),
                ));
        }
        mock
    }

    #[test]
    fn current_session_shift_at_four() {
        let d = generate_current_session(&anchor_bundle(), &opening(), &session_mock(4), 10, "cur").unwrap();
        let bot: Vec<&Utterance> = d.turns[4..].iter().filter(|u| u.speaker == Speaker::Bot).collect();
        let first = bot.iter().position(|u| u.shift == Some(true)).unwrap();
        assert_eq!(first + 1, 4);
        assert_eq!(bot.len(), 5);
        for u in &bot {
            let raw = format!(
                "Thoughts: {}\nShift: {}\nResponse: {}",
                u.thoughts.as_ref().unwrap(),
                if u.shift.unwrap() { "Yes" } else { "No" },
                u.text
            );
            assert_eq!(parse_turn_output(&raw).unwrap().shift, u.shift.unwrap());
        }
    }

    #[test]
    fn all_no_session_is_kept() {
        let d = generate_current_session(&anchor_bundle(), &opening(), &session_mock(99), 10, "cur").unwrap();
        assert_eq!(d.turns.len(), 4 + 20);
        assert!(d.turns.iter().all(|u| u.shift != Some(true)));
    }

    #[test]
    fn malformed_session_dropped_and_counted() {
        let mock = MockBackend::default()
            .with_rule(ChatRule::contains(&[prompts::USER_ROLE_SYSTEM], "hello"))
            .with_rule(ChatRule::contains(&[prompts::SHIFT_SYSTEM], "not the format"));
        let mut forge = Forge::new(&mock, ForgePlan::default()).unwrap();
        assert_eq!(forge.current_session(&anchor_bundle(), &opening(), "cur").unwrap(), None);
        assert_eq!(forge.dropped_malformed, 1);
    }

    #[test]
    fn plan_ratio_enforced() {
        let plan = ForgePlan { per_general: 3, ..ForgePlan::default() };
        assert!(plan.validate().is_err());
        let small = ForgePlan::default();
        assert_eq!(small.historical_count() + small.continuations, 40);
        let test = ForgePlan::preset("chmap-test").unwrap();
        test.validate().unwrap();
        assert_eq!(test.historical_count() + test.continuations, 400);
        assert_eq!(test.continuations, 150);
        assert!(ForgePlan::preset("nope").is_none());
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("你好 world"), ["你", "好", "world"]);
        assert_eq!(tokenize("abc你好 x  y"), ["abc", "你", "好", "x", "y"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn stats_arithmetic() {
        let mk = |id: &str, n: usize| {
            let mut d = dialogue(id, DialogueKind::General);
            d.turns = (0..n).map(|i| if i % 2 == 0 { Utterance::user("ab") } else { Utterance::bot("abcd") }).collect();
            d
        };
        let s = partition_stats(&[mk("a", 10), mk("b", 12)]);
        assert_eq!(s.utterances, 22);
        assert_eq!(s.avg_utterances_per_session, 11.0);
        assert_eq!(s.avg_utterance_length, 3.0);
        assert_eq!(s.unique_tokens, 2);

        let cur = |id: &str, shift: bool| {
            let mut d = mk(id, 2);
            d.turns[1] = Utterance::bot_decision("ok", "t", shift);
            d
        };
        let s = partition_stats(&[cur("a", true), cur("b", true), cur("c", false), cur("d", true)]);
        assert_eq!(s.topic_shift_sessions, 3);
        assert_eq!(s.thoughts, 4);
        assert_eq!(s.utterances, 8);
    }

    #[test]
    fn synthetic_forge_run() {
        let mock = MockBackend::synthetic(64);
        let data = Forge::new(&mock, ForgePlan::default()).unwrap().run().unwrap();
        assert_eq!(data.historical.len() + data.dropped_historical, 30);
        assert_eq!(data.current.len() + data.dropped_malformed, 10);
        for b in &data.bundles {
            assert!((2..=11).contains(&b.dialogues.len()));
        }
        let (tests, bundles, skipped) = forge_testset(&data, &mock, 5).unwrap();
        assert_eq!(tests.len() + skipped, data.current.len());
        assert_eq!(tests.len(), bundles.len());
        assert!(tests.iter().all(|t| t.candidates.len() == NOMINAL_CANDIDATES));
    }
}
