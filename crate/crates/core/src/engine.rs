//! Proactive topic-shift policy.
//!
//! Each bot turn retrieves the most relevant historical topic, then asks the
//! generation backend for a labelled `Thoughts:` / `Shift:` / `Response:`
//! triple. The first bot turn whose decision is `Shift: Yes` is the session's
//! shift turn.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{self, ChatBackend, EmbedBackend, GatewayError, GenerationRequest, Message, DIALOGUE_TEMPERATURE};
use crate::prompts;
use crate::ranker::{self, ContextWindow, RankedCandidate, RankerError, RankerModel};
use crate::store::{render_transcript, Dialogue, HistoryBundle, Speaker, StoreError, Utterance};
use crate::summarizer::{Summarizer, SummarizerError, TopicEntry};

pub const DEFAULT_MAX_TURNS: u32 = 10;
/// Extra attempts after a malformed turn output.
pub const MAX_REPAIRS: usize = 2;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("session reached its cap of {0} turns")]
    MaxTurnsExceeded(u32),
    #[error("malformed turn output: {0}")]
    MalformedTurn(String),
    #[error("no dialogue `{0}` in the history bundle")]
    MissingMemory(String),
    #[error("user source ran out of utterances")]
    SessionAborted,
    #[error("invalid opening: {0}")]
    InvalidOpening(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Summarizer(#[from] SummarizerError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnDecision {
    pub thoughts: String,
    pub shift: bool,
    pub response: String,
}

impl TurnDecision {
    /// The three-line wire format.
    pub fn render(&self) -> String {
        format!(
            "Thoughts: {}\nShift: {}\nResponse: {}",
            self.thoughts,
            if self.shift { "Yes" } else { "No" },
            self.response
        )
    }
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let line = line.trim_start();
    let head = line.get(..label.len())?;
    head.eq_ignore_ascii_case(label).then(|| &line[label.len()..])
}

/// Parses `Thoughts:` / `Shift:` / `Response:` labelled lines, in that order.
/// Thoughts and Response may continue over following lines.
pub fn parse_turn_output(raw: &str) -> Result<TurnDecision, EngineError> {
    let lines: Vec<&str> = raw.lines().collect();
    let find = |label: &str, from: usize| {
        lines.iter().enumerate().skip(from).find_map(|(i, l)| strip_label(l, label).map(|rest| (i, rest)))
    };
    let missing = |label: &str| EngineError::MalformedTurn(format!("missing `{label}` line"));
    let (ti, thoughts_head) = find("Thoughts:", 0).ok_or_else(|| missing("Thoughts:"))?;
    let (si, shift_raw) = find("Shift:", ti + 1).ok_or_else(|| missing("Shift:"))?;
    let (ri, response_head) = find("Response:", si + 1).ok_or_else(|| missing("Response:"))?;

    let join = |head: &str, rest: &[&str]| {
        std::iter::once(head).chain(rest.iter().copied()).collect::<Vec<_>>().join("\n").trim().to_string()
    };
    let thoughts = join(thoughts_head, &lines[ti + 1..si]);
    let response = join(response_head, &lines[ri + 1..]);
    if !lines[si + 1..ri].iter().all(|l| l.trim().is_empty()) {
        return Err(EngineError::MalformedTurn("text between `Shift:` and `Response:`".into()));
    }
    let token = shift_raw.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase();
    let shift = match token.as_str() {
        "yes" => true,
        "no" => false,
        other => return Err(EngineError::MalformedTurn(format!("shift value `{other}` is not Yes/No"))),
    };
    if thoughts.is_empty() || response.is_empty() {
        return Err(EngineError::MalformedTurn("empty thoughts or response".into()));
    }
    Ok(TurnDecision { thoughts, shift, response })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalPolicy {
    /// Rank once, at the first bot turn.
    #[default]
    PerSession,
    /// Re-rank before every bot turn.
    PerUtterance,
}

impl std::str::FromStr for RetrievalPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_session" => Ok(Self::PerSession),
            "per_utterance" => Ok(Self::PerUtterance),
            other => Err(format!("unknown policy `{other}`, expected per_session or per_utterance")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub bundle: HistoryBundle,
    pub topics: Vec<TopicEntry>,
    /// Trailing window of the transcript, refreshed after every append.
    pub context: Vec<Utterance>,
    /// Latest full ranking of `topics`, best first.
    pub ranking: Vec<RankedCandidate>,
    pub retrieved: Option<RankedCandidate>,
    pub policy: RetrievalPolicy,
    pub transcript: Vec<Utterance>,
    pub turn_counter: u32,
    pub shift_turn: Option<u32>,
    pub max_turns: u32,
    /// Number of ranker invocations so far.
    pub retrievals: u32,
    /// Topic index used for each bot turn, in turn order.
    pub retrieved_per_turn: Vec<usize>,
}

impl SessionState {
    pub fn retrieved_topic(&self) -> Option<&TopicEntry> {
        self.retrieved.map(|c| &self.topics[c.topic_index])
    }

    fn refresh_context(&mut self) {
        let start = self.transcript.len().saturating_sub(ranker::CONTEXT_WIDTH);
        self.context = self.transcript[start..].to_vec();
    }
}

pub fn shift_request(transcript: &[Utterance], memory: &Dialogue, topic: &str) -> GenerationRequest {
    let history = format!(
        "{} ({} days ago), topic: {}\n{}",
        prompts::HISTORY_HEADER,
        memory.day_offset,
        topic,
        memory.transcript()
    );
    let current = format!("{}\n{}", prompts::CURRENT_HEADER, render_transcript(transcript));
    let mut req = GenerationRequest::new(
        vec![Message::system(prompts::SHIFT_SYSTEM), Message::user(history), Message::user(current)],
        DIALOGUE_TEMPERATURE,
    );
    req.max_tokens = 512;
    req
}

/// Request steering `state`'s conversation toward `topic`'s source dialogue.
pub fn compose_shift_prompt(state: &SessionState, topic: &TopicEntry) -> Result<GenerationRequest, EngineError> {
    let memory =
        state.bundle.get(&topic.dialogue_id).ok_or_else(|| EngineError::MissingMemory(topic.dialogue_id.clone()))?;
    Ok(shift_request(&state.transcript, memory, &topic.topic))
}

/// Generates and parses a turn, re-asking with a format reminder on
/// malformed output up to [`MAX_REPAIRS`] times.
pub fn generate_turn(backend: &dyn ChatBackend, request: &GenerationRequest) -> Result<TurnDecision, EngineError> {
    let mut req = request.clone();
    let mut last_err = None;
    for _ in 0..=MAX_REPAIRS {
        let raw = gateway::chat(backend, &req)?;
        match parse_turn_output(&raw) {
            Ok(d) => return Ok(d),
            Err(e) => {
                req.messages.push(Message::assistant(raw));
                req.messages.push(Message::user(prompts::REPAIR_INSTRUCTION));
                last_err = Some(e);
            }
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Request for the user's next line, given what the user talked about before.
pub fn user_turn_request(persona: &HistoryBundle, transcript: &[Utterance]) -> GenerationRequest {
    let mut body = String::from("Things you told the chatbot in earlier conversations:\n");
    for d in &persona.dialogues {
        if let Some(t) = &d.topic {
            body.push_str(&format!("- {t}\n"));
        }
    }
    body.push_str(&format!("\n{}\n{}", prompts::CURRENT_HEADER, render_transcript(transcript)));
    let mut req = GenerationRequest::new(
        vec![Message::system(prompts::USER_ROLE_SYSTEM), Message::user(body)],
        DIALOGUE_TEMPERATURE,
    );
    req.max_tokens = 256;
    req
}

/// First non-blank line with any `User:` tag removed.
pub fn clean_user_line(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or_default();
    strip_label(line, "User:").unwrap_or(line).trim().to_string()
}

/// Supplies user utterances to [`Engine::run_session`].
pub trait UserSource {
    /// `None` when the source has nothing more to say.
    fn next_utterance(&mut self, state: &SessionState) -> Result<Option<String>, EngineError>;
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedUser {
    lines: VecDeque<String>,
}

impl ScriptedUser {
    pub fn new<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { lines: lines.into_iter().map(Into::into).collect() }
    }
}

impl UserSource for ScriptedUser {
    fn next_utterance(&mut self, _state: &SessionState) -> Result<Option<String>, EngineError> {
        Ok(self.lines.pop_front())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOptions {
    pub policy: RetrievalPolicy,
    pub max_turns: u32,
    /// Keep talking after a shift until the cap instead of stopping after
    /// one closing exchange.
    pub run_to_cap: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self { policy: RetrievalPolicy::PerSession, max_turns: DEFAULT_MAX_TURNS, run_to_cap: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub transcript: Vec<Utterance>,
    pub shift_turn: Option<u32>,
    pub retrieved: Option<RankedCandidate>,
    pub retrieved_topic: Option<TopicEntry>,
    pub turns: u32,
    pub retrievals: u32,
    pub retrieved_per_turn: Vec<usize>,
}

impl From<SessionState> for SessionOutcome {
    fn from(s: SessionState) -> Self {
        Self {
            retrieved_topic: s.retrieved_topic().cloned(),
            transcript: s.transcript,
            shift_turn: s.shift_turn,
            retrieved: s.retrieved,
            turns: s.turn_counter,
            retrievals: s.retrievals,
            retrieved_per_turn: s.retrieved_per_turn,
        }
    }
}

/// Ranker, backends and summary cache shared by all sessions.
pub struct Engine {
    model: Arc<RankerModel>,
    chat: Arc<dyn ChatBackend>,
    embed: Arc<dyn EmbedBackend>,
    summarizer: Summarizer,
}

impl Engine {
    pub fn new(model: Arc<RankerModel>, chat: Arc<dyn ChatBackend>, embed: Arc<dyn EmbedBackend>) -> Self {
        Self { summarizer: Summarizer::new(chat.clone()), model, chat, embed }
    }

    pub fn model(&self) -> &RankerModel {
        &self.model
    }

    pub fn chat_backend(&self) -> &dyn ChatBackend {
        self.chat.as_ref()
    }

    /// Starts a session. `prefix` holds complete exchanges only (it may be
    /// empty); the first bot turn comes from the first [`Engine::step`].
    pub fn open(
        &self,
        bundle: HistoryBundle,
        prefix: Vec<Utterance>,
        policy: RetrievalPolicy,
        max_turns: u32,
    ) -> Result<SessionState, EngineError> {
        bundle.validate()?;
        for (i, u) in prefix.iter().enumerate() {
            u.validate().map_err(EngineError::InvalidOpening)?;
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Bot };
            if u.speaker != expected {
                return Err(EngineError::InvalidOpening(format!("utterance {i} should be from {expected}")));
            }
        }
        if !prefix.len().is_multiple_of(2) {
            return Err(EngineError::InvalidOpening("prefix must end with a bot utterance".into()));
        }
        let topics = self.summarizer.ensure_topics(&bundle)?;
        let mut state = SessionState {
            bundle,
            topics,
            context: Vec::new(),
            ranking: Vec::new(),
            retrieved: None,
            policy,
            transcript: prefix,
            turn_counter: 0,
            shift_turn: None,
            max_turns,
            retrievals: 0,
            retrieved_per_turn: Vec::new(),
        };
        state.refresh_context();
        Ok(state)
    }

    /// Appends the user's utterance, retrieves (per policy), and generates
    /// the bot turn. On error `state` is left untouched.
    pub fn step(&self, state: &mut SessionState, user_text: &str) -> Result<TurnDecision, EngineError> {
        if state.turn_counter >= state.max_turns {
            return Err(EngineError::MaxTurnsExceeded(state.max_turns));
        }
        let user = Utterance::user(user_text.trim());
        user.validate().map_err(EngineError::Precondition)?;
        let mut transcript = state.transcript.clone();
        transcript.push(user);

        let mut ranking = None;
        if state.ranking.is_empty() || state.policy == RetrievalPolicy::PerUtterance {
            let window = ContextWindow::tail(&transcript)?;
            ranking = Some(ranker::rank(&self.model, &window, &state.topics, self.embed.as_ref())?);
        }
        let top = ranking.as_ref().unwrap_or(&state.ranking)[0];
        let topic = &state.topics[top.topic_index];
        let memory = state
            .bundle
            .get(&topic.dialogue_id)
            .ok_or_else(|| EngineError::MissingMemory(topic.dialogue_id.clone()))?;
        let decision = generate_turn(self.chat.as_ref(), &shift_request(&transcript, memory, &topic.topic))?;

        transcript.push(Utterance::bot_decision(&decision.response, &decision.thoughts, decision.shift));
        if let Some(r) = ranking {
            state.ranking = r;
            state.retrievals += 1;
        }
        state.retrieved = Some(top);
        state.retrieved_per_turn.push(top.topic_index);
        state.transcript = transcript;
        state.refresh_context();
        state.turn_counter += 1;
        if decision.shift && state.shift_turn.is_none() {
            state.shift_turn = Some(state.turn_counter);
        }
        Ok(decision)
    }

    /// Runs a whole session. `opening` ends with the user's first utterance
    /// of the new conversation; later user turns come from `user_source`.
    pub fn run_session(
        &self,
        bundle: HistoryBundle,
        opening: &[Utterance],
        user_source: &mut dyn UserSource,
        options: SessionOptions,
    ) -> Result<SessionOutcome, EngineError> {
        let (first, prefix) = opening
            .split_last()
            .filter(|(last, _)| last.speaker == Speaker::User)
            .ok_or_else(|| EngineError::InvalidOpening("opening must end with a user utterance".into()))?;
        let mut state = self.open(bundle, prefix.to_vec(), options.policy, options.max_turns)?;
        self.step(&mut state, &first.text)?;
        loop {
            if state.turn_counter >= state.max_turns {
                break;
            }
            if let (Some(tau), false) = (state.shift_turn, options.run_to_cap) {
                if state.turn_counter > tau {
                    break;
                }
            }
            let text = user_source.next_utterance(&state)?.ok_or(EngineError::SessionAborted)?;
            self.step(&mut state, &text)?;
        }
        Ok(state.into())
    }
}
