//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::sync::Arc;

use mnemo_core::engine::{Engine, ScriptedUser};
use mnemo_core::eval::{FeatureInstance, NOMINAL_CANDIDATES};
use mnemo_core::gateway::{ChatRule, EmbedRule, MockBackend};
use mnemo_core::prompts;
use mnemo_core::ranker::{feature_dim, PreferencePair, RankerModel};
use mnemo_core::store::{Dialogue, DialogueKind, HistoryBundle, Subject, Utterance};

/// splitmix64: trivially portable, so the Python reference script
/// regenerates the separable benchmark bit for bit.
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

pub const BENCH_SEED: u64 = 42;
pub const BENCH_DIM: usize = 16;
pub const BENCH_PAIRS: usize = 1000;
pub const BENCH_EVAL: usize = 200;
/// Relevant features sit `MARGIN` along the hidden direction; noise is
/// uniform in ±`NOISE` per coordinate, so |u·noise| ≤ NOISE·√F < MARGIN/2.
pub const BENCH_MARGIN: f64 = 4.0;
pub const BENCH_NOISE: f64 = 0.3;

pub struct Benchmark {
    pub direction: Vec<f64>,
    pub pairs: Vec<PreferencePair>,
    pub eval: Vec<FeatureInstance>,
}

fn noise(rng: &mut SplitMix, f: usize) -> Vec<f64> {
    (0..f).map(|_| rng.range(-BENCH_NOISE, BENCH_NOISE)).collect()
}

fn relevant(rng: &mut SplitMix, u: &[f64]) -> Vec<f64> {
    noise(rng, u.len()).iter().zip(u).map(|(n, d)| n + BENCH_MARGIN * d).collect()
}

/// Draw order (mirrored by `tests/oracles/reference_descent.py`): direction;
/// per pair pos then neg; per eval instance truth index then candidates in
/// index order.
pub fn separable_benchmark() -> Benchmark {
    let f = feature_dim(BENCH_DIM);
    let mut rng = SplitMix(BENCH_SEED);
    let raw: Vec<f64> = (0..f).map(|_| rng.range(-1.0, 1.0)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let u: Vec<f64> = raw.iter().map(|x| x / norm).collect();
    let pairs = (0..BENCH_PAIRS)
        .map(|_| {
            let pos = relevant(&mut rng, &u);
            let neg = noise(&mut rng, f);
            PreferencePair { pos, neg }
        })
        .collect();
    let eval = (0..BENCH_EVAL)
        .map(|_| {
            let truth = (rng.next_u64() % NOMINAL_CANDIDATES as u64) as usize;
            let features = (0..NOMINAL_CANDIDATES)
                .map(|j| if j == truth { relevant(&mut rng, &u) } else { noise(&mut rng, f) })
                .collect();
            FeatureInstance { features, truth_index: truth }
        })
        .collect();
    Benchmark { direction: u, pairs, eval }
}

pub fn dialogue(id: &str, kind: DialogueKind, topic: &str, lines: &[(&str, &str)], day_offset: u32) -> Dialogue {
    Dialogue {
        id: id.into(),
        kind,
        subject: match kind {
            DialogueKind::Memorable => Subject::PersonalInterests,
            DialogueKind::General => Subject::SocialEvents,
        },
        topic: Some(topic.into()),
        day_offset,
        turns: lines.iter().flat_map(|(u, b)| [Utterance::user(*u), Utterance::bot(*b)]).collect(),
    }
}

/// Two stored memories: a piano hobby (anchor) and a marathon plan.
pub fn two_topic_bundle() -> HistoryBundle {
    HistoryBundle {
        anchor_id: "piano".into(),
        dialogues: vec![
            dialogue(
                "piano",
                DialogueKind::Memorable,
                "User is learning piano",
                &[("My piano teacher gave me a Chopin piece", "Which one?")],
                9,
            ),
            dialogue(
                "marathon",
                DialogueKind::General,
                "User is training for a marathon",
                &[("I signed up for the city marathon", "How is training going?")],
                4,
            ),
        ],
    }
}

pub fn opening() -> Vec<Utterance> {
    vec![
        Utterance::user("Hi, long week"),
        Utterance::bot("Welcome back! What happened?"),
        Utterance::user("Lots of meetings"),
        Utterance::bot("That sounds tiring."),
        Utterance::user("Yes, I practiced piano to unwind"),
    ]
}

pub const USER_LINES: [&str; 9] = [
    "Then I went for a run, a long run by the river",
    "Good piano weather, so more piano after",
    "I might cook pasta tonight",
    "Maybe with mushrooms",
    "What do you usually recommend?",
    "Sounds good",
    "Okay",
    "Thanks",
    "Bye",
];

/// Scripted bot: turn k answers the k-th user line, shifting at turn 3.
pub fn scripted_chat(shift_at: u32) -> MockBackend {
    let firsts: Vec<&str> = std::iter::once("Yes, I practiced piano to unwind").chain(USER_LINES).collect();
    let mut mock = MockBackend::new(BENCH_DIM)
        .with_rule(ChatRule::contains(&[prompts::SUMMARIZE_SYSTEM, "marathon"], "User is training for a marathon"))
        .with_rule(ChatRule::contains(&[prompts::SUMMARIZE_SYSTEM, "piano"], "User is learning piano"));
    for (k, line) in firsts.iter().enumerate() {
        let turn = k as u32 + 1;
        let shift = if turn == shift_at { "Yes" } else { "No" };
        mock = mock.with_rule(ChatRule::ends_with(
            format!("User: {line}"),
            format!("Thoughts: turn {turn} reasoning\nShift: {shift}\nResponse: bot reply {turn}"),
        ));
    }
    mock
}

/// Embeddings on two axes: piano talk vs running talk. Keyword counts in
/// the five-utterance window favour piano at turn 1, running at turn 2 and
/// piano again from turn 3 (ties go to piano, the first topic).
pub fn engineered_embedder() -> MockBackend {
    MockBackend::new(BENCH_DIM)
        .with_embed_rule(EmbedRule::axis("piano", 0))
        .with_embed_rule(EmbedRule::axis("marathon", 1))
        .with_embed_rule(EmbedRule::axis("run", 1))
}

pub fn engine(shift_at: u32) -> Engine {
    Engine::new(
        Arc::new(RankerModel::cosine(BENCH_DIM)),
        Arc::new(scripted_chat(shift_at)),
        Arc::new(engineered_embedder()),
    )
}

pub fn scripted_user() -> ScriptedUser {
    ScriptedUser::new(USER_LINES)
}
