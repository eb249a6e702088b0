use proptest::prelude::*;

use mnemo_core::engine::{parse_turn_output, TurnDecision};
use mnemo_core::eval::{self, RankingInstance};
use mnemo_core::forge::tokenize;
use mnemo_core::gateway::{GenerationRequest, HashedEmbedder, Message, Role};
use mnemo_core::ranker::{self, PreferencePair, RankerModel, TrainConfig};
use mnemo_core::store::{Dialogue, DialogueKind, Subject, Utterance};
use mnemo_core::summarizer::{cap_topic, MAX_TOPIC_CHARS};

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.?!'你好é]{1,40}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn dialogue() -> impl Strategy<Value = Dialogue> {
    let pair = (text(), text(), proptest::option::of((text(), any::<bool>())));
    ("[a-z0-9-]{1,12}", any::<bool>(), proptest::option::of(text()), 0u32..400, proptest::collection::vec(pair, 1..8))
        .prop_map(|(id, memorable, topic, day_offset, pairs)| Dialogue {
            id,
            kind: if memorable { DialogueKind::Memorable } else { DialogueKind::General },
            subject: if memorable { Subject::Skills } else { Subject::HumorousJokes },
            topic,
            day_offset,
            turns: pairs
                .into_iter()
                .flat_map(|(u, b, decision)| {
                    let bot = match decision {
                        Some((thoughts, shift)) => Utterance::bot_decision(b, thoughts, shift),
                        None => Utterance::bot(b),
                    };
                    [Utterance::user(u), bot]
                })
                .collect(),
        })
}

fn instances() -> impl Strategy<Value = Vec<RankingInstance>> {
    proptest::collection::vec((1usize..=10).prop_map(|r| RankingInstance::new(10, r).unwrap()), 1..50)
}

fn pair(f: usize, scale: f64) -> impl Strategy<Value = PreferencePair> {
    (proptest::collection::vec(-scale..scale, f), proptest::collection::vec(-scale..scale, f))
        .prop_map(|(pos, neg)| PreferencePair { pos, neg })
}

fn model(d: usize) -> impl Strategy<Value = RankerModel> {
    proptest::collection::vec(-2.0..2.0f64, 2 * d + 1).prop_map(move |theta| {
        let mut m = RankerModel::zeros(d);
        m.theta = theta;
        m
    })
}

proptest! {
    #[test]
    fn dialogue_json_round_trip(d in dialogue()) {
        let line = serde_json::to_string(&d).unwrap();
        prop_assert!(!line.contains('\n'));
        let back: Dialogue = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn metrics_are_ordered_and_bounded(inst in instances()) {
        let r: Vec<f64> = (1..=10).map(|k| eval::recall_at_k(&inst, k).unwrap()).collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((r[9] - 1.0).abs() < 1e-12);
        let mrr = eval::mrr(&inst).unwrap();
        let ndcg = eval::ndcg(&inst).unwrap();
        // 1/r <= 1/log2(r + 1) <= 1 for every rank r >= 1
        prop_assert!(r[0] <= mrr + 1e-12 && mrr <= ndcg + 1e-12 && ndcg <= 1.0 + 1e-12);
        prop_assert!(r[0] >= 0.0);
    }

    #[test]
    fn pair_probability_is_antisymmetric(m in model(3), p in pair(7, 1.0)) {
        let a = ranker::pair_probability(&m, &p.pos, &p.neg).unwrap();
        let b = ranker::pair_probability(&m, &p.neg, &p.pos).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn bias_never_changes_pairwise_loss(m in model(2), ps in proptest::collection::vec(pair(5, 1.0), 1..6), bias in -5.0..5.0f64) {
        let mut shifted = m.clone();
        shifted.bias = bias;
        let a = ranker::pairwise_loss(&m, &ps).unwrap();
        let b = ranker::pairwise_loss(&shifted, &ps).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    // Features within ±0.3 keep the loss's smoothness constant below 2/lr,
    // so every descent step must not increase it.
    #[test]
    fn training_loss_never_increases(ps in proptest::collection::vec(pair(9, 0.3), 1..20), seed in any::<u64>()) {
        let (_, trace) = ranker::train_traced(&ps, &TrainConfig { learning_rate: 0.5, epochs: 30, seed }).unwrap();
        prop_assert_eq!(trace.len(), 31);
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", trace);
    }

    #[test]
    fn ranking_is_a_sorted_permutation(scores in proptest::collection::vec(prop_oneof![Just(0.5), -3.0..3.0f64], 1..30)) {
        let ranked = ranker::rank_scores(&scores);
        let mut idx: Vec<usize> = ranked.iter().map(|c| c.topic_index).collect();
        for w in ranked.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].topic_index < w[1].topic_index));
        }
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..scores.len()).collect::<Vec<_>>());
    }

    #[test]
    fn turn_output_round_trips(thoughts in text(), response in text(), shift in any::<bool>()) {
        let d = TurnDecision { thoughts: thoughts.trim().to_string(), shift, response: response.trim().to_string() };
        prop_assert_eq!(parse_turn_output(&d.render()).unwrap(), d);
    }

    #[test]
    fn hashed_embeddings_are_unit_length(t in text(), dim in 1usize..300) {
        let v = HashedEmbedder::new(dim).embed_one(&t);
        prop_assert_eq!(v.dim(), dim);
        prop_assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topics_are_capped(t in "[a-z ]{0,200}") {
        let capped = cap_topic(&t);
        prop_assert!(capped.chars().count() <= MAX_TOPIC_CHARS);
        prop_assert!(t.trim().starts_with(&capped));
    }

    #[test]
    fn tokens_cover_all_non_space_text(t in "[a-z 你好世界\t]{0,60}") {
        let tokens = tokenize(&t);
        prop_assert!(tokens.iter().all(|tok| !tok.is_empty() && !tok.contains(char::is_whitespace)));
        let squeezed: String = t.chars().filter(|c| !c.is_whitespace()).collect();
        prop_assert_eq!(tokens.concat(), squeezed);
    }
}

fn request() -> GenerationRequest {
    GenerationRequest::new(
        vec![
            Message::system("Summarize this conversation"),
            Message::user("User: I started piano lessons\nBot: Nice!"),
            Message::assistant("User is learning piano"),
            Message::user("Again, shorter"),
        ],
        0.0,
    )
}

/// Every field that reaches the backend is part of the fingerprint; the
/// seed is not.
#[test]
fn fingerprint_tracks_every_input_but_the_seed() {
    use rand::{Rng, SeedableRng};
    let base = request();
    let fp = base.fingerprint();
    let mut seeded = base.clone();
    seeded.seed = Some(7);
    assert_eq!(seeded.fingerprint(), fp);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let mut r = base.clone();
        match i % 5 {
            0 => r.temperature += rng.gen_range(1e-9..1.0),
            1 => r.max_tokens = rng.gen_range(1..1024),
            2 => {
                let m = rng.gen_range(0..r.messages.len());
                let pos = rng.gen_range(0..=r.messages[m].content.len());
                let pos = (0..=pos).rev().find(|&p| r.messages[m].content.is_char_boundary(p)).unwrap();
                r.messages[m].content.insert(pos, rng.gen_range('a'..='z'));
            }
            3 => {
                let m = rng.gen_range(1..r.messages.len());
                r.messages[m].role = if r.messages[m].role == Role::User { Role::Assistant } else { Role::User };
            }
            _ => {
                // moving text across a message boundary must not collide
                let cut = rng.gen_range(1..r.messages[1].content.len());
                let tail = r.messages[1].content.split_off(cut);
                r.messages[2].content.insert_str(0, &tail);
            }
        }
        assert_ne!(r.fingerprint(), fp, "perturbation {i} kept the fingerprint");
    }
}
