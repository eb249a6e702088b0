//! Retrieval metrics, retrieval evaluation, user simulation and
//! session-level statistics.
//!
//! Every evaluation instance has exactly one relevant candidate, so all
//! metrics are functions of its 1-based rank:
//! - `R@k`  = fraction with rank ≤ k
//! - `MRR`  = mean of 1 / rank
//! - `NDCG` = mean of 1 / log2(rank + 1) (binary gain, ideal DCG = 1)

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{clean_user_line, user_turn_request, EngineError, SessionOutcome, SessionState, UserSource};
use crate::gateway::{self, ChatBackend, EmbedBackend, GatewayError};
use crate::ranker::{self, ContextWindow, RankerError, RankerModel};
use crate::store::{read_jsonl, HistoryBundle, Speaker, StoreError, Utterance};
use crate::summarizer::TopicEntry;

pub const NOMINAL_CANDIDATES: usize = 10;
pub const REPORTED_K: [usize; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty instance set")]
    EmptySet,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingInstance {
    pub candidate_count: usize,
    pub truth_rank: usize,
}

impl RankingInstance {
    pub fn new(candidate_count: usize, truth_rank: usize) -> Result<Self, EvalError> {
        if truth_rank == 0 || truth_rank > candidate_count {
            return Err(EvalError::Shape(format!("truth rank {truth_rank} outside 1..={candidate_count}")));
        }
        Ok(Self { candidate_count, truth_rank })
    }
}

fn mean_of(instances: &[RankingInstance], f: impl Fn(&RankingInstance) -> f64) -> Result<f64, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptySet);
    }
    Ok(instances.iter().map(f).sum::<f64>() / instances.len() as f64)
}

pub fn recall_at_k(instances: &[RankingInstance], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    mean_of(instances, |i| if i.truth_rank <= k { 1.0 } else { 0.0 })
}

pub fn mrr(instances: &[RankingInstance]) -> Result<f64, EvalError> {
    mean_of(instances, |i| 1.0 / i.truth_rank as f64)
}

pub fn ndcg(instances: &[RankingInstance]) -> Result<f64, EvalError> {
    mean_of(instances, |i| 1.0 / ((i.truth_rank + 1) as f64).log2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub achievement_rate: f64,
    /// Mean shift turn over sessions that shifted; `None` when none did.
    pub avg_shift_turn: Option<f64>,
    pub no_shift_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub ndcg: f64,
    pub n: usize,
    pub session_stats: Option<SessionStats>,
}

pub fn report(instances: &[RankingInstance]) -> Result<EvalReport, EvalError> {
    let r_at = REPORTED_K.iter().map(|&k| Ok((k, recall_at_k(instances, k)?))).collect::<Result<_, EvalError>>()?;
    Ok(EvalReport { r_at, mrr: mrr(instances)?, ndcg: ndcg(instances)?, n: instances.len(), session_stats: None })
}

/// One line of a retrieval test-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestInstance {
    pub context: Vec<Utterance>,
    pub candidates: Vec<String>,
    pub truth_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_truth_index: Option<usize>,
}

pub fn load_testset(path: impl AsRef<Path>) -> Result<Vec<TestInstance>, EvalError> {
    Ok(read_jsonl(path.as_ref())?)
}

/// Which label column is the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthLabel {
    /// The topic of the dialogue the context was continued from.
    #[default]
    Corresponding,
    /// The judge's top-ranked topic (`alt_truth_index`).
    TopRanked,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Accept candidate counts other than ten.
    pub allow_n: bool,
    pub truth: TruthLabel,
}

/// 1-based rank of `truth` in the ranking produced by `scores`.
fn truth_rank_of(scores: &[f64], truth: usize) -> usize {
    ranker::rank_scores(scores).iter().position(|c| c.topic_index == truth).expect("truth index within candidates") + 1
}

fn check_shape(count: usize, truth: usize, allow_n: bool) -> Result<(), EvalError> {
    if count != NOMINAL_CANDIDATES && !allow_n {
        return Err(EvalError::Shape(format!(
            "instance has {count} candidates, expected {NOMINAL_CANDIDATES} (pass allow_n to override)"
        )));
    }
    if count == 0 || truth >= count {
        return Err(EvalError::Shape(format!("truth index {truth} outside {count} candidates")));
    }
    Ok(())
}

pub fn evaluate_retrieval(
    model: &RankerModel,
    testset: &[TestInstance],
    backend: &dyn EmbedBackend,
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    let mut instances = Vec::with_capacity(testset.len());
    for (i, inst) in testset.iter().enumerate() {
        let truth = match options.truth {
            TruthLabel::Corresponding => inst.truth_index,
            TruthLabel::TopRanked => {
                inst.alt_truth_index.ok_or_else(|| EvalError::Shape(format!("instance {i} has no alt_truth_index")))?
            }
        };
        check_shape(inst.candidates.len(), truth, options.allow_n)?;
        let context = ContextWindow::tail(&inst.context)?;
        let topics: Vec<TopicEntry> = inst
            .candidates
            .iter()
            .enumerate()
            .map(|(j, t)| TopicEntry::provided(format!("candidate-{j}"), t))
            .collect();
        let ranking = ranker::rank(model, &context, &topics, backend)?;
        let rank = ranking.iter().position(|c| c.topic_index == truth).expect("permutation") + 1;
        instances.push(RankingInstance::new(topics.len(), rank)?);
    }
    report(&instances)
}

/// A test instance already in feature space: one vector per candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInstance {
    pub features: Vec<Vec<f64>>,
    pub truth_index: usize,
}

pub fn evaluate_features(
    model: &RankerModel,
    instances: &[FeatureInstance],
    allow_n: bool,
) -> Result<EvalReport, EvalError> {
    let ranked = instances
        .iter()
        .map(|inst| {
            check_shape(inst.features.len(), inst.truth_index, allow_n)?;
            let scores = inst.features.iter().map(|f| ranker::score(model, f)).collect::<Result<Vec<_>, _>>()?;
            RankingInstance::new(scores.len(), truth_rank_of(&scores, inst.truth_index))
        })
        .collect::<Result<Vec<_>, _>>()?;
    report(&ranked)
}

/// Next user utterance from a user-role generation backend.
pub fn simulate_user(
    persona: &HistoryBundle,
    transcript: &[Utterance],
    backend: &dyn ChatBackend,
) -> Result<String, EvalError> {
    match transcript.last() {
        Some(u) if u.speaker == Speaker::Bot => {}
        _ => return Err(EvalError::Precondition("the user simulator speaks only after a bot turn".into())),
    }
    let raw = gateway::chat(backend, &user_turn_request(persona, transcript))?;
    let line = clean_user_line(&raw);
    if line.is_empty() {
        return Err(GatewayError::EmptyCompletion.into());
    }
    Ok(line)
}

/// [`UserSource`] backed by [`simulate_user`]. It never runs out, so the
/// session's turn cap decides when the conversation ends.
pub struct SimulatedUser {
    backend: Arc<dyn ChatBackend>,
}

impl SimulatedUser {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self { backend }
    }
}

impl UserSource for SimulatedUser {
    fn next_utterance(&mut self, state: &SessionState) -> Result<Option<String>, EngineError> {
        simulate_user(&state.bundle, &state.transcript, self.backend.as_ref()).map(Some).map_err(|e| match e {
            EvalError::Gateway(g) => EngineError::Gateway(g),
            other => EngineError::Precondition(other.to_string()),
        })
    }
}

pub fn session_stats(outcomes: &[SessionOutcome]) -> Result<SessionStats, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let shifted: Vec<f64> = outcomes.iter().filter_map(|o| o.shift_turn).map(f64::from).collect();
    Ok(SessionStats {
        achievement_rate: shifted.len() as f64 / outcomes.len() as f64,
        avg_shift_turn: (!shifted.is_empty()).then(|| shifted.iter().sum::<f64>() / shifted.len() as f64),
        no_shift_count: outcomes.len() - shifted.len(),
    })
}

/// Externally annotated human scores for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub session_id: String,
    pub engagingness: Vec<f64>,
    pub overall_quality: Vec<f64>,
    /// 0 = not achieved, 1 = merely mentioned, 2 = shifted.
    pub achievement: u8,
    pub turn: u32,
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>, EvalError> {
    let rows: Vec<Annotation> = read_jsonl(path.as_ref())?;
    if let Some(bad) = rows.iter().find(|a| a.achievement > 2) {
        return Err(EvalError::Shape(format!(
            "session `{}`: achievement {} not in {{0, 1, 2}}",
            bad.session_id, bad.achievement
        )));
    }
    Ok(rows)
}

/// Cohen's kappa between two raters' categorical labels.
pub fn cohen_kappa(a: &[u8], b: &[u8]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Shape("raters labelled different numbers of items".into()));
    }
    if a.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut counts: BTreeMap<u8, (f64, f64)> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        counts.entry(x).or_default().0 += 1.0;
        counts.entry(y).or_default().1 += 1.0;
    }
    let expected = counts.values().map(|(ca, cb)| (ca / n) * (cb / n)).sum::<f64>();
    if (1.0 - expected).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ranks(rs: &[usize]) -> Vec<RankingInstance> {
        rs.iter().map(|&r| RankingInstance::new(10, r).unwrap()).collect()
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&ranks(&[1, 3, 7, 2]), 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&ranks(&[1, 1, 1]), 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranks(&[10, 4]), 10).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&[], 1), Err(EvalError::EmptySet)));
        assert!(matches!(recall_at_k(&ranks(&[1]), 0), Err(EvalError::InvalidK)));
    }

    #[test]
    fn mrr_examples() {
        assert_abs_diff_eq!(mrr(&ranks(&[1, 2, 4])).unwrap(), 0.583333, epsilon = 1e-6);
        assert_abs_diff_eq!(mrr(&ranks(&[1, 2, 4])).unwrap(), 1.75 / 3.0, epsilon = 1e-12);
        assert_eq!(mrr(&ranks(&[1, 1])).unwrap(), 1.0);
        assert_eq!(mrr(&ranks(&[10])).unwrap(), 0.1);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg(&ranks(&[1])).unwrap(), 1.0);
        // 1/log2(3) = 0.6309297535714575, 1/log2(11) = 0.28906482631788766
        assert_abs_diff_eq!(ndcg(&ranks(&[2])).unwrap(), 0.630930, epsilon = 1e-6);
        assert_abs_diff_eq!(ndcg(&ranks(&[10])).unwrap(), 0.289065, epsilon = 1e-6);
    }

    #[test]
    fn rank_bounds() {
        assert!(RankingInstance::new(10, 0).is_err());
        assert!(RankingInstance::new(10, 11).is_err());
    }

    #[test]
    fn session_stats_examples() {
        let o = |tau: Option<u32>| SessionOutcome {
            transcript: vec![],
            shift_turn: tau,
            retrieved: None,
            retrieved_topic: None,
            turns: 0,
            retrievals: 0,
            retrieved_per_turn: vec![],
        };
        let s = session_stats(&[o(Some(3)), o(None), o(Some(4)), o(Some(3))]).unwrap();
        assert_eq!(s.achievement_rate, 0.75);
        assert_abs_diff_eq!(s.avg_shift_turn.unwrap(), 10.0 / 3.0, epsilon = 1e-12);
        assert_eq!(s.no_shift_count, 1);
        let s = session_stats(&[o(None), o(None)]).unwrap();
        assert_eq!(s.achievement_rate, 0.0);
        assert_eq!(s.avg_shift_turn, None);
        assert!(serde_json::to_value(&s).unwrap()["avg_shift_turn"].is_null());
        let s = session_stats(&[o(Some(1))]).unwrap();
        assert_eq!((s.achievement_rate, s.avg_shift_turn), (1.0, Some(1.0)));
        assert!(session_stats(&[]).is_err());
    }

    #[test]
    fn kappa() {
        assert_eq!(cohen_kappa(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        // po = 0.5, pe = 0.5 → 0
        assert_abs_diff_eq!(cohen_kappa(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0, epsilon = 1e-12);
        assert!(cohen_kappa(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn annotations_reject_bad_grades() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        std::fs::write(
            &p,
            r#"{"session_id":"s1","engagingness":[2,1],"overall_quality":[1,1],"achievement":2,"turn":3}"#,
        )
        .unwrap();
        assert_eq!(load_annotations(&p).unwrap()[0].turn, 3);
        std::fs::write(&p, r#"{"session_id":"s1","engagingness":[],"overall_quality":[],"achievement":3,"turn":0}"#)
            .unwrap();
        assert!(load_annotations(&p).is_err());
    }
}
