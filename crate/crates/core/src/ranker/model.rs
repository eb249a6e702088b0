use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::EmbedBackend;
use crate::summarizer::TopicEntry;

use super::{feature_dim, featurize_all, ContextWindow, PreferencePair, RankedCandidate, RankerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: u32,
    pub learning_rate: f64,
    pub final_loss: Option<f64>,
}

/// Linear scorer `r(c, t) = θ·φ(c, t) + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerModel {
    pub theta: Vec<f64>,
    pub bias: f64,
    pub embedding_dim: usize,
    pub feature_dim: usize,
    pub train_meta: TrainMeta,
}

impl RankerModel {
    pub fn zeros(embedding_dim: usize) -> Self {
        Self {
            theta: vec![0.0; feature_dim(embedding_dim)],
            bias: 0.0,
            embedding_dim,
            feature_dim: feature_dim(embedding_dim),
            train_meta: TrainMeta { seed: 0, epochs: 0, learning_rate: 0.0, final_loss: None },
        }
    }

    /// Untrained scorer that ranks by cosine similarity alone.
    pub fn cosine(embedding_dim: usize) -> Self {
        let mut m = Self::zeros(embedding_dim);
        *m.theta.last_mut().expect("feature_dim >= 1") = 1.0;
        m
    }

    pub fn validate(&self) -> Result<(), RankerError> {
        let f = feature_dim(self.embedding_dim);
        if self.feature_dim != f || self.theta.len() != f {
            return Err(RankerError::DimMismatch { expected: f, got: self.theta.len() });
        }
        if !self.bias.is_finite() || self.theta.iter().any(|x| !x.is_finite()) {
            return Err(RankerError::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { theta: self.theta.iter().map(|x| x * c).collect(), bias: self.bias * c, ..self.clone() }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.validate().map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn score(model: &RankerModel, feat: &[f64]) -> Result<f64, RankerError> {
    if feat.len() != model.theta.len() {
        return Err(RankerError::DimMismatch { expected: model.theta.len(), got: feat.len() });
    }
    let s = model.theta.iter().zip(feat).map(|(w, x)| w * x).sum::<f64>() + model.bias;
    if !s.is_finite() {
        return Err(RankerError::NonFinite("score".into()));
    }
    Ok(s)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `P(pos ≻ neg) = σ(r_pos − r_neg)`.
pub fn pair_probability(model: &RankerModel, feat_pos: &[f64], feat_neg: &[f64]) -> Result<f64, RankerError> {
    Ok(sigmoid(score(model, feat_pos)? - score(model, feat_neg)?))
}

/// Mean of `ln(1 + e^{r⁻ − r⁺})` over the batch.
pub fn pairwise_loss(model: &RankerModel, pairs: &[PreferencePair]) -> Result<f64, RankerError> {
    Ok(loss_and_gradient(model, pairs)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub theta: Vec<f64>,
    /// Always zero: the bias cancels inside every score difference.
    pub bias: f64,
}

pub fn loss_and_gradient(model: &RankerModel, pairs: &[PreferencePair]) -> Result<(f64, Gradient), RankerError> {
    if pairs.is_empty() {
        return Err(RankerError::EmptyBatch);
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.theta.len()];
    for p in pairs {
        let margin = score(model, &p.neg)? - score(model, &p.pos)?;
        loss += softplus(margin);
        let w = sigmoid(margin) / n;
        for ((g, neg), pos) in grad.iter_mut().zip(&p.neg).zip(&p.pos) {
            *g += w * (neg - pos);
        }
    }
    loss /= n;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(RankerError::NonFinite("loss or gradient".into()));
    }
    Ok((loss, Gradient { theta: grad, bias: 0.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, epochs: 200, seed: 42 }
    }
}

pub fn train(pairs: &[PreferencePair], config: &TrainConfig) -> Result<RankerModel, RankerError> {
    Ok(train_traced(pairs, config)?.0)
}

/// Full-batch gradient descent. Also returns the loss before every epoch
/// followed by the final loss (`epochs + 1` values).
pub fn train_traced(pairs: &[PreferencePair], config: &TrainConfig) -> Result<(RankerModel, Vec<f64>), RankerError> {
    let first = pairs.first().ok_or(RankerError::EmptyBatch)?;
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(RankerError::InvalidConfig("learning_rate must be > 0".into()));
    }
    if config.epochs == 0 {
        return Err(RankerError::InvalidConfig("epochs must be >= 1".into()));
    }
    let f = first.pos.len();
    if f % 2 == 0 {
        return Err(RankerError::InvalidConfig(format!("feature length {f} is not 2D+1")));
    }
    for p in pairs {
        for v in [&p.pos, &p.neg] {
            if v.len() != f {
                return Err(RankerError::DimMismatch { expected: f, got: v.len() });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = RankerModel::zeros((f - 1) / 2);
    for w in &mut model.theta {
        *w = rng.gen_range(-0.01..0.01);
    }
    let mut trace = Vec::with_capacity(config.epochs as usize + 1);
    for _ in 0..config.epochs {
        let (loss, grad) = loss_and_gradient(&model, pairs)?;
        trace.push(loss);
        for (w, g) in model.theta.iter_mut().zip(&grad.theta) {
            *w -= config.learning_rate * g;
        }
        model.bias -= config.learning_rate * grad.bias;
    }
    let final_loss = pairwise_loss(&model, pairs)?;
    trace.push(final_loss);
    model.train_meta = TrainMeta {
        seed: config.seed,
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        final_loss: Some(final_loss),
    };
    Ok((model, trace))
}

/// Sorts indices by score, descending; equal scores keep ascending index.
pub fn rank_scores(scores: &[f64]) -> Vec<RankedCandidate> {
    let mut out: Vec<RankedCandidate> =
        scores.iter().enumerate().map(|(topic_index, &score)| RankedCandidate { topic_index, score }).collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

pub fn rank(
    model: &RankerModel,
    context: &ContextWindow,
    topics: &[TopicEntry],
    backend: &dyn EmbedBackend,
) -> Result<Vec<RankedCandidate>, RankerError> {
    if topics.is_empty() {
        return Err(RankerError::NoTopics);
    }
    let scores =
        featurize_all(context, topics, backend)?.iter().map(|f| score(model, f)).collect::<Result<Vec<_>, _>>()?;
    Ok(rank_scores(&scores))
}
