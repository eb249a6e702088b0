use crate::gateway::{self, EmbedBackend, EmbeddingVector};
use crate::store::Utterance;
use crate::summarizer::TopicEntry;

use super::{ContextWindow, RankerError};

pub fn feature_dim(embedding_dim: usize) -> usize {
    2 * embedding_dim + 1
}

/// Utterance texts joined by newlines, without speaker tags.
pub fn context_text(utterances: &[Utterance]) -> String {
    utterances.iter().map(|u| u.text.as_str()).collect::<Vec<_>>().join("\n")
}

/// `[e_c ⊙ e_t ; |e_c − e_t| ; cos(e_c, e_t)]` over L2-normalized inputs.
pub fn featurize_embeddings(context: &EmbeddingVector, topic: &EmbeddingVector) -> Result<Vec<f64>, RankerError> {
    if context.dim() != topic.dim() {
        return Err(RankerError::DimMismatch { expected: context.dim(), got: topic.dim() });
    }
    let c = context.normalized();
    let t = topic.normalized();
    let d = c.dim();
    let mut out = Vec::with_capacity(feature_dim(d));
    out.extend(c.values.iter().zip(&t.values).map(|(a, b)| a * b));
    out.extend(c.values.iter().zip(&t.values).map(|(a, b)| (a - b).abs()));
    let cos = out[..d].iter().sum::<f64>();
    out.push(cos);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(RankerError::NonFinite("feature vector".into()));
    }
    Ok(out)
}

pub fn featurize(
    context: &ContextWindow,
    topic: &TopicEntry,
    backend: &dyn EmbedBackend,
) -> Result<Vec<f64>, RankerError> {
    let mut all = featurize_all(context, std::slice::from_ref(topic), backend)?;
    Ok(all.remove(0))
}

/// Features for every topic against one context, with a single embed call.
pub fn featurize_all(
    context: &ContextWindow,
    topics: &[TopicEntry],
    backend: &dyn EmbedBackend,
) -> Result<Vec<Vec<f64>>, RankerError> {
    if let Some(t) = topics.iter().find(|t| t.topic.trim().is_empty()) {
        return Err(RankerError::InvalidContext(format!("topic for `{}` is empty", t.dialogue_id)));
    }
    let mut texts = Vec::with_capacity(topics.len() + 1);
    texts.push(context.text());
    texts.extend(topics.iter().map(|t| t.topic.clone()));
    let embeddings = gateway::embed(backend, &texts)?;
    let (ctx, rest) = embeddings.split_first().expect("at least the context embedding");
    rest.iter().map(|t| featurize_embeddings(ctx, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::HashedEmbedder;

    fn ctx(text: &str) -> ContextWindow {
        ContextWindow::new(vec![Utterance::user(text)]).unwrap()
    }

    #[test]
    fn identical_text_gives_unit_cosine() {
        let e = HashedEmbedder::new(256);
        let f = featurize(&ctx("User is learning piano"), &TopicEntry::provided("d", "User is learning piano"), &e)
            .unwrap();
        assert_eq!(f.len(), 513);
        assert!((f[512] - 1.0).abs() < 1e-9);
        assert!(f[256..512].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn different_topics_differ() {
        let e = HashedEmbedder::new(256);
        let c = ctx("I practiced scales on the piano today");
        let a = featurize(&c, &TopicEntry::provided("a", "User is learning piano"), &e).unwrap();
        let b = featurize(&c, &TopicEntry::provided("b", "User adopted a cat"), &e).unwrap();
        assert_ne!(a, b);
        assert!(a[512] > b[512]);
    }

    #[test]
    fn featurize_all_matches_single() {
        let e = HashedEmbedder::new(32);
        let c = ctx("hello world");
        let topics = vec![TopicEntry::provided("a", "hello"), TopicEntry::provided("b", "world")];
        let all = featurize_all(&c, &topics, &e).unwrap();
        assert_eq!(all[1], featurize(&c, &topics[1], &e).unwrap());
    }

    #[test]
    fn mismatched_embeddings() {
        let a = EmbeddingVector { values: vec![1.0, 0.0] };
        let b = EmbeddingVector { values: vec![1.0] };
        assert!(matches!(featurize_embeddings(&a, &b), Err(RankerError::DimMismatch { .. })));
    }
}
