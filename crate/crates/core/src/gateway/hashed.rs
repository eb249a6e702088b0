use super::{EmbedBackend, EmbeddingVector, GatewayError};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Offline embedding: character 3-gram counts hashed into `dim` buckets,
/// then L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashedEmbedder {
    dim: usize,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let chars: Vec<char> = text.chars().collect();
        let mut counts = vec![0.0f64; self.dim];
        let mut gram = String::new();
        if chars.len() < 3 {
            counts[bucket(text, self.dim)] += 1.0;
        } else {
            for w in chars.windows(3) {
                gram.clear();
                gram.extend(w);
                counts[bucket(&gram, self.dim)] += 1.0;
            }
        }
        EmbeddingVector { values: counts }.normalized()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn bucket(gram: &str, dim: usize) -> usize {
    (fnv1a(gram.as_bytes()) % dim as u64) as usize
}

impl EmbedBackend for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
