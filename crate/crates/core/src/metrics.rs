//! Similarity metrics between generated and ground-truth behavior: ROUGE-L
//! F1 over word tokens, BERTScore-style greedy matching over token
//! embeddings, and cosine similarity of sentence embeddings.

use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    embed, BackendError, EmbeddingBackend, EmbeddingRequest, Granularity, RetryPolicy,
};
use crate::types::MetricVector;

/// Sequences longer than this are truncated before LCS.
pub const MAX_LCS_TOKENS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty token list")]
    EmptyTokenList,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
}

impl Deref for TokenSequence {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercases, splits on whitespace and trims non-alphanumeric characters
/// from both ends of each chunk. Chunks that end up empty are dropped.
pub fn tokenize(text: &str) -> TokenSequence {
    let tokens = text
        .split_whitespace()
        .map(|chunk| {
            chunk
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect();
    TokenSequence { tokens }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredPair {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoredPair {
    pub fn new(precision: f64, recall: f64) -> Self {
        let sum = precision + recall;
        let f1 = if sum == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / sum
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // Single rolling row over the shorter side.
    let (outer, inner) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; inner.len() + 1];
    for x in outer {
        let mut diag = 0;
        for (j, y) in inner.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[inner.len()]
}

fn truncated(seq: &[String]) -> &[String] {
    if seq.len() > MAX_LCS_TOKENS {
        log::warn!(
            "truncating {} tokens to {MAX_LCS_TOKENS} for ROUGE-L",
            seq.len()
        );
        &seq[..MAX_LCS_TOKENS]
    } else {
        seq
    }
}

pub fn rouge_l_f1(candidate: &TokenSequence, reference: &TokenSequence) -> ScoredPair {
    let (c, r) = (truncated(candidate), truncated(reference));
    let l = lcs_len(c, r) as f64;
    let ratio = |n: usize| if n == 0 { 0.0 } else { l / n as f64 };
    ScoredPair::new(ratio(c.len()), ratio(r.len()))
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, MetricError> {
    if u.len() != v.len() {
        return Err(MetricError::DimensionMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    // sqrt(nu * nv) rather than sqrt(nu) * sqrt(nv): exact 1.0 for u == v.
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// Greedy-matching BERTScore without IDF weighting or baseline rescaling.
pub fn bertscore_f1(
    candidate: &[Vec<f64>],
    reference: &[Vec<f64>],
) -> Result<ScoredPair, MetricError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptyTokenList);
    }
    let dim = candidate[0].len();
    if let Some(bad) = candidate.iter().chain(reference).find(|v| v.len() != dim) {
        return Err(MetricError::DimensionMismatch(dim, bad.len()));
    }
    let sim: Vec<Vec<f64>> = candidate
        .iter()
        .map(|c| {
            reference
                .iter()
                .map(|r| cosine(c, r))
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;
    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / candidate.len() as f64;
    let recall = (0..reference.len())
        .map(|j| {
            sim.iter()
                .map(|row| row[j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / reference.len() as f64;
    Ok(ScoredPair::new(precision, recall))
}

pub fn embedding_similarity(
    candidate: &str,
    reference: &str,
    embedder: Option<&dyn EmbeddingBackend>,
    model_id: &str,
    retry: &RetryPolicy,
) -> Result<f64, MetricError> {
    let req = EmbeddingRequest {
        model_id: model_id.to_string(),
        inputs: vec![candidate.to_string(), reference.to_string()],
        granularity: Granularity::Sentence,
    };
    let out = embed(embedder, &req, retry)?;
    match (out[0].first(), out[1].first()) {
        (Some(u), Some(v)) => cosine(u, v),
        _ => Err(MetricError::EmptyTokenList),
    }
}

/// The three metrics bundled with their (optional) embedding backend.
#[derive(Clone, Default)]
pub struct MetricSuite {
    pub embedder: Option<Arc<dyn EmbeddingBackend>>,
    pub sentence_model: String,
    pub token_model: String,
    pub retry: RetryPolicy,
}

impl MetricSuite {
    /// ROUGE-L only; embedding metrics are recorded as skipped.
    pub fn lexical() -> Self {
        Self::default()
    }

    pub fn with_embedder(embedder: Arc<dyn EmbeddingBackend>, model: impl Into<String>) -> Self {
        let model = model.into();
        Self {
            embedder: Some(embedder),
            sentence_model: model.clone(),
            token_model: model,
            ..Self::default()
        }
    }

    pub fn score(&self, candidate: &str, reference: &str) -> MetricVector {
        let rouge = rouge_l_f1(&tokenize(candidate), &tokenize(reference)).f1;
        let embedder = self.embedder.as_deref();
        let embedding_similarity = match embedding_similarity(
            candidate,
            reference,
            embedder,
            &self.sentence_model,
            &self.retry,
        ) {
            Ok(v) => Some(v),
            Err(e) => {
                skipped("embedding_similarity", &e);
                None
            }
        };
        let bertscore = match self.bertscore(candidate, reference) {
            Ok(v) => Some(v.f1),
            Err(e) => {
                skipped("bertscore_f1", &e);
                None
            }
        };
        MetricVector {
            rouge_l_f1: rouge,
            bertscore_f1: bertscore,
            embedding_similarity,
        }
    }

    fn bertscore(&self, candidate: &str, reference: &str) -> Result<ScoredPair, MetricError> {
        let req = EmbeddingRequest {
            model_id: self.token_model.clone(),
            inputs: vec![candidate.to_string(), reference.to_string()],
            granularity: Granularity::Token,
        };
        let out = embed(self.embedder.as_deref(), &req, &self.retry)?;
        bertscore_f1(&out[0], &out[1])
    }
}

fn skipped(metric: &str, e: &MetricError) {
    if !matches!(e, MetricError::Backend(BackendError::EmbeddingUnavailable)) {
        log::warn!("{metric} skipped: {e}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{AttemptError, Embeddings, HashEmbedder};
    use proptest::prelude::*;

    fn seq(xs: &[&str]) -> TokenSequence {
        TokenSequence {
            tokens: xs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The cat sat.").tokens, vec!["the", "cat", "sat"]);
        assert_eq!(tokenize("Hello,  world!").tokens, vec!["hello", "world"]);
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("-- don't \"stop\" --").tokens,
            vec!["don't", "stop"]
        );
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(
            rouge_l_f1(&seq(&["a", "b", "c"]), &seq(&["a", "b", "c"])).f1,
            1.0
        );
        let s = rouge_l_f1(&seq(&["a", "b", "c"]), &seq(&["a", "x", "c"]));
        assert_eq!(s.precision, 2.0 / 3.0);
        assert_eq!(s.recall, 2.0 / 3.0);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l_f1(&seq(&[]), &seq(&["a"])).f1, 0.0);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.7071067811865475).abs() < 1e-12);
        assert_eq!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(MetricError::ZeroVector)
        );
        assert_eq!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(MetricError::DimensionMismatch(1, 2))
        );
    }

    #[test]
    fn bertscore_examples() {
        let s = bertscore_f1(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = bertscore_f1(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0]]).unwrap();
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let s = bertscore_f1(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert_eq!(
            bertscore_f1(&[], &[vec![1.0]]),
            Err(MetricError::EmptyTokenList)
        );
        assert!(matches!(
            bertscore_f1(&[vec![1.0]], &[vec![1.0, 0.0]]),
            Err(MetricError::DimensionMismatch(..))
        ));
    }

    struct Orthogonal;

    impl EmbeddingBackend for Orthogonal {
        fn embed_once(&self, req: &EmbeddingRequest) -> Result<Embeddings, AttemptError> {
            Ok(req
                .inputs
                .iter()
                .map(|t| {
                    vec![if t == "left" {
                        vec![1.0, 0.0]
                    } else {
                        vec![0.0, 1.0]
                    }]
                })
                .collect())
        }
    }

    #[test]
    fn embedding_similarity_examples() {
        let mock = HashEmbedder::new(8, 3);
        let retry = RetryPolicy::default();
        let same = embedding_similarity("a b c", "a b c", Some(&mock), "m", &retry).unwrap();
        assert_eq!(same, 1.0);
        let orth = embedding_similarity("left", "right", Some(&Orthogonal), "m", &retry).unwrap();
        assert_eq!(orth, 0.0);
        assert!(matches!(
            embedding_similarity("a", "b", None, "m", &retry),
            Err(MetricError::Backend(BackendError::EmbeddingUnavailable))
        ));
    }

    #[test]
    fn suite_without_embedder_skips_embedding_metrics() {
        let v = MetricSuite::lexical().score("The cat sat.", "the cat sat");
        assert_eq!(v.rouge_l_f1, 1.0);
        assert_eq!(v.bertscore_f1, None);
        assert_eq!(v.embedding_similarity, None);
    }

    #[test]
    fn suite_with_embedder_fills_all() {
        let suite = MetricSuite::with_embedder(Arc::new(HashEmbedder::new(16, 0)), "mock");
        let v = suite.score("The cat sat.", "The cat sat.");
        assert_eq!(v.rouge_l_f1, 1.0);
        assert!((v.bertscore_f1.unwrap() - 1.0).abs() < 1e-12);
        assert!((v.embedding_similarity.unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rouge_f1_symmetric(a in prop::collection::vec("[abc]", 0..10), b in prop::collection::vec("[abc]", 0..10)) {
            let (a, b) = (TokenSequence { tokens: a }, TokenSequence { tokens: b });
            let ab = rouge_l_f1(&a, &b);
            let ba = rouge_l_f1(&b, &a);
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-15);
        }

        #[test]
        fn cosine_self_and_scale(u in prop::collection::vec(-10.0f64..10.0, 1..8), alpha in 0.01f64..100.0) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-6));
            prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
            let v: Vec<f64> = u.iter().rev().copied().collect();
            let scaled: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            prop_assert!((cosine(&scaled, &v).unwrap() - cosine(&u, &v).unwrap()).abs() < 1e-12);
        }
    }
}
