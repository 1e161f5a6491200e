use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    AttemptError, ChatBackend, ChatReply, ChatRequest, EmbeddingBackend, EmbeddingRequest,
    Embeddings, Granularity,
};
use crate::metrics::tokenize;

type Responder = Arc<dyn Fn(&str) -> Result<String, AttemptError> + Send + Sync>;

/// Deterministic chat backend driven by canned replies.
///
/// Lookup order: exact prompt, then the first substring rule that matches,
/// then the fallback responder. When a rule has several replies, one is
/// chosen by hashing `(seed, prompt)`, so output is a pure function of both.
#[derive(Clone, Default)]
pub struct ScriptedBackend {
    exact: HashMap<String, Vec<String>>,
    contains: Vec<(String, Vec<String>)>,
    fallback: Option<Responder>,
    seed: u64,
    transcript: Arc<Mutex<Vec<(String, String)>>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_exact(mut self, prompt: impl Into<String>, reply: impl Into<String>) -> Self {
        self.exact
            .entry(prompt.into())
            .or_default()
            .push(reply.into());
        self
    }

    pub fn with_contains(mut self, needle: impl Into<String>, replies: Vec<String>) -> Self {
        self.contains.push((needle.into(), replies));
        self
    }

    pub fn with_fallback<F>(mut self, f: F) -> Self
    where
        F: Fn(&str) -> Result<String, AttemptError> + Send + Sync + 'static,
    {
        self.fallback = Some(Arc::new(f));
        self
    }

    /// Every (prompt, reply) pair served so far, in call order.
    pub fn transcript(&self) -> Vec<(String, String)> {
        self.transcript.lock().unwrap().clone()
    }

    fn pick<'a>(&self, prompt: &str, replies: &'a [String]) -> Option<&'a str> {
        match replies.len() {
            0 => None,
            1 => Some(&replies[0]),
            n => {
                let idx = (seeded_hash(self.seed, prompt.as_bytes()) % n as u64) as usize;
                Some(&replies[idx])
            }
        }
    }

    fn respond(&self, prompt: &str) -> Result<String, AttemptError> {
        if let Some(r) = self.exact.get(prompt).and_then(|r| self.pick(prompt, r)) {
            return Ok(r.to_string());
        }
        for (needle, replies) in &self.contains {
            if prompt.contains(needle.as_str()) {
                if let Some(r) = self.pick(prompt, replies) {
                    return Ok(r.to_string());
                }
            }
        }
        match &self.fallback {
            Some(f) => f(prompt),
            None => Err(AttemptError::Permanent(
                "no scripted reply for prompt".into(),
            )),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, AttemptError> {
        let text = self.respond(&request.prompt)?;
        self.transcript
            .lock()
            .unwrap()
            .push((request.prompt.clone(), text.clone()));
        Ok(ChatReply {
            prompt_tokens: Some(request.prompt.split_whitespace().count() as u64),
            completion_tokens: Some(text.split_whitespace().count() as u64),
            text,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Transient,
    Permanent,
}

/// Wraps a backend and fails its first `failures` calls (or all of them).
pub struct FaultInjector<B> {
    inner: B,
    failures: Option<usize>,
    kind: FaultKind,
    calls: AtomicUsize,
}

impl<B> FaultInjector<B> {
    pub fn new(inner: B, failures: usize) -> Self {
        Self {
            inner,
            failures: Some(failures),
            kind: FaultKind::Transient,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn always(inner: B) -> Self {
        Self {
            inner,
            failures: None,
            kind: FaultKind::Transient,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_kind(mut self, kind: FaultKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for FaultInjector<B> {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, AttemptError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.failures.is_none_or(|f| n < f) {
            let msg = format!("injected fault on call {}", n + 1);
            return Err(match self.kind {
                FaultKind::Transient => AttemptError::Transient(msg),
                FaultKind::Permanent => AttemptError::Permanent(msg),
            });
        }
        self.inner.send(request)
    }
}

fn seeded_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(bytes);
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Deterministic bag-of-tokens embedder.
///
/// Each token maps to a pseudo-random vector in `[-1, 1]^dim` keyed on
/// `(seed, token)`; a sentence embeds as the sum of its token vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn vector(&self, key: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(self.seed, key.as_bytes()));
        (0..self.dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
    }

    fn sentence(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            // Keeps punctuation-only inputs away from the zero vector.
            return self.vector(&format!("\u{0}{text}"));
        }
        let mut acc = vec![0.0; self.dim];
        for t in tokens.iter() {
            for (a, x) in acc.iter_mut().zip(self.vector(t)) {
                *a += x;
            }
        }
        acc
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn dimension(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_once(&self, request: &EmbeddingRequest) -> Result<Embeddings, AttemptError> {
        Ok(request
            .inputs
            .iter()
            .map(|text| match request.granularity {
                Granularity::Sentence => vec![self.sentence(text)],
                Granularity::Token => tokenize(text).iter().map(|t| self.vector(t)).collect(),
            })
            .collect())
    }
}
