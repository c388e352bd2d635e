//! Model-client interfaces for the guidance branches, with deterministic stubs.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::tensor::Mat;

/// Raw VLM output: one embedding per token plus a flag marking tokens that
/// came from the instruction prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmOutput {
    pub tokens: Mat,
    pub is_prompt: Vec<bool>,
}

/// A vision-language model. Identical queries must give identical answers,
/// including when issued concurrently.
pub trait VlmClient: Send + Sync {
    fn embed_dim(&self) -> usize;

    fn query(&self, prompt: &str, images: &[&LatentGrid]) -> Result<VlmOutput>;
}

/// Native text encoder producing motion guidance directly in generation space.
pub trait MotionEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Mat>;
}

/// Content digest of a grid: extent, channels and values. The role tag is
/// deliberately left out so that a latent-space estimate and a stored image
/// with identical values are interchangeable.
pub fn image_digest(grid: &LatentGrid) -> [u8; 32] {
    let d = grid.dims();
    let mut h = Sha256::new();
    for v in [d.frames, d.height, d.width, grid.channels()] {
        h.update((v as u64).to_le_bytes());
    }
    for v in grid.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Digest of (prompt, ordered image digests).
pub fn inputs_digest(prompt: &str, images: &[&LatentGrid]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((prompt.len() as u64).to_le_bytes());
    h.update(prompt.as_bytes());
    h.update((images.len() as u64).to_le_bytes());
    for img in images {
        h.update(image_digest(img));
    }
    h.finalize().into()
}

fn seeded_rng(seed: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Hash-driven VLM: `prompt_tokens` flagged tokens (depending on the prompt
/// only) followed by `content_tokens` tokens depending on prompt and images.
#[derive(Debug)]
pub struct StubVlm {
    pub seed: u64,
    pub dim: usize,
    pub prompt_tokens: usize,
    pub content_tokens: usize,
    /// Fail every query after this many successful ones.
    pub fail_after: Option<usize>,
    calls: AtomicUsize,
}

impl StubVlm {
    pub fn new(seed: u64, dim: usize) -> Self {
        StubVlm {
            seed,
            dim,
            prompt_tokens: 3,
            content_tokens: 8,
            fail_after: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_tokens(mut self, prompt_tokens: usize, content_tokens: usize) -> Self {
        self.prompt_tokens = prompt_tokens;
        self.content_tokens = content_tokens;
        self
    }

    pub fn failing_after(mut self, n: usize) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl VlmClient for StubVlm {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn query(&self, prompt: &str, images: &[&LatentGrid]) -> Result<VlmOutput> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|limit| n >= limit) {
            return Err(Error::client(
                "vlm",
                format!("stub configured to fail after {} queries", n),
            ));
        }
        let std = 1.0 / (self.dim as f64).sqrt();
        let mut prompt_rng = seeded_rng(self.seed, &[b"prompt", prompt.as_bytes()]);
        let prompt_part = Mat::randn(self.prompt_tokens, self.dim, std, &mut prompt_rng);
        let mut content_rng = seeded_rng(self.seed, &[b"content", &inputs_digest(prompt, images)]);
        let content = Mat::randn(self.content_tokens, self.dim, std, &mut content_rng);
        let tokens = Mat::concat_rows(&[&prompt_part, &content])?;
        let mut is_prompt = vec![true; self.prompt_tokens];
        is_prompt.resize(self.prompt_tokens + self.content_tokens, false);
        Ok(VlmOutput { tokens, is_prompt })
    }
}

/// Hash-driven text encoder: one embedding per whitespace-separated word
/// (at least one), each derived from the word and its position.
#[derive(Debug, Clone)]
pub struct StubMotionEncoder {
    pub seed: u64,
    pub dim: usize,
}

impl MotionEncoder for StubMotionEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Mat> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let words = if words.is_empty() { vec![""] } else { words };
        let std = 1.0 / (self.dim as f64).sqrt();
        let rows: Vec<Mat> = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                Mat::randn(
                    1,
                    self.dim,
                    std,
                    &mut seeded_rng(self.seed, &[&i.to_le_bytes(), w.as_bytes()]),
                )
            })
            .collect();
        Mat::concat_rows(&rows.iter().collect::<Vec<_>>())
    }
}
