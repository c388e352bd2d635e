//! Decoupled guidance: a VLM reasoning branch and a native text branch.
//!
//! VLM outputs are stripped of the tokens that echo the instruction prompt,
//! keeping only visual and reasoning tokens, before being mapped into the
//! generator's guidance space by an [`AdapterMap`].

mod adapter;
mod client;

pub use adapter::AdapterMap;
pub use client::{image_digest, inputs_digest, MotionEncoder, StubMotionEncoder, StubVlm, VlmClient, VlmOutput};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::tensor::Mat;

/// Default style-analysis instruction shipped with the crate.
pub const STYLE_PROMPT: &str = include_str!("../../data/style_prompt.txt");
/// Default frame-description instruction used for adapter pretraining.
pub const PRETRAIN_PROMPT: &str = include_str!("../../data/pretrain_prompt.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Motion,
    Style,
    Insert,
    FeedbackStyle,
    FeedbackInsert,
    Pretrain,
}

/// A guidance token sequence with the digest of the inputs that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceEmbedding {
    tokens: Mat,
    provenance: Provenance,
    source_hash: String,
    /// For composed video guidance: index of the first motion token.
    boundary: Option<usize>,
}

impl GuidanceEmbedding {
    pub fn new(tokens: Mat, provenance: Provenance, source_hash: String) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::EmptyGuidance);
        }
        if !tokens.is_finite() {
            return Err(Error::Guidance("non-finite guidance token".into()));
        }
        Ok(GuidanceEmbedding {
            tokens,
            provenance,
            source_hash,
            boundary: None,
        })
    }

    pub fn tokens(&self) -> &Mat {
        &self.tokens
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn boundary(&self) -> Option<usize> {
        self.boundary
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Map the tokens through the adapter, keeping provenance and hash.
    pub fn adapted(&self, adapter: &AdapterMap) -> Result<GuidanceEmbedding> {
        if adapter.in_dim() != self.dim() {
            return Err(Error::Shape(format!(
                "adapter expects {}-dim tokens, got {}",
                adapter.in_dim(),
                self.dim()
            )));
        }
        Ok(GuidanceEmbedding {
            tokens: adapter.apply(&self.tokens)?,
            ..self.clone()
        })
    }
}

/// Keep the tokens whose prompt flag is false, in order.
pub fn select_guidance_tokens(tokens: &Mat, is_prompt: &[bool]) -> Result<Mat> {
    if is_prompt.len() != tokens.rows() {
        return Err(Error::Shape(format!(
            "{} prompt flags for {} tokens",
            is_prompt.len(),
            tokens.rows()
        )));
    }
    let kept: Vec<usize> = (0..tokens.rows()).filter(|&i| !is_prompt[i]).collect();
    if kept.is_empty() {
        return Err(Error::EmptyGuidance);
    }
    let mut data = Vec::with_capacity(kept.len() * tokens.cols());
    for i in kept.iter().copied() {
        data.extend_from_slice(tokens.row(i));
    }
    Mat::from_vec(kept.len(), tokens.cols(), data)
}

fn vlm_guidance(
    client: &dyn VlmClient,
    prompt: &str,
    images: &[&LatentGrid],
    provenance: Provenance,
) -> Result<GuidanceEmbedding> {
    let out = client.query(prompt, images).map_err(|e| match e {
        e @ Error::Client { .. } => e,
        other => Error::client("vlm", other.to_string()),
    })?;
    let tokens = select_guidance_tokens(&out.tokens, &out.is_prompt)?;
    GuidanceEmbedding::new(tokens, provenance, hex::encode(inputs_digest(prompt, images)))
}

/// Style guidance for the image stream from the raw reference and the first
/// source frame.
pub fn style_guidance(
    client: &dyn VlmClient,
    raw_ref: &LatentGrid,
    source_frame0: &LatentGrid,
    style_prompt: &str,
) -> Result<GuidanceEmbedding> {
    vlm_guidance(client, style_prompt, &[raw_ref, source_frame0], Provenance::Style)
}

/// Insertion guidance for the video stream.
pub fn insert_guidance(
    client: &dyn VlmClient,
    raw_ref: &LatentGrid,
    source_frame0: &LatentGrid,
    insert_prompt: &str,
) -> Result<GuidanceEmbedding> {
    vlm_guidance(client, insert_prompt, &[raw_ref, source_frame0], Provenance::Insert)
}

/// Frame-description guidance used while pretraining the adapter.
pub fn pretrain_guidance(
    client: &dyn VlmClient,
    source_frame0: &LatentGrid,
    pretrain_prompt: &str,
) -> Result<GuidanceEmbedding> {
    vlm_guidance(client, pretrain_prompt, &[source_frame0], Provenance::Pretrain)
}

#[derive(Debug, Clone, Copy)]
pub enum FeedbackPrompt<'a> {
    Style(&'a str),
    Insert(&'a str),
}

/// Re-query the VLM with the one-step estimate in place of the raw reference.
pub fn feedback_guidance(
    client: &dyn VlmClient,
    prompt: FeedbackPrompt<'_>,
    x0_estimate: &LatentGrid,
    source_frame0: &LatentGrid,
) -> Result<GuidanceEmbedding> {
    let (text, provenance) = match prompt {
        FeedbackPrompt::Style(p) => (p, Provenance::FeedbackStyle),
        FeedbackPrompt::Insert(p) => (p, Provenance::FeedbackInsert),
    };
    vlm_guidance(client, text, &[x0_estimate, source_frame0], provenance)
}

/// Motion guidance from the native text branch. Already in generation space.
pub fn motion_guidance(encoder: &dyn MotionEncoder, description: &str) -> Result<GuidanceEmbedding> {
    let tokens = encoder.encode(description).map_err(|e| match e {
        e @ Error::Client { .. } => e,
        other => Error::client("motion-encoder", other.to_string()),
    })?;
    let hash = hex::encode(inputs_digest(description, &[]));
    GuidanceEmbedding::new(tokens, Provenance::Motion, hash)
}

/// Video-stream guidance: adapted insertion tokens followed by motion tokens.
pub fn compose_video_guidance(
    adapter: &AdapterMap,
    motion: &GuidanceEmbedding,
    insert: &GuidanceEmbedding,
) -> Result<GuidanceEmbedding> {
    if motion.is_empty() || insert.is_empty() {
        return Err(Error::EmptyGuidance);
    }
    let adapted = insert.adapted(adapter)?;
    if adapted.dim() != motion.dim() {
        return Err(Error::Shape(format!(
            "adapted insert dim {} vs motion dim {}",
            adapted.dim(),
            motion.dim()
        )));
    }
    let tokens = Mat::concat_rows(&[adapted.tokens(), motion.tokens()])?;
    let boundary = adapted.len();
    let mut out = GuidanceEmbedding::new(
        tokens,
        insert.provenance(),
        format!("{}+{}", insert.source_hash(), motion.source_hash()),
    )?;
    out.boundary = Some(boundary);
    Ok(out)
}
