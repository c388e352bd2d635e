use crate::attention::ConditionScope;
use crate::error::{Error, Result};
use crate::rope::{RopeConfig, RopeScheme};

/// Switches that remove one mechanism each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablations {
    /// No image-stream key/value injection into the video stream.
    pub single_stream: bool,
    /// Frame-append positions instead of Dual-World-View offsets.
    pub fulldit_rope: bool,
    /// Never refresh guidance from the one-step estimate.
    pub feedback_off: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 3] = ["single_stream", "fulldit_rope", "feedback_off"];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "single_stream" => self.single_stream = true,
            "fulldit_rope" => self.fulldit_rope = true,
            "feedback_off" => self.feedback_off = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn rope_scheme(&self) -> RopeScheme {
        if self.fulldit_rope {
            RopeScheme::FrameAppend
        } else {
            RopeScheme::DualWorldView
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiTConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Width of guidance tokens entering cross-attention.
    pub guidance_dim: usize,
    pub latent_channels: usize,
    /// Width of raw VLM tokens before the adapter.
    pub vlm_dim: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub condition_scope: ConditionScope,
    pub seed: u64,
    pub ablations: Ablations,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            depth: 2,
            model_dim: 64,
            heads: 4,
            head_dim: 16,
            guidance_dim: 32,
            latent_channels: 16,
            vlm_dim: 48,
            mlp_ratio: 2,
            rope_base: 10_000.0,
            condition_scope: ConditionScope::OwnSegment,
            seed: 0,
            ablations: Ablations::default(),
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::Config(format!(
                "model_dim {} != heads {} x head_dim {}",
                self.model_dim, self.heads, self.head_dim
            )));
        }
        if self.guidance_dim == 0 || self.vlm_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "guidance_dim, vlm_dim and mlp_ratio must be positive".into(),
            ));
        }
        if self.latent_channels < 2 || !self.latent_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "latent_channels must be even and >= 2, got {}",
                self.latent_channels
            )));
        }
        if !self.model_dim.is_multiple_of(2) {
            return Err(Error::Config("model_dim must be even".into()));
        }
        self.rope().map(|_| ())
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        let mut cfg = RopeConfig::for_head_dim(self.head_dim)?;
        cfg.base = self.rope_base;
        RopeConfig::new(cfg.head_dim, cfg.base, cfg.axis_split)
    }
}

/// Early-step gating of guidance refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedbackConfig {
    /// Steps with `t_index >= t_start` are gated on.
    pub t_start: usize,
    pub enabled: bool,
    /// Refresh on every n-th gated step (1 = every gated step).
    pub every: usize,
}

impl FeedbackConfig {
    pub fn new(t_start: usize, enabled: bool) -> Self {
        FeedbackConfig {
            t_start,
            enabled,
            every: 1,
        }
    }

    pub fn disabled() -> Self {
        FeedbackConfig::new(0, false)
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.t_start > steps {
            return Err(Error::Config(format!("t_start {} exceeds steps {steps}", self.t_start)));
        }
        if self.every == 0 {
            return Err(Error::Config("feedback throttle must be at least 1".into()));
        }
        Ok(())
    }
}
