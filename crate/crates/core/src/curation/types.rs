use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::tensor_file::read_grid;

/// Where a quadruplet came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataSource {
    AdaptedEditingDataset,
    SynthesizedFromT2V,
}

impl DataSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSource::AdaptedEditingDataset => "AdaptedEditingDataset",
            DataSource::SynthesizedFromT2V => "SynthesizedFromT2V",
        }
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "AdaptedEditingDataset" => Ok(DataSource::AdaptedEditingDataset),
            "SynthesizedFromT2V" => Ok(DataSource::SynthesizedFromT2V),
            other => Err(format!("unknown provenance `{other}`")),
        }
    }
}

/// Failure modes screened by the verifier agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Deserialize)]
pub enum AnomalyCategory {
    IdentityDrift,
    IncompleteErasure,
    TemporalArtifacts,
    BackgroundPerturbation,
}

impl AnomalyCategory {
    pub const ALL: [AnomalyCategory; 4] = [
        AnomalyCategory::IdentityDrift,
        AnomalyCategory::IncompleteErasure,
        AnomalyCategory::TemporalArtifacts,
        AnomalyCategory::BackgroundPerturbation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn question(self) -> &'static str {
        match self {
            AnomalyCategory::IdentityDrift => {
                "Does the reference subject keep its semantic identity and structure after completion and style transfer?"
            }
            AnomalyCategory::IncompleteErasure => {
                "Is the removed object fully erased from the background video, with no ghosting or remnants?"
            }
            AnomalyCategory::TemporalArtifacts => {
                "Are the inpainted regions free of blur, flicker and other temporal anomalies?"
            }
            AnomalyCategory::BackgroundPerturbation => "Are the non-target background areas left unmodified?",
        }
    }
}

impl fmt::Display for AnomalyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Pass/fail per agent and category; accepted only when all eight pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationRecord {
    agent_a: [bool; 4],
    agent_b: [bool; 4],
}

impl VerificationRecord {
    pub fn new(agent_a: [bool; 4], agent_b: [bool; 4]) -> Self {
        VerificationRecord { agent_a, agent_b }
    }

    pub fn agent_a(&self) -> [bool; 4] {
        self.agent_a
    }

    pub fn agent_b(&self) -> [bool; 4] {
        self.agent_b
    }

    pub fn accepted(&self) -> bool {
        self.agent_a.iter().chain(&self.agent_b).all(|&p| p)
    }

    /// Entries that failed, as (agent index, category).
    pub fn failures(&self) -> Vec<(usize, AnomalyCategory)> {
        let mut out = Vec::new();
        for (agent, passes) in [self.agent_a, self.agent_b].iter().enumerate() {
            for c in AnomalyCategory::ALL {
                if !passes[c.index()] {
                    out.push((agent, c));
                }
            }
        }
        out
    }
}

/// Candidate object proposed for removal.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateObject {
    pub description: String,
    /// Bounding-box area as a fraction of the frame, in (0, 1].
    pub bbox_area_ratio: f64,
    /// Fraction of frames in which the object is visible.
    pub visibility_ratio: f64,
}

impl CandidateObject {
    pub fn new(description: impl Into<String>, bbox_area_ratio: f64, visibility_ratio: f64) -> Result<Self> {
        if !(bbox_area_ratio > 0.0 && bbox_area_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "bbox area ratio {bbox_area_ratio} outside (0, 1]"
            )));
        }
        if !(0.0..=1.0).contains(&visibility_ratio) {
            return Err(Error::Config(format!(
                "visibility ratio {visibility_ratio} outside [0, 1]"
            )));
        }
        Ok(CandidateObject {
            description: description.into(),
            bbox_area_ratio,
            visibility_ratio,
        })
    }
}

/// Aligned training sample with its prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruplet {
    pub id: String,
    pub provenance: DataSource,
    pub source_video: PathBuf,
    pub target_video: PathBuf,
    pub raw_ref: PathBuf,
    pub harmonized_ref: PathBuf,
    pub p_insert: String,
    pub p_desc: String,
    pub p_style: String,
    pub verification: Option<VerificationRecord>,
}

/// Decoded media of a quadruplet.
#[derive(Debug, Clone)]
pub struct QuadrupletMedia {
    pub source_video: LatentGrid,
    pub target_video: LatentGrid,
    pub raw_ref: LatentGrid,
    pub harmonized_ref: LatentGrid,
}

impl Quadruplet {
    pub fn is_accepted(&self) -> bool {
        self.verification.is_some_and(|v| v.accepted())
    }

    /// Read all four media files; fails if any is missing or malformed.
    pub fn load_media(&self) -> Result<QuadrupletMedia> {
        self.load_media_in(Path::new("."))
    }

    /// As [`Quadruplet::load_media`], resolving relative paths against `base`.
    pub fn load_media_in(&self, base: &Path) -> Result<QuadrupletMedia> {
        if self.p_insert.is_empty() {
            return Err(Error::Config(format!(
                "quadruplet {} has an empty insertion prompt",
                self.id
            )));
        }
        Ok(QuadrupletMedia {
            source_video: read_grid(base.join(&self.source_video))?,
            target_video: read_grid(base.join(&self.target_video))?,
            raw_ref: read_grid(base.join(&self.raw_ref))?,
            harmonized_ref: read_grid(base.join(&self.harmonized_ref))?,
        })
    }
}
