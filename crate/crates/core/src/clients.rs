//! Client configuration: which backend serves each external-model role.
//!
//! ```toml
//! [vlm]
//! backend = "stub"
//! seed = 7
//!
//! [agent_b]
//! backend = "stub"
//! seed = 2
//! params = { fail = ["TemporalArtifacts"] }
//! ```
//!
//! Roles left out fall back to a stub seeded with the run seed. Only the
//! `stub` backend ships with this crate; anything else is reported as
//! unavailable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::curation::{
    AnomalyCategory, CurationClients, StubAgent, StubCaptioner, StubCompleter, StubGrounder, StubRemover,
    StubSegmenter, StubStyler,
};
use crate::error::{Error, Result};
use crate::guidance::{StubMotionEncoder, StubVlm};

pub const ROLES: [&str; 10] = [
    "vlm",
    "motion",
    "grounder",
    "segmenter",
    "remover",
    "completer",
    "styler",
    "captioner",
    "agent_a",
    "agent_b",
];

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub backend: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientsConfig {
    pub roles: BTreeMap<String, ClientSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StubVlmParams {
    prompt_tokens: Option<usize>,
    content_tokens: Option<usize>,
    fail_after: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StubGrounderParams {
    area: Option<f64>,
    visibility: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StubAgentParams {
    #[serde(default)]
    fail: Vec<AnomalyCategory>,
    #[serde(default)]
    reject_rate: f64,
    #[serde(default)]
    unavailable: bool,
}

/// A resolved stub: its seed and free-form parameters.
struct Stub<'a> {
    seed: u64,
    params: Option<&'a toml::Table>,
}

impl Stub<'_> {
    fn params<T: for<'de> Deserialize<'de> + Default>(&self, role: &str) -> Result<T> {
        match self.params {
            None => Ok(T::default()),
            Some(t) => t
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("[{role}.params]: {e}"))),
        }
    }

    fn no_params(&self, role: &str) -> Result<()> {
        match self.params {
            Some(t) if !t.is_empty() => Err(Error::Config(format!("[{role}] stub takes no params"))),
            _ => Ok(()),
        }
    }
}

impl ClientsConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let roles: BTreeMap<String, ClientSpec> =
            toml::from_str(text).map_err(|e| Error::Config(format!("clients config: {e}")))?;
        for name in roles.keys() {
            if !ROLES.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown client role `{name}`")));
            }
        }
        Ok(ClientsConfig { roles })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every role served by a stub, with seeds derived from `seed`.
    pub fn all_stub(seed: u64) -> Self {
        let roles = ROLES
            .iter()
            .enumerate()
            .map(|(i, r)| {
                (
                    r.to_string(),
                    ClientSpec {
                        backend: "stub".into(),
                        seed: Some(seed.wrapping_add(i as u64)),
                        params: toml::Table::new(),
                    },
                )
            })
            .collect();
        ClientsConfig { roles }
    }

    fn stub(&self, role: &str, fallback_seed: u64) -> Result<Stub<'_>> {
        match self.roles.get(role) {
            None => Ok(Stub {
                seed: fallback_seed,
                params: None,
            }),
            Some(spec) if spec.backend == "stub" => {
                let seed = spec
                    .seed
                    .ok_or_else(|| Error::Config(format!("[{role}] stub backend needs a seed")))?;
                Ok(Stub {
                    seed,
                    params: Some(&spec.params),
                })
            }
            Some(spec) => Err(Error::BackendUnavailable(format!(
                "{role}: backend `{}` is not available in this build",
                spec.backend
            ))),
        }
    }

    pub fn vlm(&self, dim: usize, fallback_seed: u64) -> Result<StubVlm> {
        let s = self.stub("vlm", fallback_seed)?;
        let p: StubVlmParams = s.params("vlm")?;
        let mut vlm = StubVlm::new(s.seed, dim);
        if p.prompt_tokens.is_some() || p.content_tokens.is_some() {
            vlm = vlm.with_tokens(p.prompt_tokens.unwrap_or(3), p.content_tokens.unwrap_or(8));
        }
        if let Some(n) = p.fail_after {
            vlm = vlm.failing_after(n);
        }
        Ok(vlm)
    }

    pub fn motion(&self, dim: usize, fallback_seed: u64) -> Result<StubMotionEncoder> {
        let s = self.stub("motion", fallback_seed)?;
        s.no_params("motion")?;
        Ok(StubMotionEncoder { seed: s.seed, dim })
    }

    fn agent(&self, role: &str, fallback_seed: u64) -> Result<StubAgent> {
        let s = self.stub(role, fallback_seed)?;
        let p: StubAgentParams = s.params(role)?;
        if !(0.0..=1.0).contains(&p.reject_rate) {
            return Err(Error::Config(format!("[{role}] reject_rate outside [0, 1]")));
        }
        Ok(StubAgent {
            seed: s.seed,
            fail: p.fail,
            reject_rate: p.reject_rate,
            broken: p.unavailable,
        })
    }

    pub fn curation(&self, fallback_seed: u64) -> Result<CurationClients> {
        let g = self.stub("grounder", fallback_seed)?;
        let gp: StubGrounderParams = g.params("grounder")?;
        let area = gp.area.unwrap_or(0.2);
        let visibility = gp.visibility.unwrap_or(0.95);
        crate::curation::CandidateObject::new("probe", area, visibility)?;
        let simple = |role: &str| -> Result<u64> {
            let s = self.stub(role, fallback_seed)?;
            s.no_params(role)?;
            Ok(s.seed)
        };
        Ok(CurationClients {
            grounder: Box::new(StubGrounder {
                seed: g.seed,
                area,
                visibility,
            }),
            segmenter: Box::new(StubSegmenter {
                seed: simple("segmenter")?,
            }),
            remover: {
                simple("remover")?;
                Box::new(StubRemover)
            },
            completer: {
                simple("completer")?;
                Box::new(StubCompleter)
            },
            styler: Box::new(StubStyler {
                seed: simple("styler")?,
            }),
            captioner: Box::new(StubCaptioner {
                seed: simple("captioner")?,
            }),
            agent_a: Box::new(self.agent("agent_a", fallback_seed)?),
            agent_b: Box::new(self.agent("agent_b", fallback_seed.wrapping_add(1))?),
        })
    }
}
