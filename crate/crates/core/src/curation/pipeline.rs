use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::clients::{
    Captioner, Completer, Grounder, Remover, Segmenter, SpatialMask, StubAgent, StubCaptioner, StubCompleter,
    StubGrounder, StubRemover, StubSegmenter, StubStyler, Styler, VerifierAgent,
};
use super::types::{CandidateObject, DataSource, Quadruplet, VerificationRecord};
use super::verify::verify_quadruplet;
use crate::error::{Error, Result};
use crate::latent::{GridDims, LatentGrid, Role};
use crate::tensor_file::write_grid;

/// Geometric and temporal priors for removal candidates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateThresholds {
    pub max_area: f64,
    pub min_visibility: f64,
}

impl Default for CandidateThresholds {
    fn default() -> Self {
        CandidateThresholds {
            max_area: 0.35,
            min_visibility: 0.9,
        }
    }
}

impl CandidateThresholds {
    pub fn admits(&self, c: &CandidateObject) -> bool {
        c.bbox_area_ratio <= self.max_area && c.visibility_ratio >= self.min_visibility
    }
}

/// The grounder's top candidate, if it passes both priors.
pub fn propose_candidate(
    video: &LatentGrid,
    grounder: &dyn Grounder,
    thresholds: CandidateThresholds,
) -> Result<Option<CandidateObject>> {
    let candidates = grounder.propose(video).map_err(|e| tag("ground", e))?;
    Ok(candidates.into_iter().next().filter(|c| thresholds.admits(c)))
}

/// Every client the pipeline talks to.
pub struct CurationClients {
    pub grounder: Box<dyn Grounder>,
    pub segmenter: Box<dyn Segmenter>,
    pub remover: Box<dyn Remover>,
    pub completer: Box<dyn Completer>,
    pub styler: Box<dyn Styler>,
    pub captioner: Box<dyn Captioner>,
    pub agent_a: Box<dyn VerifierAgent>,
    pub agent_b: Box<dyn VerifierAgent>,
}

impl CurationClients {
    /// Stub clients throughout, with both agents passing everything.
    pub fn stub(seed: u64) -> Self {
        CurationClients {
            grounder: Box::new(StubGrounder {
                seed,
                area: 0.2,
                visibility: 0.95,
            }),
            segmenter: Box::new(StubSegmenter { seed }),
            remover: Box::new(StubRemover),
            completer: Box::new(StubCompleter),
            styler: Box::new(StubStyler { seed }),
            captioner: Box::new(StubCaptioner { seed }),
            agent_a: Box::new(StubAgent::passing(seed)),
            agent_b: Box::new(StubAgent::passing(seed.wrapping_add(1))),
        }
    }
}

/// Writes media files under a root directory and hands back paths relative
/// to it, so manifests do not depend on where the store lives.
#[derive(Debug, Clone)]
pub struct MediaStore {
    root: PathBuf,
}

impl MediaStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        MediaStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn put(&self, id: &str, name: &str, grid: &LatentGrid) -> Result<PathBuf> {
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(Error::Config(format!(
                "quadruplet id `{id}` is not usable as a directory name"
            )));
        }
        let rel = Path::new(id).join(format!("{name}.dsi"));
        let full = self.root.join(&rel);
        std::fs::create_dir_all(full.parent().expect("joined path has a parent"))?;
        write_grid(&full, grid)?;
        Ok(rel)
    }
}

fn tag(stage: &str, e: Error) -> Error {
    match e {
        Error::Client { stage: inner, message } if inner == stage => Error::Client { stage: inner, message },
        Error::Client { stage: inner, message } => Error::client(stage, format!("{inner}: {message}")),
        other => Error::client(stage, other.to_string()),
    }
}

fn item_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Template picked for an item; uniform over the list.
pub fn choose_template<'a>(templates: &[&'a str], seed: u64, id: &str) -> Result<&'a str> {
    if templates.is_empty() {
        return Err(Error::Config("style template list is empty".into()));
    }
    let mut rng = item_rng(seed, id);
    Ok(templates[rng.random_range(0..templates.len())])
}

/// Cut the object out of the first frame where it is visible: object voxels
/// keep their values, everything else is zero.
pub fn extract_reference(video: &LatentGrid, mask: &SpatialMask) -> Result<LatentGrid> {
    let d = video.dims();
    if mask.dims() != d {
        return Err(Error::Shape("mask does not match video".into()));
    }
    let f = (0..d.frames)
        .find(|&f| mask.frame_count(f) > 0)
        .ok_or_else(|| Error::client("extract", "object mask is empty in every frame"))?;
    let c = video.channels();
    let mut data = vec![0.0f32; d.height * d.width * c];
    for y in 0..d.height {
        for x in 0..d.width {
            if mask.get(f, y, x) {
                for ch in 0..c {
                    data[(y * d.width + x) * c + ch] = video.value(f, y, x, ch);
                }
            }
        }
    }
    LatentGrid::new(GridDims::new(1, d.height, d.width), c, Role::TargetRefImage, data)
}

struct Extracted {
    harmonized: LatentGrid,
    raw: LatentGrid,
    template: String,
}

fn reference_branch(
    video: &LatentGrid,
    mask: &SpatialMask,
    clients: &CurationClients,
    template: &str,
) -> Result<Extracted> {
    let gt = extract_reference(video, mask).map_err(|e| tag("extract", e))?;
    let harmonized = clients
        .completer
        .complete(&gt)
        .and_then(|g| g.with_role(Role::TargetRefImage))
        .map_err(|e| tag("complete", e))?;
    let raw = clients
        .styler
        .stylize(&harmonized, template)
        .and_then(|g| g.with_role(Role::RawRefImage))
        .map_err(|e| tag("stylize", e))?;
    Ok(Extracted {
        harmonized,
        raw,
        template: template.to_string(),
    })
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    id: &str,
    provenance: DataSource,
    source: &LatentGrid,
    target: &LatentGrid,
    ext: Extracted,
    description: &str,
    clients: &CurationClients,
    store: &MediaStore,
) -> Result<Quadruplet> {
    let captions = clients
        .captioner
        .caption(source, &ext.harmonized, description)
        .map_err(|e| tag("caption", e))?;
    if captions.p_insert.is_empty() {
        return Err(Error::client("caption", "empty insertion prompt"));
    }
    Ok(Quadruplet {
        id: id.to_string(),
        provenance,
        source_video: store.put(id, "source_video", source)?,
        target_video: store.put(id, "target_video", target)?,
        raw_ref: store.put(id, "raw_ref", &ext.raw)?,
        harmonized_ref: store.put(id, "harmonized_ref", &ext.harmonized)?,
        p_insert: captions.p_insert,
        p_desc: captions.p_desc,
        p_style: ext.template,
        verification: None,
    })
}

/// Synthesis path: the raw video becomes the target, its object-removed
/// version the source.
pub fn build_quadruplet(
    id: &str,
    raw_video: &LatentGrid,
    candidate: &CandidateObject,
    clients: &CurationClients,
    templates: &[&str],
    seed: u64,
    store: &MediaStore,
) -> Result<Quadruplet> {
    let target = raw_video.clone().with_role(Role::TargetVideoLatent)?;
    let mask = clients
        .segmenter
        .segment(&target, &candidate.description)
        .map_err(|e| tag("segment", e))?;
    let source = clients
        .remover
        .remove(&target, &mask)
        .and_then(|g| g.with_role(Role::SourceVideo))
        .map_err(|e| tag("remove", e))?;
    let template = choose_template(templates, seed, id)?;
    let ext = reference_branch(&target, &mask, clients, template)?;
    assemble(
        id,
        DataSource::SynthesizedFromT2V,
        &source,
        &target,
        ext,
        &candidate.description,
        clients,
        store,
    )
}

/// Adaptation path for editing datasets that already pair a clean video
/// with an edited one containing the object.
pub fn import_editing_sample(
    id: &str,
    clean_video: &LatentGrid,
    edited_video: &LatentGrid,
    clients: &CurationClients,
    templates: &[&str],
    seed: u64,
    store: &MediaStore,
) -> Result<Quadruplet> {
    if clean_video.dims() != edited_video.dims() || clean_video.channels() != edited_video.channels() {
        return Err(Error::Shape("editing pair differs in shape".into()));
    }
    let source = clean_video.clone().with_role(Role::SourceVideo)?;
    let target = edited_video.clone().with_role(Role::TargetVideoLatent)?;
    let candidate = clients
        .grounder
        .propose(&target)
        .map_err(|e| tag("ground", e))?
        .into_iter()
        .next()
        .ok_or_else(|| Error::client("ground", "no object found in edited video"))?;
    let mask = clients
        .segmenter
        .segment(&target, &candidate.description)
        .map_err(|e| tag("segment", e))?;
    let template = choose_template(templates, seed, id)?;
    let ext = reference_branch(&target, &mask, clients, template)?;
    assemble(
        id,
        DataSource::AdaptedEditingDataset,
        &source,
        &target,
        ext,
        &candidate.description,
        clients,
        store,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    NoCandidate,
    Verification(VerificationRecord),
}

#[derive(Debug, Clone, Default)]
pub struct CurationReport {
    /// Accepted quadruplets in input order.
    pub accepted: Vec<Quadruplet>,
    pub rejected: Vec<(String, Rejection)>,
}

/// Run the synthesis path and verification over every input. Items are
/// processed in parallel; results keep input order. The first client error,
/// in input order, aborts the run.
pub fn curate(
    inputs: &[(String, LatentGrid)],
    clients: &CurationClients,
    templates: &[&str],
    thresholds: CandidateThresholds,
    seed: u64,
    store: &MediaStore,
) -> Result<CurationReport> {
    let outcomes: Vec<Result<std::result::Result<Quadruplet, Rejection>>> = inputs
        .par_iter()
        .map(|(id, video)| {
            let Some(candidate) = propose_candidate(video, clients.grounder.as_ref(), thresholds)? else {
                return Ok(Err(Rejection::NoCandidate));
            };
            let mut q = build_quadruplet(id, video, &candidate, clients, templates, seed, store)?;
            let record = verify_quadruplet(&mut q, clients.agent_a.as_ref(), clients.agent_b.as_ref())?;
            Ok(if record.accepted() {
                Ok(q)
            } else {
                Err(Rejection::Verification(record))
            })
        })
        .collect();
    let mut report = CurationReport::default();
    for ((id, _), outcome) in inputs.iter().zip(outcomes) {
        match outcome? {
            Ok(q) => report.accepted.push(q),
            Err(r) => report.rejected.push((id.clone(), r)),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::types::AnomalyCategory;
    use crate::tensor_file::read_grid;

    fn raw(seed: u32) -> LatentGrid {
        let d = GridDims::new(3, 4, 6);
        let data = (0..d.tokens() * 4)
            .map(|i| ((i as u32 * 7 + seed) as f32 * 0.37).sin())
            .collect();
        LatentGrid::new(d, 4, Role::SourceVideo, data).unwrap()
    }

    const TEMPLATES: [&str; 3] = ["oil painting", "pixel art", "clay"];

    fn grounder(area: f64, vis: f64) -> StubGrounder {
        StubGrounder {
            seed: 0,
            area,
            visibility: vis,
        }
    }

    #[test]
    fn candidate_priors() {
        let t = CandidateThresholds::default();
        let v = raw(0);
        assert!(propose_candidate(&v, &grounder(0.2, 0.95), t).unwrap().is_some());
        assert!(propose_candidate(&v, &grounder(0.5, 0.95), t).unwrap().is_none());
        assert!(propose_candidate(&v, &grounder(0.2, 0.5), t).unwrap().is_none());
    }

    #[test]
    fn stub_quadruplet_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let store = MediaStore::new(dir.path());
        let clients = CurationClients::stub(3);
        let v = raw(1);
        let cand = CandidateObject::new("lamp", 0.2, 0.95).unwrap();
        let q = build_quadruplet("q0", &v, &cand, &clients, &TEMPLATES, 9, &store).unwrap();
        assert_eq!(q.provenance, DataSource::SynthesizedFromT2V);
        assert_eq!(q.p_style, choose_template(&TEMPLATES, 9, "q0").unwrap());
        let m = q.load_media_in(dir.path()).unwrap();

        let styler = StubStyler { seed: 3 };
        let styled = styler.stylize(&m.harmonized_ref, &q.p_style).unwrap();
        assert_eq!(styled.data(), m.raw_ref.data());

        let mask = StubSegmenter { seed: 3 }.segment(&m.target_video, "lamp").unwrap();
        let d = v.dims();
        for f in 0..d.frames {
            for y in 0..d.height {
                for x in 0..d.width {
                    if !mask.get(f, y, x) {
                        for c in 0..4 {
                            assert_eq!(m.source_video.value(f, y, x, c), m.target_video.value(f, y, x, c));
                        }
                    }
                }
            }
        }
        assert_eq!(read_grid(dir.path().join(&q.target_video)).unwrap().data(), v.data());
    }

    #[test]
    fn pipeline_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let clients = CurationClients::stub(5);
        let cand = CandidateObject::new("vase", 0.1, 1.0).unwrap();
        let qa = build_quadruplet("x", &raw(2), &cand, &clients, &TEMPLATES, 1, &MediaStore::new(a.path())).unwrap();
        let qb = build_quadruplet("x", &raw(2), &cand, &clients, &TEMPLATES, 1, &MediaStore::new(b.path())).unwrap();
        assert_eq!(qa, qb);
        for rel in [&qa.source_video, &qa.raw_ref] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn importer_marks_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let clients = CurationClients::stub(0);
        let q = import_editing_sample(
            "e1",
            &raw(4),
            &raw(5),
            &clients,
            &TEMPLATES,
            0,
            &MediaStore::new(dir.path()),
        )
        .unwrap();
        assert_eq!(q.provenance, DataSource::AdaptedEditingDataset);
        let m = q.load_media_in(dir.path()).unwrap();
        assert_eq!(m.source_video.data(), raw(4).data());
    }

    #[test]
    fn curate_counts() {
        let dir = tempfile::tempdir().unwrap();
        let inputs: Vec<_> = (0..5).map(|i| (format!("v{i}"), raw(i))).collect();
        let mut clients = CurationClients::stub(2);
        let store = MediaStore::new(dir.path());
        let t = CandidateThresholds::default();
        let report = curate(&inputs, &clients, &TEMPLATES, t, 0, &store).unwrap();
        assert_eq!(report.accepted.len(), 5);
        assert_eq!(report.accepted[3].id, "v3");

        clients.agent_b = Box::new(StubAgent::failing(0, vec![AnomalyCategory::TemporalArtifacts]));
        let report = curate(&inputs, &clients, &TEMPLATES, t, 0, &store).unwrap();
        assert_eq!(report.accepted.len(), 0);
        assert_eq!(report.rejected.len(), 5);
    }

    #[test]
    fn client_failure_is_stage_tagged() {
        struct Broken;
        impl Remover for Broken {
            fn remove(&self, _: &LatentGrid, _: &SpatialMask) -> Result<LatentGrid> {
                Err(Error::BackendUnavailable("offline".into()))
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let mut clients = CurationClients::stub(0);
        clients.remover = Box::new(Broken);
        let cand = CandidateObject::new("dog", 0.2, 1.0).unwrap();
        let err = build_quadruplet(
            "z",
            &raw(0),
            &cand,
            &clients,
            &TEMPLATES,
            0,
            &MediaStore::new(dir.path()),
        )
        .unwrap_err();
        assert!(
            matches!(&err, Error::Client { stage, .. } if stage == "remove"),
            "{err}"
        );
        assert!(err.is_backend());
    }
}
