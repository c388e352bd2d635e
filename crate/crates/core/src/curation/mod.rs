//! Quadruplet curation: candidate selection, synthesis over pluggable
//! clients, two-agent verification and the manifest format.

pub mod clients;
pub mod manifest;
pub mod pipeline;
pub mod types;
pub mod verify;

pub use clients::{
    Captioner, Captions, Completer, Grounder, Remover, Segmenter, SpatialMask, StubAgent, StubCaptioner, StubCompleter,
    StubGrounder, StubRemover, StubSegmenter, StubStyler, Styler, VerifierAgent,
};
pub use manifest::{decode_record, encode_record, load_manifest, parse_manifest, persist_manifest, ManifestWriter};
pub use pipeline::{
    build_quadruplet, choose_template, curate, extract_reference, import_editing_sample, propose_candidate,
    CandidateThresholds, CurationClients, CurationReport, MediaStore, Rejection,
};
pub use types::{AnomalyCategory, CandidateObject, DataSource, Quadruplet, QuadrupletMedia, VerificationRecord};
pub use verify::verify_quadruplet;

const TEMPLATE_FILE: &str = include_str!("../../data/style_templates.txt");

/// The shipped style templates, in file order.
pub fn style_templates() -> Vec<&'static str> {
    TEMPLATE_FILE
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}
