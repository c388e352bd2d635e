//! External-model interfaces used by the curation pipeline, with
//! deterministic stand-ins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::types::{AnomalyCategory, CandidateObject, Quadruplet};
use crate::error::{Error, Result};
use crate::guidance::image_digest;
use crate::latent::{GridDims, LatentGrid};

/// Per-voxel object mask over a video's (frame, row, column) grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialMask {
    dims: GridDims,
    bits: Vec<bool>,
}

impl SpatialMask {
    pub fn new(dims: GridDims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.tokens() {
            return Err(Error::Shape(format!("{} mask bits for grid {dims:?}", bits.len())));
        }
        Ok(SpatialMask { dims, bits })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.bits[(f * self.dims.height + y) * self.dims.width + x]
    }

    pub fn frame_count(&self, f: usize) -> usize {
        let plane = self.dims.height * self.dims.width;
        self.bits[f * plane..(f + 1) * plane].iter().filter(|&&b| b).count()
    }
}

/// Object proposal and description (a general-purpose VLM).
pub trait Grounder: Send + Sync {
    /// Candidates ranked best first.
    fn propose(&self, video: &LatentGrid) -> Result<Vec<CandidateObject>>;

    fn describe(&self, image: &LatentGrid) -> Result<String>;
}

/// Text-prompted video segmentation.
pub trait Segmenter: Send + Sync {
    fn segment(&self, video: &LatentGrid, description: &str) -> Result<SpatialMask>;
}

/// Video object removal and inpainting.
pub trait Remover: Send + Sync {
    fn remove(&self, video: &LatentGrid, mask: &SpatialMask) -> Result<LatentGrid>;
}

/// Reconstruction of occluded or truncated parts of an extracted object.
pub trait Completer: Send + Sync {
    fn complete(&self, image: &LatentGrid) -> Result<LatentGrid>;
}

/// Template-driven restyling of an object image.
pub trait Styler: Send + Sync {
    fn stylize(&self, image: &LatentGrid, template: &str) -> Result<LatentGrid>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Captions {
    pub p_insert: String,
    pub p_desc: String,
}

/// Spatially aware insertion prompt and scene description.
pub trait Captioner: Send + Sync {
    fn caption(&self, source_video: &LatentGrid, reference: &LatentGrid, description: &str) -> Result<Captions>;
}

/// One verifier agent, asked about one anomaly category at a time.
pub trait VerifierAgent: Send + Sync {
    fn check(&self, quadruplet: &Quadruplet, category: AnomalyCategory) -> Result<bool>;
}

fn hash_rng(seed: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Proposes one object per video with fixed ratios.
#[derive(Debug, Clone)]
pub struct StubGrounder {
    pub seed: u64,
    pub area: f64,
    pub visibility: f64,
}

impl Grounder for StubGrounder {
    fn propose(&self, video: &LatentGrid) -> Result<Vec<CandidateObject>> {
        let tag = &hex::encode(image_digest(video))[..8];
        Ok(vec![CandidateObject::new(
            format!("object-{tag}"),
            self.area,
            self.visibility,
        )?])
    }

    fn describe(&self, image: &LatentGrid) -> Result<String> {
        let mut rng = hash_rng(self.seed, &[b"describe", &image_digest(image)]);
        const NOUNS: [&str; 6] = ["teapot", "bicycle", "armchair", "lamp", "dog", "vase"];
        Ok(NOUNS[rng.random_range(0..NOUNS.len())].to_string())
    }
}

/// A box of half the frame's height and width, placed by hash, constant in time.
#[derive(Debug, Clone)]
pub struct StubSegmenter {
    pub seed: u64,
}

impl Segmenter for StubSegmenter {
    fn segment(&self, video: &LatentGrid, description: &str) -> Result<SpatialMask> {
        let d = video.dims();
        let bh = d.height.div_ceil(2);
        let bw = d.width.div_ceil(2);
        let mut rng = hash_rng(self.seed, &[description.as_bytes(), &image_digest(video)]);
        let y0 = rng.random_range(0..=d.height - bh);
        let x0 = rng.random_range(0..=d.width - bw);
        let mut bits = vec![false; d.tokens()];
        for f in 0..d.frames {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    bits[(f * d.height + y) * d.width + x] = true;
                }
            }
        }
        SpatialMask::new(d, bits)
    }
}

/// Fills masked voxels with the per-frame, per-channel mean of unmasked ones
/// and copies everything else verbatim.
#[derive(Debug, Clone, Default)]
pub struct StubRemover;

impl Remover for StubRemover {
    fn remove(&self, video: &LatentGrid, mask: &SpatialMask) -> Result<LatentGrid> {
        let d = video.dims();
        if mask.dims() != d {
            return Err(Error::client("remover", "mask does not match video"));
        }
        let c = video.channels();
        let mut data = video.data().to_vec();
        for f in 0..d.frames {
            let mut sum = vec![0.0f64; c];
            let mut n = 0usize;
            for y in 0..d.height {
                for x in 0..d.width {
                    if !mask.get(f, y, x) {
                        n += 1;
                        for (ch, s) in sum.iter_mut().enumerate() {
                            *s += f64::from(video.value(f, y, x, ch));
                        }
                    }
                }
            }
            let fill: Vec<f32> = sum
                .iter()
                .map(|s| if n == 0 { 0.0 } else { (s / n as f64) as f32 })
                .collect();
            for y in 0..d.height {
                for x in 0..d.width {
                    if mask.get(f, y, x) {
                        let at = ((f * d.height + y) * d.width + x) * c;
                        data[at..at + c].copy_from_slice(&fill);
                    }
                }
            }
        }
        LatentGrid::new(d, c, video.role(), data)
    }
}

/// Returns the image unchanged.
#[derive(Debug, Clone, Default)]
pub struct StubCompleter;

impl Completer for StubCompleter {
    fn complete(&self, image: &LatentGrid) -> Result<LatentGrid> {
        Ok(image.clone())
    }
}

/// Per-channel affine recolouring keyed by the template text.
#[derive(Debug, Clone)]
pub struct StubStyler {
    pub seed: u64,
}

impl StubStyler {
    /// (scale, shift) per channel for a template.
    pub fn coefficients(&self, template: &str, channels: usize) -> Vec<(f32, f32)> {
        let mut rng = hash_rng(self.seed, &[b"style", template.as_bytes()]);
        (0..channels)
            .map(|_| (rng.random_range(0.5f32..1.5), rng.random_range(-0.5f32..0.5)))
            .collect()
    }
}

impl Styler for StubStyler {
    fn stylize(&self, image: &LatentGrid, template: &str) -> Result<LatentGrid> {
        let c = image.channels();
        let coeffs = self.coefficients(template, c);
        let data = image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (a, b) = coeffs[i % c];
                a * v + b
            })
            .collect();
        LatentGrid::new(image.dims(), c, image.role(), data)
    }
}

#[derive(Debug, Clone)]
pub struct StubCaptioner {
    pub seed: u64,
}

impl Captioner for StubCaptioner {
    fn caption(&self, source_video: &LatentGrid, reference: &LatentGrid, description: &str) -> Result<Captions> {
        let mut rng = hash_rng(self.seed, &[&image_digest(source_video), &image_digest(reference)]);
        const PLACES: [&str; 5] = [
            "on the left",
            "on the right",
            "in the foreground",
            "near the centre",
            "behind the table",
        ];
        let place = PLACES[rng.random_range(0..PLACES.len())];
        let d = source_video.dims();
        Ok(Captions {
            p_insert: format!("Insert the {description} {place} of the scene, scaled to fit the surroundings."),
            p_desc: format!(
                "A steady {}-frame shot of an indoor scene with soft daylight and slow camera motion.",
                d.frames
            ),
        })
    }
}

/// Verifier that fails a fixed set of categories, plus an optional
/// hash-driven rejection rate.
#[derive(Debug, Clone)]
pub struct StubAgent {
    pub seed: u64,
    pub fail: Vec<AnomalyCategory>,
    pub reject_rate: f64,
    pub broken: bool,
}

impl StubAgent {
    pub fn passing(seed: u64) -> Self {
        StubAgent {
            seed,
            fail: Vec::new(),
            reject_rate: 0.0,
            broken: false,
        }
    }

    pub fn failing(seed: u64, fail: Vec<AnomalyCategory>) -> Self {
        StubAgent {
            fail,
            ..StubAgent::passing(seed)
        }
    }
}

impl VerifierAgent for StubAgent {
    fn check(&self, q: &Quadruplet, category: AnomalyCategory) -> Result<bool> {
        if self.broken {
            return Err(Error::client("verifier", "stub agent configured as unavailable"));
        }
        if self.fail.contains(&category) {
            return Ok(false);
        }
        if self.reject_rate > 0.0 {
            let mut rng = hash_rng(self.seed, &[q.id.as_bytes(), category.question().as_bytes()]);
            return Ok(rng.random::<f64>() >= self.reject_rate);
        }
        Ok(true)
    }
}
