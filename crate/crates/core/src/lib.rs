//! Mechanisms for reference-guided video object insertion with a dual-stream
//! diffusion transformer: multi-view rotary positions, asymmetric
//! semi-attention with image-to-video key/value injection, decoupled VLM and
//! text guidance, closed-loop feedback sampling, and the quadruplet curation
//! pipeline.

pub mod attention;
pub mod autodiff;
pub mod clients;
pub mod curation;
pub mod engine;
pub mod error;
pub mod guidance;
pub mod latent;
pub mod rope;
pub mod selftest;
pub mod tensor;
pub mod tensor_file;

pub use error::{Error, Result};
pub use latent::{GridDims, LatentGrid, Role, SegmentLayout, Stream};
pub use tensor::Mat;
