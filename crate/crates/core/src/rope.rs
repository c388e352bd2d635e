//! Dual-World-View rotary position embedding.
//!
//! Targets sit at the origin of the (frame, width, height) coordinate space.
//! Strong conditions are shifted along the width axis and weak conditions
//! along the frame axis, so every segment of a stream occupies its own range.

use crate::error::{Error, Result};
use crate::latent::{Role, SegmentLayout, Stream};
use crate::tensor::Mat;

/// Integer coordinate shift applied to every token of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RoleOffset {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
}

impl RoleOffset {
    pub const fn new(frame: usize, width: usize, height: usize) -> Self {
        RoleOffset { frame, width, height }
    }
}

/// How condition segments are placed in coordinate space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RopeScheme {
    /// Role-specific width/frame offsets.
    #[default]
    DualWorldView,
    /// Baseline: conditions appended as extra frames after the target,
    /// sharing its spatial coordinates.
    FrameAppend,
}

/// Offset for `role` in `stream`, given the target latent width and frame count.
pub fn role_offset(role: Role, stream: Stream, target_width: usize, video_frames: usize) -> Result<RoleOffset> {
    let w = target_width;
    let n = video_frames;
    match (stream, role) {
        (Stream::VideoStream, Role::TargetVideoLatent) => Ok(RoleOffset::new(0, 0, 0)),
        (Stream::VideoStream, Role::SourceVideo) => Ok(RoleOffset::new(0, w, 0)),
        (Stream::VideoStream, Role::TargetRefImage) => Ok(RoleOffset::new(n, 2 * w, 0)),
        (Stream::ImageStream, Role::TargetImageLatent) => Ok(RoleOffset::new(0, 0, 0)),
        (Stream::ImageStream, Role::SourceFirstFrame) => Ok(RoleOffset::new(0, w, 0)),
        (Stream::ImageStream, Role::RawRefImage) => Ok(RoleOffset::new(1, 0, 0)),
        _ => Err(Error::RoleStreamMismatch { role, stream }),
    }
}

/// Position of a token on the (frame, width, height) axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Coord {
    pub f: i64,
    pub w: i64,
    pub h: i64,
}

impl Coord {
    pub const fn new(f: i64, w: i64, h: i64) -> Self {
        Coord { f, w, h }
    }
}

impl std::ops::Sub for Coord {
    type Output = Coord;

    fn sub(self, other: Coord) -> Coord {
        Coord::new(self.f - other.f, self.w - other.w, self.h - other.h)
    }
}

/// Coordinates for every token of the layout, in token order.
pub fn assign_coordinates(layout: &SegmentLayout) -> Vec<Coord> {
    let mut coords = Vec::with_capacity(layout.total_tokens());
    for seg in layout.segments() {
        for k in 0..seg.dims.tokens() {
            let idx = seg.dims.index_of(k);
            coords.push(Coord::new(
                (idx.f + seg.offset.frame) as i64,
                (idx.x + seg.offset.width) as i64,
                (idx.y + seg.offset.height) as i64,
            ));
        }
    }
    coords
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    /// Sub-dimensions for the frame, height and width axes, in that order.
    pub axis_split: (usize, usize, usize),
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64, axis_split: (usize, usize, usize)) -> Result<Self> {
        let (f, h, w) = axis_split;
        if [f, h, w].iter().any(|&d| d < 2 || d % 2 != 0) {
            return Err(Error::Shape(format!(
                "axis split {axis_split:?} must be even and >= 2 per axis"
            )));
        }
        if f + h + w != head_dim {
            return Err(Error::Shape(format!(
                "axis split {axis_split:?} does not sum to head_dim {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Shape(format!("rope base must be positive, got {base}")));
        }
        Ok(RopeConfig {
            head_dim,
            base,
            axis_split,
        })
    }

    /// Half of the head for frames, a quarter each for height and width.
    /// 64 gives (32, 16, 16).
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if !head_dim.is_multiple_of(8) || head_dim == 0 {
            return Err(Error::Shape(format!(
                "head_dim {head_dim} must be a positive multiple of 8"
            )));
        }
        RopeConfig::new(head_dim, 10_000.0, (head_dim / 2, head_dim / 4, head_dim / 4))
    }

    /// Per-pair (axis, frequency) in head-dim order.
    fn pair_frequencies(&self) -> Vec<(Axis, f64)> {
        let (df, dh, dw) = self.axis_split;
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (axis, d) in [(Axis::Frame, df), (Axis::Height, dh), (Axis::Width, dw)] {
            for i in 0..d / 2 {
                out.push((axis, self.base.powf(-2.0 * i as f64 / d as f64)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Axis {
    Frame,
    Height,
    Width,
}

/// Cosine and sine of every rotation angle, one row per token and one
/// column per rotated pair of a single head.
#[derive(Debug, Clone)]
pub struct RotaryTables {
    pub cos: Mat,
    pub sin: Mat,
}

impl RotaryTables {
    pub fn new(coords: &[Coord], config: &RopeConfig) -> Self {
        let freqs = config.pair_frequencies();
        let pairs = freqs.len();
        let mut cos = Mat::zeros(coords.len(), pairs);
        let mut sin = Mat::zeros(coords.len(), pairs);
        for (t, c) in coords.iter().enumerate() {
            for (p, &(axis, theta)) in freqs.iter().enumerate() {
                let pos = match axis {
                    Axis::Frame => c.f,
                    Axis::Height => c.h,
                    Axis::Width => c.w,
                } as f64;
                let angle = pos * theta;
                cos.set(t, p, angle.cos());
                sin.set(t, p, angle.sin());
            }
        }
        RotaryTables { cos, sin }
    }

    /// Rotate each head block of `x` (columns = heads * head_dim).
    /// `inverse` rotates by the negated angles.
    pub fn rotate(&self, x: &Mat, inverse: bool) -> Result<Mat> {
        let pairs = self.cos.cols();
        let head_dim = 2 * pairs;
        if x.rows() != self.cos.rows() || head_dim == 0 || !x.cols().is_multiple_of(head_dim) {
            return Err(Error::Shape(format!(
                "rope tables for {} tokens x {} dims cannot rotate {:?}",
                self.cos.rows(),
                head_dim,
                x.shape()
            )));
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut out = x.clone();
        for t in 0..x.rows() {
            let (cos, sin) = (self.cos.row(t), self.sin.row(t));
            for block in out.row_mut(t).chunks_exact_mut(head_dim) {
                for p in 0..pairs {
                    let (a, b) = (block[2 * p], block[2 * p + 1]);
                    let (c, s) = (cos[p], sign * sin[p]);
                    block[2 * p] = a * c - b * s;
                    block[2 * p + 1] = a * s + b * c;
                }
            }
        }
        Ok(out)
    }
}

/// Rotate single-head tokens (columns = head_dim) by their coordinates.
pub fn apply_rope(tokens: &Mat, coords: &[Coord], config: &RopeConfig) -> Result<Mat> {
    if tokens.cols() != config.head_dim {
        return Err(Error::Shape(format!(
            "token dim {} does not match head_dim {}",
            tokens.cols(),
            config.head_dim
        )));
    }
    if tokens.rows() != coords.len() {
        return Err(Error::Shape(format!(
            "{} tokens but {} coordinates",
            tokens.rows(),
            coords.len()
        )));
    }
    RotaryTables::new(coords, config).rotate(tokens, false)
}
