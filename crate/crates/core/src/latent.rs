//! Latent grids, patchification and per-stream segment layouts.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{self, RoleOffset, RopeScheme};
use crate::tensor::Mat;

/// Semantic role of a latent grid. The discriminant is the on-disk role code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    SourceVideo = 0,
    TargetVideoLatent = 1,
    TargetRefImage = 2,
    RawRefImage = 3,
    SourceFirstFrame = 4,
    TargetImageLatent = 5,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::SourceVideo,
        Role::TargetVideoLatent,
        Role::TargetRefImage,
        Role::RawRefImage,
        Role::SourceFirstFrame,
        Role::TargetImageLatent,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Role> {
        Role::ALL.get(code as usize).copied()
    }

    pub fn is_image(self) -> bool {
        !matches!(self, Role::SourceVideo | Role::TargetVideoLatent)
    }

    pub fn is_target(self) -> bool {
        matches!(self, Role::TargetVideoLatent | Role::TargetImageLatent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    VideoStream,
    ImageStream,
}

impl Stream {
    /// Roles accepted by the stream, in canonical segment order (target first).
    pub fn roles(self) -> [Role; 3] {
        match self {
            Stream::VideoStream => [Role::TargetVideoLatent, Role::SourceVideo, Role::TargetRefImage],
            Stream::ImageStream => [Role::TargetImageLatent, Role::SourceFirstFrame, Role::RawRefImage],
        }
    }

    pub fn target_role(self) -> Role {
        self.roles()[0]
    }

    pub fn accepts(self, role: Role) -> bool {
        self.roles().contains(&role)
    }
}

/// Grid extent in latent patches: frames, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        GridDims { frames, height, width }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Row-major grid index of token `k`.
    pub fn index_of(&self, k: usize) -> GridIndex {
        let plane = self.height * self.width;
        GridIndex {
            f: k / plane,
            y: (k % plane) / self.width,
            x: k % self.width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridIndex {
    pub f: usize,
    pub y: usize,
    pub x: usize,
}

/// A (frames x height x width x channels) latent volume tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    dims: GridDims,
    channels: usize,
    role: Role,
    data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(dims: GridDims, channels: usize, role: Role, data: Vec<f32>) -> Result<Self> {
        if dims.frames == 0 || dims.height == 0 || dims.width == 0 {
            return Err(Error::InvalidGrid(format!("zero extent in {dims:?}")));
        }
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "channels must be even and >= 2, got {channels}"
            )));
        }
        if role.is_image() && dims.frames != 1 {
            return Err(Error::InvalidGrid(format!(
                "{role:?} is an image role and must have one frame, got {}",
                dims.frames
            )));
        }
        let expected = dims.tokens() * channels;
        if data.len() != expected {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not equal F*h*w*d = {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite value".into()));
        }
        Ok(LatentGrid {
            dims,
            channels,
            role,
            data,
        })
    }

    pub fn zeros(dims: GridDims, channels: usize, role: Role) -> Result<Self> {
        LatentGrid::new(dims, channels, role, vec![0.0; dims.tokens() * channels])
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn with_role(mut self, role: Role) -> Result<Self> {
        if role.is_image() && self.dims.frames != 1 {
            return Err(Error::InvalidGrid(format!("{role:?} requires a single frame")));
        }
        self.role = role;
        Ok(self)
    }

    /// Frame `f` as a single-frame grid with the given role.
    pub fn frame(&self, f: usize, role: Role) -> Result<LatentGrid> {
        if f >= self.dims.frames {
            return Err(Error::InvalidGrid(format!("frame {f} out of {}", self.dims.frames)));
        }
        let plane = self.dims.height * self.dims.width * self.channels;
        let dims = GridDims::new(1, self.dims.height, self.dims.width);
        LatentGrid::new(
            dims,
            self.channels,
            role,
            self.data[f * plane..(f + 1) * plane].to_vec(),
        )
    }

    pub fn value(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        let d = self.dims;
        self.data[((f * d.height + y) * d.width + x) * self.channels + c]
    }
}

/// Flatten a grid into tokens in row-major (f, y, x) order.
pub fn patchify(grid: &LatentGrid) -> (Mat, Vec<GridIndex>) {
    let n = grid.dims.tokens();
    let data = grid.data.iter().map(|&v| f64::from(v)).collect();
    let tokens = Mat::from_vec(n, grid.channels, data).expect("grid invariants guarantee the shape");
    let index = (0..n).map(|k| grid.dims.index_of(k)).collect();
    (tokens, index)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Mat, dims: GridDims, role: Role) -> Result<LatentGrid> {
    if tokens.rows() != dims.tokens() {
        return Err(Error::Layout(format!(
            "{} tokens cannot fill grid {:?} ({} tokens)",
            tokens.rows(),
            dims,
            dims.tokens()
        )));
    }
    let data = tokens.data().iter().map(|&v| v as f32).collect();
    LatentGrid::new(dims, tokens.cols(), role, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub role: Role,
    pub dims: GridDims,
    pub offset: RoleOffset,
    pub span: Range<usize>,
}

/// Ordered token segments of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLayout {
    stream: Stream,
    segments: Vec<Segment>,
    total_tokens: usize,
}

impl SegmentLayout {
    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn target(&self) -> &Segment {
        // build_layout guarantees the target is present and first
        &self.segments[0]
    }

    pub fn segment(&self, role: Role) -> Option<&Segment> {
        self.segments.iter().find(|s| s.role == role)
    }

    /// Index of the segment containing token `k`.
    pub fn segment_of(&self, k: usize) -> Option<usize> {
        self.segments.iter().position(|s| s.span.contains(&k))
    }
}

/// Build a layout with Dual-World-View offsets.
pub fn build_layout(stream: Stream, parts: &[(Role, GridDims)]) -> Result<SegmentLayout> {
    build_layout_with(stream, parts, RopeScheme::DualWorldView)
}

/// Build a layout, filling offsets from the given positional scheme.
pub fn build_layout_with(stream: Stream, parts: &[(Role, GridDims)], scheme: RopeScheme) -> Result<SegmentLayout> {
    let mut seen = HashSet::new();
    for &(role, dims) in parts {
        if !stream.accepts(role) {
            return Err(Error::RoleStreamMismatch { role, stream });
        }
        if !seen.insert(role) {
            return Err(Error::DuplicateRole(role));
        }
        if dims.tokens() == 0 {
            return Err(Error::Layout(format!("{role:?} has an empty grid")));
        }
        if role.is_image() && dims.frames != 1 {
            return Err(Error::Layout(format!("{role:?} must have one frame")));
        }
    }
    let target_role = stream.target_role();
    let target_dims = parts
        .iter()
        .find(|(r, _)| *r == target_role)
        .map(|&(_, d)| d)
        .ok_or_else(|| Error::Layout(format!("{stream:?} layout has no {target_role:?} segment")))?;

    let mut segments = Vec::with_capacity(parts.len());
    let mut cursor = 0;
    let mut appended_frames = 0;
    for role in stream.roles() {
        let Some(&(_, dims)) = parts.iter().find(|(r, _)| *r == role) else {
            continue;
        };
        let offset = match scheme {
            RopeScheme::DualWorldView => rope::role_offset(role, stream, target_dims.width, target_dims.frames)?,
            RopeScheme::FrameAppend => RoleOffset::new(appended_frames, 0, 0),
        };
        appended_frames += dims.frames;
        let span = cursor..cursor + dims.tokens();
        cursor = span.end;
        segments.push(Segment {
            role,
            dims,
            offset,
            span,
        });
    }
    Ok(SegmentLayout {
        stream,
        segments,
        total_tokens: cursor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: GridDims, d: usize, role: Role) -> LatentGrid {
        let data = (0..dims.tokens() * d).map(|i| i as f32 * 0.5 - 3.0).collect();
        LatentGrid::new(dims, d, role, data).unwrap()
    }

    #[test]
    fn singleton_patchify() {
        let g = LatentGrid::new(GridDims::new(1, 1, 1), 4, Role::SourceVideo, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (tokens, index) = patchify(&g);
        assert_eq!(tokens.shape(), (1, 4));
        assert_eq!(tokens.row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(index, vec![GridIndex { f: 0, y: 0, x: 0 }]);
    }

    #[test]
    fn patchify_order_is_row_major() {
        let g = grid(GridDims::new(2, 1, 2), 2, Role::SourceVideo);
        let (_, index) = patchify(&g);
        let got: Vec<_> = index.iter().map(|i| (i.f, i.y, i.x)).collect();
        assert_eq!(got, vec![(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1)]);
    }

    #[test]
    fn unpatchify_count_mismatch() {
        let tokens = Mat::zeros(3, 2);
        let err = unpatchify(&tokens, GridDims::new(2, 1, 1), Role::SourceVideo).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
        let one = Mat::from_rows(&[vec![0.25, -1.0]]).unwrap();
        let g = unpatchify(&one, GridDims::new(1, 1, 1), Role::SourceVideo).unwrap();
        assert_eq!(g.data(), &[0.25, -1.0]);
    }

    #[test]
    fn grid_invariants() {
        let d = GridDims::new(2, 1, 1);
        assert!(LatentGrid::new(d, 2, Role::RawRefImage, vec![0.0; 4]).is_err());
        assert!(LatentGrid::new(d, 3, Role::SourceVideo, vec![0.0; 6]).is_err());
        assert!(LatentGrid::new(d, 2, Role::SourceVideo, vec![0.0; 5]).is_err());
        assert!(LatentGrid::new(d, 2, Role::SourceVideo, vec![0.0, 1.0, f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn video_layout_total() {
        let l = build_layout(
            Stream::VideoStream,
            &[
                (Role::SourceVideo, GridDims::new(4, 2, 4)),
                (Role::TargetRefImage, GridDims::new(1, 2, 4)),
                (Role::TargetVideoLatent, GridDims::new(4, 2, 4)),
            ],
        )
        .unwrap();
        assert_eq!(l.total_tokens(), 72);
        let roles: Vec<_> = l.segments().iter().map(|s| s.role).collect();
        assert_eq!(
            roles,
            vec![Role::TargetVideoLatent, Role::SourceVideo, Role::TargetRefImage]
        );
        assert_eq!(l.segments()[1].span, 32..64);
        assert_eq!(l.segments()[2].span, 64..72);
        assert_eq!(l.segments()[2].offset, RoleOffset::new(4, 8, 0));
    }

    #[test]
    fn image_layout_target_only() {
        let l = build_layout(
            Stream::ImageStream,
            &[(Role::TargetImageLatent, GridDims::new(1, 2, 4))],
        )
        .unwrap();
        assert_eq!(l.total_tokens(), 8);
        assert_eq!(l.segments().len(), 1);
    }

    #[test]
    fn layout_errors() {
        let t = (Role::TargetVideoLatent, GridDims::new(1, 1, 1));
        let err = build_layout(Stream::VideoStream, &[t, (Role::RawRefImage, GridDims::new(1, 1, 1))]).unwrap_err();
        assert!(matches!(err, Error::RoleStreamMismatch { .. }));
        let err = build_layout(Stream::VideoStream, &[t, t]).unwrap_err();
        assert!(matches!(err, Error::DuplicateRole(Role::TargetVideoLatent)));
        let err = build_layout(Stream::VideoStream, &[(Role::SourceVideo, GridDims::new(1, 1, 1))]).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn frame_append_offsets_accumulate() {
        let l = build_layout_with(
            Stream::VideoStream,
            &[
                (Role::TargetVideoLatent, GridDims::new(3, 2, 2)),
                (Role::SourceVideo, GridDims::new(3, 2, 2)),
                (Role::TargetRefImage, GridDims::new(1, 2, 2)),
            ],
            RopeScheme::FrameAppend,
        )
        .unwrap();
        let offs: Vec<_> = l.segments().iter().map(|s| s.offset).collect();
        assert_eq!(
            offs,
            vec![
                RoleOffset::new(0, 0, 0),
                RoleOffset::new(3, 0, 0),
                RoleOffset::new(6, 0, 0)
            ]
        );
    }
}
