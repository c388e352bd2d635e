//! Asymmetric semi-attention and image-to-video key/value injection.
//!
//! Target queries see every key of their stream plus any injected keys.
//! Condition queries see only the keys of their own segment, so nothing the
//! target does can leak back into a condition.

use crate::error::{Error, Result};
use crate::latent::SegmentLayout;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} mask entries for {rows}x{cols}",
                allowed.len()
            )));
        }
        for r in 0..rows {
            if !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a) {
                return Err(Error::FullyMaskedRow(r));
            }
        }
        Ok(AttentionMask { rows, cols, allowed })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        assert!(cols > 0 || rows == 0, "a full mask needs at least one column");
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }
}

/// Which keys a condition-segment query may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConditionScope {
    /// Only its own segment.
    #[default]
    OwnSegment,
    /// Any condition segment of the stream (never the target or injected keys).
    AllConditions,
}

/// Key/value tensors retained from one stream for injection into another.
#[derive(Debug, Clone)]
pub struct StreamKV {
    keys: Mat,
    values: Mat,
    source_layout: SegmentLayout,
}

impl StreamKV {
    pub fn new(keys: Mat, values: Mat, source_layout: SegmentLayout) -> Result<Self> {
        if keys.shape() != values.shape() {
            return Err(Error::Shape(format!(
                "keys {:?} and values {:?} differ",
                keys.shape(),
                values.shape()
            )));
        }
        if keys.rows() != source_layout.total_tokens() {
            return Err(Error::Shape(format!(
                "{} retained tokens for a layout of {}",
                keys.rows(),
                source_layout.total_tokens()
            )));
        }
        Ok(StreamKV {
            keys,
            values,
            source_layout,
        })
    }

    pub fn keys(&self) -> &Mat {
        &self.keys
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn source_layout(&self) -> &SegmentLayout {
        &self.source_layout
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.keys.cols()
    }
}

pub fn build_semi_mask(layout: &SegmentLayout, injected: Option<&StreamKV>) -> AttentionMask {
    build_semi_mask_scoped(layout, injected.map_or(0, StreamKV::len), ConditionScope::OwnSegment)
}

/// Semi-attention mask with `injected` key-only columns appended.
pub fn build_semi_mask_scoped(layout: &SegmentLayout, injected: usize, scope: ConditionScope) -> AttentionMask {
    let n = layout.total_tokens();
    let cols = n + injected;
    let mut allowed = vec![false; n * cols];
    let target = layout.target().span.clone();
    for (si, seg) in layout.segments().iter().enumerate() {
        for r in seg.span.clone() {
            let row = &mut allowed[r * cols..(r + 1) * cols];
            if si == 0 {
                row.fill(true);
            } else {
                match scope {
                    ConditionScope::OwnSegment => row[seg.span.clone()].fill(true),
                    ConditionScope::AllConditions => {
                        row[target.end..n].fill(true);
                    }
                }
            }
        }
    }
    AttentionMask { rows: n, cols, allowed }
}

/// Row-wise softmax over allowed entries with max subtraction. Masked entries
/// get exactly zero weight.
pub fn masked_softmax(scores: &Mat, mask: &AttentionMask) -> Result<Mat> {
    if scores.shape() != (mask.rows, mask.cols) {
        return Err(Error::Shape(format!(
            "scores {:?} vs mask {}x{}",
            scores.shape(),
            mask.rows,
            mask.cols
        )));
    }
    let mut out = Mat::zeros(mask.rows, mask.cols);
    for r in 0..mask.rows {
        let allow = mask.row(r);
        let s = scores.row(r);
        let max = s
            .iter()
            .zip(allow)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow(r));
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..s.len() {
            if allow[c] {
                let e = (s[c] - max).exp();
                o[c] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Attention weights softmax(q k^T / sqrt(d)) restricted to the mask.
pub fn attention_weights(queries: &Mat, keys: &Mat, mask: &AttentionMask) -> Result<Mat> {
    if queries.cols() != keys.cols() {
        return Err(Error::Shape(format!(
            "query dim {} vs key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if queries.rows() != mask.rows || keys.rows() != mask.cols {
        return Err(Error::Shape(format!(
            "{} queries x {} keys against a {}x{} mask",
            queries.rows(),
            keys.rows(),
            mask.rows,
            mask.cols
        )));
    }
    let scale = 1.0 / (queries.cols() as f64).sqrt();
    let mut scores = Mat::zeros(mask.rows, mask.cols);
    for i in 0..mask.rows {
        let q = queries.row(i);
        for j in 0..mask.cols {
            if mask.allowed(i, j) {
                let dot: f64 = q.iter().zip(keys.row(j)).map(|(a, b)| a * b).sum();
                scores.set(i, j, dot * scale);
            }
        }
    }
    masked_softmax(&scores, mask)
}

pub fn attend(queries: &Mat, keys: &Mat, values: &Mat, mask: &AttentionMask) -> Result<Mat> {
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    let w = attention_weights(queries, keys, mask)?;
    let mut out = Mat::zeros(queries.rows(), values.cols());
    for i in 0..w.rows() {
        for (j, &p) in w.row(i).iter().enumerate() {
            if p != 0.0 {
                let v = values.row(j);
                for (o, &x) in out.row_mut(i).iter_mut().zip(v) {
                    *o += p * x;
                }
            }
        }
    }
    Ok(out)
}

/// Video-stream semi-attention with the image stream's retained keys and
/// values appended as extra key-only columns.
pub fn dual_stream_attend(
    queries: &Mat,
    keys: &Mat,
    values: &Mat,
    layout: &SegmentLayout,
    image_kv: Option<&StreamKV>,
) -> Result<Mat> {
    let Some(kv) = image_kv.filter(|kv| !kv.is_empty()) else {
        return attend(queries, keys, values, &build_semi_mask(layout, None));
    };
    if kv.head_dim() != keys.cols() || kv.values().cols() != values.cols() {
        return Err(Error::Shape(format!(
            "image stream head dim {} vs video stream {}",
            kv.head_dim(),
            keys.cols()
        )));
    }
    let k = Mat::concat_rows(&[keys, kv.keys()])?;
    let v = Mat::concat_rows(&[values, kv.values()])?;
    attend(queries, &k, &v, &build_semi_mask(layout, Some(kv)))
}
