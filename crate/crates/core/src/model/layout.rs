use std::ops::Range;

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Conv,
    FullyConnected,
    Bias,
}

impl SegmentKind {
    pub fn is_weight(self) -> bool {
        !matches!(self, SegmentKind::Bias)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::Conv => "conv",
            SegmentKind::FullyConnected => "fc",
            SegmentKind::Bias => "bias",
        }
    }
}

/// One named, contiguous block of the flat parameter vector.
///
/// `shape` is `[out, in]` for fully-connected weights, `[out, in, kh, kw]`
/// for convolution kernels and `[len]` for biases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            SegmentKind::FullyConnected => self.shape[1],
            SegmentKind::Conv => self.shape[1] * self.shape[2] * self.shape[3],
            SegmentKind::Bias => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    segments: Vec<Segment>,
    dim: usize,
}

impl LayerLayout {
    /// Builds a contiguous layout from `(name, kind, shape)` triples.
    ///
    /// Panics on duplicate names or empty shapes; layouts are built from
    /// static architecture descriptions.
    pub fn from_shapes<S: AsRef<str>>(parts: &[(S, SegmentKind, Vec<usize>)]) -> Self {
        let mut segments = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (name, kind, shape) in parts {
            let name = name.as_ref().to_string();
            assert!(
                segments.iter().all(|s: &Segment| s.name != name),
                "duplicate segment name {name}"
            );
            let len: usize = shape.iter().product();
            assert!(len > 0, "segment {name} is empty");
            segments.push(Segment {
                name,
                kind: *kind,
                offset,
                len,
                shape: shape.clone(),
            });
            offset += len;
        }
        Self {
            segments,
            dim: offset,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSegment(name.to_string()))
    }

    pub fn weight_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind.is_weight())
    }

    /// Number of coordinates that belong to weight (non-bias) segments.
    pub fn weight_dim(&self) -> usize {
        self.weight_segments().map(|s| s.len).sum()
    }

    /// Index of the segment containing coordinate `i`.
    pub fn segment_of(&self, i: usize) -> Option<usize> {
        if i >= self.dim {
            return None;
        }
        Some(self.segments.partition_point(|s| s.offset + s.len <= i))
    }

    /// The layers pruning methods tend to keep dense: the first convolution
    /// kernel (when there is one) and the last fully-connected weight block.
    pub fn critical_segments(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(conv) = self.segments.iter().find(|s| s.kind == SegmentKind::Conv) {
            out.push(conv.name.clone());
        }
        if let Some(fc) = self
            .segments
            .iter()
            .rev()
            .find(|s| s.kind == SegmentKind::FullyConnected)
        {
            out.push(fc.name.clone());
        }
        out
    }

    /// The last fully-connected weight segment, the default target of
    /// per-layer density caps.
    pub fn final_fc(&self) -> Option<&Segment> {
        self.segments
            .iter()
            .rev()
            .find(|s| s.kind == SegmentKind::FullyConnected)
    }

    pub fn split<'a>(&self, flat: &'a [f64]) -> Result<Vec<&'a [f64]>> {
        check_dim(self.dim, flat.len())?;
        Ok(self.segments.iter().map(|s| &flat[s.range()]).collect())
    }

    pub fn flatten<P: AsRef<[f64]>>(&self, parts: &[P]) -> Result<Vec<f64>> {
        check_dim(self.segments.len(), parts.len())?;
        let mut out = Vec::with_capacity(self.dim);
        for (seg, part) in self.segments.iter().zip(parts) {
            check_dim(seg.len, part.as_ref().len())?;
            out.extend_from_slice(part.as_ref());
        }
        Ok(out)
    }
}
