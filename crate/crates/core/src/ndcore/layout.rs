//! Mapping between layered parameters and their canonical flat view.

use serde::{Deserialize, Serialize};

use super::matrix::{FlatVector, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous segments covering `[0, total_len)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayoutMap {
    segments: Vec<Segment>,
}

impl LayoutMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment directly after the current end.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        let offset = self.total_len();
        self.segments.push(Segment {
            name: name.into(),
            offset,
            rows,
            cols,
        });
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Concatenates `parts` in layout order.
    pub fn flatten(&self, parts: &[&Matrix]) -> Result<FlatVector> {
        if parts.len() != self.segments.len() {
            return Err(Error::shape(format!(
                "layout has {} segments but {} arrays were given",
                self.segments.len(),
                parts.len()
            )));
        }
        let mut out = Vec::with_capacity(self.total_len());
        for (seg, m) in self.segments.iter().zip(parts) {
            if m.shape() != (seg.rows, seg.cols) {
                return Err(Error::shape(format!(
                    "segment {} expects {}x{}, got {}x{}",
                    seg.name,
                    seg.rows,
                    seg.cols,
                    m.rows(),
                    m.cols()
                )));
            }
            out.extend_from_slice(m.as_slice());
        }
        Ok(FlatVector::new(out))
    }

    /// Splits a flat vector back into one matrix per segment.
    pub fn unflatten(&self, flat: &FlatVector) -> Result<Vec<Matrix>> {
        if flat.len() != self.total_len() {
            return Err(Error::shape(format!(
                "flat vector of length {} does not match layout length {}",
                flat.len(),
                self.total_len()
            )));
        }
        self.segments
            .iter()
            .map(|seg| Matrix::from_vec(seg.rows, seg.cols, flat.as_slice()[seg.range()].to_vec()))
            .collect()
    }
}
