use crate::{Error, Result};

/// A drag from `source` to `target`, in integer pixel coordinates `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DragPair {
    pub source: (usize, usize),
    pub target: (usize, usize),
}

/// Drag pairs for an image of fixed size; every coordinate is in bounds.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DragPointSet {
    pub width: usize,
    pub height: usize,
    pairs: Vec<DragPair>,
}

impl DragPointSet {
    pub fn new(width: usize, height: usize, pairs: Vec<DragPair>) -> Result<Self> {
        for (k, p) in pairs.iter().enumerate() {
            for (what, (x, y)) in [("source", p.source), ("target", p.target)] {
                if x >= width || y >= height {
                    return Err(Error::OutOfBounds(format!("drag pair {k}: {what} ({x}, {y}) outside {width}x{height}")));
                }
            }
        }
        Ok(Self { width, height, pairs })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, pairs: Vec::new() }
    }

    pub fn pairs(&self) -> &[DragPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(source_token, target_token)` row indices on a token grid whose
    /// cells are `stride` pixels wide.
    pub fn token_pairs(&self, grid_width: usize, grid_height: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
        let cell = |(x, y): (usize, usize)| -> Result<usize> {
            let (c, r) = (x / stride, y / stride);
            if c >= grid_width || r >= grid_height {
                return Err(Error::OutOfBounds(format!("pixel ({x}, {y}) maps to token ({r}, {c}) outside {grid_height}x{grid_width}")));
            }
            Ok(r * grid_width + c)
        };
        self.pairs.iter().map(|p| Ok((cell(p.source)?, cell(p.target)?))).collect()
    }
}
