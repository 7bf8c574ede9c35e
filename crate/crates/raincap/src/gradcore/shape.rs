//! Tensor extents and the limited broadcasting rule used by elementwise ops.

use std::fmt;

/// Row-major dense extents, rank 1 through 4.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(Vec<usize>);

impl Shape {
    /// Builds a shape; extents must be non-empty, at most four, and non-zero.
    pub fn new(dims: &[usize]) -> Self {
        assert!(
            !dims.is_empty() && dims.len() <= 4,
            "rank must be 1..=4, got {}",
            dims.len()
        );
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        Shape(dims.to_vec())
    }

    /// The shape of a scalar: a single element of rank 1.
    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Extents left-padded with 1s to rank 4.
    pub(crate) fn padded4(&self) -> [usize; 4] {
        let mut out = [1usize; 4];
        let off = 4 - self.0.len();
        for (i, &d) in self.0.iter().enumerate() {
            out[off + i] = d;
        }
        out
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Row-major strides for `b` against output extents `out4`, with stride 0 on
/// broadcast axes. `b` broadcasts into `a` when, right-aligned, every extent
/// of `b` equals the matching extent of `a` or is 1. Returns `None` otherwise.
pub(crate) fn broadcast_strides(b: &Shape, out4: [usize; 4]) -> Option<[usize; 4]> {
    let b4 = b.padded4();
    let mut strides = [0usize; 4];
    let mut acc = 1usize;
    for i in (0..4).rev() {
        if b4[i] == 1 {
            strides[i] = 0; // broadcast (or trivially matching) axis
        } else if b4[i] == out4[i] {
            strides[i] = acc;
        } else {
            return None;
        }
        acc *= b4[i];
    }
    Some(strides)
}
