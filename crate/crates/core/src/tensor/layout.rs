//! Strided-view arithmetic: shapes, strides, broadcasting, and the
//! odometer iterator kernels use to walk arbitrary views.

use crate::error::{Error, Result};

/// Row-major strides for `shape`, in elements.
pub fn contiguous_strides(shape: &[usize]) -> Vec<isize> {
    let mut strides = vec![0isize; shape.len()];
    let mut acc = 1isize;
    for (i, &dim) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= dim as isize;
    }
    strides
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// View placement inside a storage: element offset plus per-dimension
/// strides (zero stride marks a broadcast dimension).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub offset: usize,
    pub shape: Vec<usize>,
    pub strides: Vec<isize>,
}

impl Layout {
    pub fn contiguous(shape: &[usize]) -> Self {
        Layout {
            offset: 0,
            shape: shape.to_vec(),
            strides: contiguous_strides(shape),
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_contiguous(&self) -> bool {
        let mut acc = 1isize;
        for (&dim, &stride) in self.shape.iter().zip(&self.strides).rev() {
            if dim != 1 && stride != acc {
                return false;
            }
            acc *= dim as isize;
        }
        true
    }

    /// Element index of the logical index tuple `idx`.
    pub fn linear_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank());
        let mut off = self.offset as isize;
        for (&i, &s) in idx.iter().zip(&self.strides) {
            off += i as isize * s;
        }
        off as usize
    }

    /// Rebind this layout to the broadcast target `shape` (right-aligned),
    /// inserting zero strides where this view repeats.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Layout> {
        if shape.len() < self.rank() {
            return Err(Error::BroadcastError {
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let lead = shape.len() - self.rank();
        let mut strides = vec![0isize; shape.len()];
        for (i, &dim) in shape.iter().enumerate() {
            if i < lead {
                continue; // new leading dim, stride 0
            }
            let own = self.shape[i - lead];
            if own == dim {
                strides[i] = self.strides[i - lead];
            } else if own == 1 {
                strides[i] = 0;
            } else {
                return Err(Error::BroadcastError {
                    lhs: self.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
        }
        Ok(Layout {
            offset: self.offset,
            shape: shape.to_vec(),
            strides,
        })
    }

    /// Iterate element indices in row-major logical order.
    pub fn iter(&self) -> StridedIter<'_> {
        StridedIter::new(self)
    }
}

/// Shape both operands broadcast to under right-aligned rules, or an error.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::BroadcastError {
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Odometer over a layout: yields storage element indices in row-major
/// logical order without per-step allocation.
pub struct StridedIter<'a> {
    layout: &'a Layout,
    counters: Vec<usize>,
    current: isize,
    remaining: usize,
}

impl<'a> StridedIter<'a> {
    fn new(layout: &'a Layout) -> Self {
        StridedIter {
            counters: vec![0; layout.rank()],
            current: layout.offset as isize,
            remaining: layout.numel(),
            layout,
        }
    }
}

impl Iterator for StridedIter<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let result = self.current as usize;
        self.remaining -= 1;
        // advance the odometer from the innermost dimension outward
        for d in (0..self.layout.rank()).rev() {
            self.counters[d] += 1;
            self.current += self.layout.strides[d];
            if self.counters[d] < self.layout.shape[d] {
                break;
            }
            self.counters[d] = 0;
            self.current -= self.layout.shape[d] as isize * self.layout.strides[d];
        }
        Some(result)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}
