use std::sync::Arc;

use crate::error::{Error, Result};

/// Square additive attention mask whose entries are exactly `0` or `-inf`.
///
/// Stored as a visibility grid; [`AttentionMask::value`] gives the additive form.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    size: usize,
    allowed: Arc<Vec<bool>>,
    full: bool,
}

impl AttentionMask {
    pub const BLOCKED: f32 = f32::NEG_INFINITY;

    /// Every query sees every key.
    pub fn full(size: usize) -> Self {
        Self {
            size,
            allowed: Arc::new(vec![true; size * size]),
            full: true,
        }
    }

    /// Builds a mask from a visibility predicate `f(query, key)`.
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                allowed.push(f(i, j));
            }
        }
        Self::from_grid(size, allowed)
    }

    pub fn from_grid(size: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != size * size {
            return Err(Error::shape("attention mask", &[allowed.len()], &[size, size]));
        }
        for i in 0..size {
            if !allowed[i * size..(i + 1) * size].iter().any(|&a| a) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        let full = allowed.iter().all(|&a| a);
        Ok(Self {
            size,
            allowed: Arc::new(allowed),
            full,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    /// Additive entry: `0.0` if visible, `-inf` otherwise.
    pub fn value(&self, i: usize, j: usize) -> f32 {
        if self.is_allowed(i, j) {
            0.0
        } else {
            Self::BLOCKED
        }
    }

    /// Dense row-major `size × size` additive grid.
    pub fn additive(&self) -> Vec<f32> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { Self::BLOCKED })
            .collect()
    }

    /// Columns visible from query row `i`.
    pub fn visible(&self, i: usize) -> Vec<usize> {
        (0..self.size).filter(|&j| self.is_allowed(i, j)).collect()
    }

    /// Leading `len × len` block.
    pub fn truncate(&self, len: usize) -> Result<Self> {
        if len > self.size {
            return Err(Error::contract(format!(
                "cannot truncate mask of size {} to {len}",
                self.size
            )));
        }
        Self::from_fn(len, |i, j| self.is_allowed(i, j))
    }

    pub(crate) fn grid(&self) -> Option<Arc<Vec<bool>>> {
        (!self.full).then(|| Arc::clone(&self.allowed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_are_zero_or_blocked() {
        let m = AttentionMask::from_fn(4, |i, j| j <= i).unwrap();
        for v in m.additive() {
            assert!(v == 0.0 || v == f32::NEG_INFINITY);
        }
        assert_eq!(m.value(0, 1), f32::NEG_INFINITY);
        assert_eq!(m.value(3, 1), 0.0);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let err = AttentionMask::from_fn(3, |i, _| i != 1).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn full_mask_needs_no_grid() {
        assert!(AttentionMask::full(5).grid().is_none());
        assert!(AttentionMask::from_fn(2, |i, j| i == j).unwrap().grid().is_some());
    }
}
