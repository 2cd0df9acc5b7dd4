use serde::{Deserialize, Serialize};

use super::{Matrix, Real};
use crate::error::{Error, Result};

/// A named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSlot {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    /// Rows and columns when read as a matrix; vectors become a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }
}

/// Ordered description of the tensors packed into a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub slots: Vec<TensorSlot>,
}

impl Layout {
    /// Lays the tensors out back to back in the given order.
    pub fn contiguous<S: Into<String>>(tensors: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let slots = tensors
            .into_iter()
            .map(|(name, shape)| {
                let slot = TensorSlot {
                    name: name.into(),
                    shape,
                    offset,
                };
                offset += slot.size();
                slot
            })
            .collect();
        Self { slots }
    }

    pub fn total(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.size())
    }

    pub fn find(&self, name: &str) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Offsets must start at zero and tile the vector without gaps.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for slot in &self.slots {
            if slot.offset != expected {
                return Err(Error::Layout(format!(
                    "tensor {} starts at {} but the previous tensor ends at {}",
                    slot.name, slot.offset, expected
                )));
            }
            expected += slot.size();
        }
        Ok(())
    }

    /// Checks that `self` describes exactly the tensors of `expected`, in order.
    pub fn ensure_matches(&self, expected: &Layout) -> Result<()> {
        self.validate()?;
        if self.slots.len() != expected.slots.len() {
            return Err(Error::Layout(format!(
                "expected {} tensors, found {}",
                expected.slots.len(),
                self.slots.len()
            )));
        }
        for (got, want) in self.slots.iter().zip(&expected.slots) {
            if got != want {
                return Err(Error::Layout(format!(
                    "expected tensor {} {:?} at offset {}, found {} {:?} at offset {}",
                    want.name, want.shape, want.offset, got.name, got.shape, got.offset
                )));
            }
        }
        Ok(())
    }

    pub fn slice<'a, T>(&self, values: &'a [T], slot: &TensorSlot) -> &'a [T] {
        &values[slot.offset..slot.offset + slot.size()]
    }

    pub fn matrix<T: Real>(&self, values: &[T], slot: &TensorSlot) -> Matrix<T> {
        let (r, c) = slot.matrix_shape();
        Matrix::from_raw(r, c, self.slice(values, slot).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contiguous_offsets() {
        let l = Layout::contiguous([("w", vec![4, 8]), ("b", vec![8]), ("s", vec![1])]);
        assert_eq!(l.total(), 41);
        assert_eq!(l.slots[1].offset, 32);
        assert_eq!(l.slots[2].offset, 40);
        l.validate().unwrap();
    }

    #[test]
    fn gaps_are_rejected() {
        let mut l = Layout::contiguous([("w", vec![2, 2]), ("b", vec![2])]);
        l.slots[1].offset = 5;
        assert!(l.validate().is_err());
    }
}
