//! Coordinate-format sparse tensors.

use crate::value::{Value, INDEX_BYTES, VALUE_BYTES};
use std::cmp::Ordering;
use thiserror::Error;

/// Smallest supported mode count.
pub const MIN_MODES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor needs at least {MIN_MODES} modes, got {0}")]
    TooFewModes(usize),
    #[error("mode {mode} has zero length")]
    EmptyMode { mode: usize },
    #[error("element {element} has {found} indices, expected {expected}")]
    Arity {
        element: usize,
        found: usize,
        expected: usize,
    },
    #[error("element {element}: index {index} out of range for mode {mode} of length {len}")]
    IndexOutOfRange {
        element: usize,
        mode: usize,
        index: u64,
        len: u64,
    },
    #[error("element {element} has non-finite value {value}")]
    NonFinite { element: usize, value: Value },
    #[error("elements {first} and {second} share the same index tuple")]
    Duplicate { first: usize, second: usize },
    #[error("mode {mode} out of range for a {modes}-mode tensor")]
    ModeOutOfRange { mode: usize, modes: usize },
}

/// One stored element: an index tuple and its value.
#[derive(Debug, Clone, PartialEq)]
pub struct Nonzero {
    pub indices: Vec<u64>,
    pub value: Value,
}

impl Nonzero {
    pub fn new(indices: impl Into<Vec<u64>>, value: Value) -> Self {
        Self {
            indices: indices.into(),
            value,
        }
    }
}

/// Borrowed view of one element of a [`SparseTensor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementRef<'a> {
    pub indices: &'a [u64],
    pub value: Value,
}

/// An N-mode sparse tensor in coordinate format.
///
/// Indices are stored 0-based in one flat array, `num_modes` entries per
/// element. The tensor is immutable once built; constructors validate bounds,
/// finiteness and uniqueness of index tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    name: String,
    shape: Vec<u64>,
    indices: Vec<u64>,
    values: Vec<Value>,
}

impl SparseTensor {
    /// Builds a tensor from flat index and value arrays.
    pub fn from_parts(
        name: impl Into<String>,
        shape: Vec<u64>,
        indices: Vec<u64>,
        values: Vec<Value>,
    ) -> Result<Self, TensorError> {
        let n = shape.len();
        if n < MIN_MODES {
            return Err(TensorError::TooFewModes(n));
        }
        if let Some(mode) = shape.iter().position(|&len| len == 0) {
            return Err(TensorError::EmptyMode { mode });
        }
        if indices.len() != values.len() * n {
            return Err(TensorError::Arity {
                element: indices.len() / n,
                found: indices.len() % n,
                expected: n,
            });
        }
        for (e, tuple) in indices.chunks_exact(n).enumerate() {
            for (mode, (&index, &len)) in tuple.iter().zip(&shape).enumerate() {
                if index >= len {
                    return Err(TensorError::IndexOutOfRange {
                        element: e,
                        mode,
                        index,
                        len,
                    });
                }
            }
        }
        if let Some(e) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                element: e,
                value: values[e],
            });
        }
        let tensor = Self {
            name: name.into(),
            shape,
            indices,
            values,
        };
        if let Some((first, second)) = tensor.duplicate_groups().first().map(|g| (g[0], g[1])) {
            return Err(TensorError::Duplicate { first, second });
        }
        Ok(tensor)
    }

    /// Builds a tensor from a list of elements.
    pub fn from_elements(
        name: impl Into<String>,
        shape: Vec<u64>,
        elements: impl IntoIterator<Item = Nonzero>,
    ) -> Result<Self, TensorError> {
        let n = shape.len();
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (e, el) in elements.into_iter().enumerate() {
            if el.indices.len() != n {
                return Err(TensorError::Arity {
                    element: e,
                    found: el.indices.len(),
                    expected: n,
                });
            }
            indices.extend_from_slice(&el.indices);
            values.push(el.value);
        }
        Self::from_parts(name, shape, indices, values)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn num_modes(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat 0-based index array, `num_modes` entries per element.
    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn element(&self, i: usize) -> ElementRef<'_> {
        let n = self.num_modes();
        ElementRef {
            indices: &self.indices[i * n..(i + 1) * n],
            value: self.values[i],
        }
    }

    pub fn elements(&self) -> impl ExactSizeIterator<Item = ElementRef<'_>> + '_ {
        self.indices
            .chunks_exact(self.num_modes())
            .zip(&self.values)
            .map(|(indices, &value)| ElementRef { indices, value })
    }

    /// Number of stored elements whose value is exactly zero.
    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|v| **v == 0.0).count()
    }

    /// Fraction of the index space that is stored.
    pub fn density(&self) -> f64 {
        let space: f64 = self.shape.iter().map(|&s| s as f64).product();
        self.nnz() as f64 / space
    }

    /// Number of distinct indices that appear in each mode.
    pub fn mode_index_counts(&self) -> Vec<usize> {
        (0..self.num_modes())
            .map(|mode| {
                let mut seen: Vec<u64> = self.elements().map(|e| e.indices[mode]).collect();
                seen.sort_unstable();
                seen.dedup();
                seen.len()
            })
            .collect()
    }

    /// Nonzero count per index of `mode`.
    pub fn mode_histogram(&self, mode: usize) -> Result<Vec<u64>, TensorError> {
        self.check_mode(mode)?;
        let mut hist = vec![0u64; self.shape[mode] as usize];
        for e in self.elements() {
            hist[e.indices[mode] as usize] += 1;
        }
        Ok(hist)
    }

    /// Bytes occupied by the element arrays: `nnz * (N * 8 + value bytes)`.
    pub fn element_bytes(&self) -> u64 {
        element_bytes(self.nnz(), self.num_modes())
    }

    /// Sum of squared values.
    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Returns a copy with every value multiplied by `alpha`.
    pub fn scaled(&self, alpha: Value) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub(crate) fn check_mode(&self, mode: usize) -> Result<(), TensorError> {
        if mode >= self.num_modes() {
            Err(TensorError::ModeOutOfRange {
                mode,
                modes: self.num_modes(),
            })
        } else {
            Ok(())
        }
    }

    /// Groups of element positions sharing an index tuple, each group in
    /// input order, groups ordered by first occurrence.
    pub(crate) fn duplicate_groups(&self) -> Vec<Vec<usize>> {
        duplicate_groups(&self.indices, self.num_modes())
    }
}

/// Bytes for `nnz` elements of an `modes`-mode tensor.
pub fn element_bytes(nnz: usize, modes: usize) -> u64 {
    (nnz * (modes * INDEX_BYTES + VALUE_BYTES)) as u64
}

/// Finds positions of repeated index tuples in a flat index array.
pub(crate) fn duplicate_groups(indices: &[u64], modes: usize) -> Vec<Vec<usize>> {
    let count = indices.len() / modes;
    let tuple = |i: usize| &indices[i * modes..(i + 1) * modes];
    let mut order: Vec<usize> = (0..count).collect();
    // Stable, so equal tuples stay in input order.
    order.sort_by(|&a, &b| tuple(a).cmp(tuple(b)));
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && tuple(order[i]).cmp(tuple(order[j])) == Ordering::Equal {
            j += 1;
        }
        if j - i > 1 {
            groups.push(order[i..j].to_vec());
        }
        i = j;
    }
    groups.sort_by_key(|g| g[0]);
    groups
}
