//! Dense row-major matrices and factor matrices.

use crate::value::Value;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DenseError {
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BufferLength { rows: usize, cols: usize, len: usize },
    #[error("column counts differ: {left} vs {right}")]
    ColumnMismatch { left: usize, right: usize },
    #[error("inner dimensions differ: {left} vs {right}")]
    InnerMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Value>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: Value) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Value>) -> Result<Self, DenseError> {
        if data.len() != rows * cols {
            return Err(DenseError::BufferLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows<R: AsRef<[Value]>>(rows: &[R]) -> Result<Self, DenseError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(DenseError::ColumnMismatch {
                    left: cols,
                    right: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform(0, 1) entries.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random::<Value>()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Value] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Value] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Value> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Value] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [Value] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Contiguous block of rows `[lo, hi)`.
    pub fn rows_slice(&self, lo: usize, hi: usize) -> &[Value] {
        &self.data[lo * self.cols..hi * self.cols]
    }

    pub fn rows_slice_mut(&mut self, lo: usize, hi: usize) -> &mut [Value] {
        &mut self.data[lo * self.cols..hi * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Value {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Value) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, DenseError> {
        if self.cols != rhs.rows {
            return Err(DenseError::InnerMismatch {
                left: self.cols,
                right: rhs.rows,
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest per-entry relative difference, `|a - b| / max(|a|, |b|)`.
    /// Entries that are both zero count as equal.
    pub fn max_relative_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let (a, b) = (a as f64, b as f64);
                let scale = a.abs().max(b.abs());
                if scale == 0.0 {
                    0.0
                } else {
                    (a - b).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Column-wise Kronecker product of a `J x R` and a `K x R` matrix.
///
/// Row `j * K + k` of the result is the Hadamard product of row `j` of `left`
/// and row `k` of `right`, so `right`'s rows sweep fastest.
pub fn khatri_rao(left: &DenseMatrix, right: &DenseMatrix) -> Result<DenseMatrix, DenseError> {
    if left.cols != right.cols {
        return Err(DenseError::ColumnMismatch {
            left: left.cols,
            right: right.cols,
        });
    }
    let r = left.cols;
    let mut out = DenseMatrix::zeros(left.rows * right.rows, r);
    for j in 0..left.rows {
        let a = left.row(j);
        for k in 0..right.rows {
            let b = right.row(k);
            for (dst, (x, y)) in out.row_mut(j * right.rows + k).iter_mut().zip(a.iter().zip(b)) {
                *dst = x * y;
            }
        }
    }
    Ok(out)
}

/// Dense `|I_d| x R` factor matrix for one tensor mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    pub mode: usize,
    pub matrix: DenseMatrix,
    /// Column weights after normalization, when the matrix has been normalized.
    pub lambdas: Option<Vec<Value>>,
}

impl FactorMatrix {
    pub fn new(mode: usize, matrix: DenseMatrix) -> Self {
        Self {
            mode,
            matrix,
            lambdas: None,
        }
    }

    pub fn random<R: Rng + ?Sized>(mode: usize, rows: usize, rank: usize, rng: &mut R) -> Self {
        Self::new(mode, DenseMatrix::random(rows, rank, rng))
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn rank(&self) -> usize {
        self.matrix.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Value] {
        self.matrix.row(i)
    }
}

/// Seeded uniform(0, 1) factor matrices for every mode of `shape`.
pub fn random_factors<R: Rng + ?Sized>(shape: &[u64], rank: usize, rng: &mut R) -> Vec<FactorMatrix> {
    shape
        .iter()
        .enumerate()
        .map(|(mode, &rows)| FactorMatrix::random(mode, rows as usize, rank, rng))
        .collect()
}
