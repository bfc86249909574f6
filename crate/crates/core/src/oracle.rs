//! Sequential reference MTTKRP.

use crate::dense::{DenseMatrix, FactorMatrix};
use crate::tensor::{SparseTensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MttkrpError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected {expected} factor matrices, got {found}")]
    FactorCount { expected: usize, found: usize },
    #[error("factor {mode} has {found} rows, tensor mode length is {expected}")]
    FactorRows {
        mode: usize,
        expected: u64,
        found: usize,
    },
    #[error("factor {mode} has rank {found}, expected {expected}")]
    RankMismatch {
        mode: usize,
        expected: usize,
        found: usize,
    },
}

/// Checks that `factors` line up with the tensor's shape and share a rank.
pub fn check_factors(tensor: &SparseTensor, factors: &[FactorMatrix]) -> Result<usize, MttkrpError> {
    if factors.len() != tensor.num_modes() {
        return Err(MttkrpError::FactorCount {
            expected: tensor.num_modes(),
            found: factors.len(),
        });
    }
    let rank = factors[0].rank();
    for (mode, f) in factors.iter().enumerate() {
        if f.rows() as u64 != tensor.shape()[mode] {
            return Err(MttkrpError::FactorRows {
                mode,
                expected: tensor.shape()[mode],
                found: f.rows(),
            });
        }
        if f.rank() != rank {
            return Err(MttkrpError::RankMismatch {
                mode,
                expected: rank,
                found: f.rank(),
            });
        }
    }
    Ok(rank)
}

/// Computes the mode-`mode` MTTKRP with a plain triple loop over the
/// elements in input order.
///
/// `out(i, r)` is the sum, over elements with `c_mode == i`, of the value
/// times the product of `factors[w](c_w, r)` over every other mode `w`,
/// multiplied in increasing `w` order.
pub fn dense_mttkrp_oracle(
    tensor: &SparseTensor,
    factors: &[FactorMatrix],
    mode: usize,
) -> Result<DenseMatrix, MttkrpError> {
    tensor.check_mode(mode)?;
    let rank = check_factors(tensor, factors)?;
    let mut out = DenseMatrix::zeros(tensor.shape()[mode] as usize, rank);
    for e in tensor.elements() {
        let row = e.indices[mode] as usize;
        for r in 0..rank {
            let mut prod = e.value;
            for (w, f) in factors.iter().enumerate() {
                if w != mode {
                    prod *= f.matrix.get(e.indices[w] as usize, r);
                }
            }
            let cur = out.get(row, r);
            out.set(row, r, cur + prod);
        }
    }
    Ok(out)
}
