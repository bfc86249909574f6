#![allow(dead_code, clippy::unnecessary_cast, clippy::needless_range_loop)]

use shardkrp::dense::{DenseMatrix, FactorMatrix};
use shardkrp::tensor::SparseTensor;
use shardkrp::Value;
use std::ops::Range;

/// Entry-by-entry MTTKRP: every output cell scans all nonzeros.
pub fn naive_mttkrp(t: &SparseTensor, factors: &[FactorMatrix], mode: usize) -> DenseMatrix {
    let rows = t.shape()[mode] as usize;
    let rank = factors[0].rank();
    let mut out = DenseMatrix::zeros(rows, rank);
    let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); rows];
    for (e, el) in t.elements().enumerate() {
        by_row[el.indices[mode] as usize].push(e);
    }
    for (i, members) in by_row.iter().enumerate() {
        for r in 0..rank {
            let mut acc: Value = 0.0;
            for &e in members {
                let el = t.element(e);
                let mut p = el.value;
                for w in 0..t.num_modes() {
                    if w != mode {
                        p *= factors[w].matrix.get(el.indices[w] as usize, r);
                    }
                }
                acc += p;
            }
            out.set(i, r, acc);
        }
    }
    out
}

/// Largest `|a - b| / max(|a|, |b|)` over all entries; zero where both are zero.
pub fn max_rel(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Every device sends its own rows straight to every other device.
pub fn gather_broadcast(owners: &[Vec<Range<u64>>], buffers: &[DenseMatrix]) -> Vec<DenseMatrix> {
    let mut full = buffers[0].clone();
    for (dev, ranges) in owners.iter().enumerate() {
        for r in ranges {
            for row in r.start as usize..r.end as usize {
                full.row_mut(row).copy_from_slice(buffers[dev].row(row));
            }
        }
    }
    vec![full; buffers.len()]
}
