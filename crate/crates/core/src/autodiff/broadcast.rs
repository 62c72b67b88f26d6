//! Broadcasting rules for elementwise binary ops.
//!
//! Shapes are right-aligned, numpy style: each dimension must either match
//! or be 1 in one of the operands. Four layouts cover nearly every call site
//! and get dedicated index arithmetic; anything else falls back to an
//! explicit index table.

use super::tensor::numel;
use super::AutodiffError;

#[derive(Clone, Debug)]
pub(crate) enum Index {
    /// Operand has the output shape.
    Same,
    /// Operand has a single element.
    Scalar,
    /// Operand matches the trailing dims of the output (`i % n`).
    Modulo(usize),
    /// Operand matches the leading dims, trailing dims are 1 (`i / n`).
    Div(usize),
    Map(Vec<usize>),
}

impl Index {
    #[inline(always)]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Index::Same => i,
            Index::Scalar => 0,
            Index::Modulo(n) => i % n,
            Index::Div(n) => i / n,
            Index::Map(m) => m[i],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub out_shape: Vec<usize>,
    pub out_len: usize,
    pub a: Index,
    pub b: Index,
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, AutodiffError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = dim_from_right(a, rank, k);
        let db = dim_from_right(b, rank, k);
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], rank: usize, k: usize) -> usize {
    let pad = rank - shape.len();
    if k < pad {
        1
    } else {
        shape[k - pad]
    }
}

/// Index layout of an operand of shape `src` inside the broadcast `out` shape.
pub(crate) fn index_for(src: &[usize], out: &[usize]) -> Index {
    let rank = out.len();
    let padded: Vec<usize> = (0..rank).map(|k| dim_from_right(src, rank, k)).collect();
    if padded == out {
        return Index::Same;
    }
    let n = numel(src);
    if n == 1 {
        return Index::Scalar;
    }
    let first = padded.iter().position(|&d| d != 1).unwrap_or(rank);
    if padded[first..] == out[first..] {
        return Index::Modulo(n);
    }
    let last = padded.iter().rposition(|&d| d != 1).unwrap_or(0);
    if padded[..=last] == out[..=last] {
        return Index::Div(numel(out) / n);
    }
    // general case: explicit table
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for k in (0..rank).rev() {
        src_strides[k] = if padded[k] == 1 { 0 } else { acc };
        acc *= padded[k];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Index::Map(map)
}

pub(crate) fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Plan, AutodiffError> {
    let out_shape = broadcast_shape(op, a, b)?;
    Ok(Plan {
        a: index_for(a, &out_shape),
        b: index_for(b, &out_shape),
        out_len: numel(&out_shape),
        out_shape,
    })
}
