//! Head similarity by linear CKA over projection weights, and per-layer
//! redundancy.
//!
//! CKA here is the uncentered linear form
//! `‖XᵀY‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F)`, applied to each head's
//! `(d_model, head_dim)` weight matrix.

use serde::Serialize;

use crate::attention::{AttentionParams, HeadKind};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm_sq, Matrix};
use crate::scalar::Scalar;

pub fn cka<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>) -> Result<T> {
    if x.rows() != y.rows() {
        return Err(Error::UndefinedSimilarity(format!(
            "row counts differ: {} vs {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.is_zero() || y.is_zero() {
        return Err(Error::UndefinedSimilarity("zero matrix".into()));
    }
    let cross = frobenius_norm_sq(&x.tmm(y));
    let xx = frobenius_norm_sq(&x.tmm(x));
    let yy = frobenius_norm_sq(&y.tmm(y));
    // sqrt(v·v) == v exactly, so cka(x, x) is exactly one
    let denom = (xx * yy).sqrt();
    if denom.is_finite() && denom > T::zero() {
        Ok(cross / denom)
    } else {
        Ok(cross / (xx.sqrt() * yy.sqrt()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix<T> {
    pub kind: HeadKind,
    pub values: Matrix<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn size(&self) -> usize {
        self.values.rows()
    }
}

/// Pairwise CKA between the heads of one kind in one layer.
pub fn head_similarity_matrix<T: Scalar>(
    params: &AttentionParams<T>,
    layer: usize,
    kind: HeadKind,
) -> Result<SimilarityMatrix<T>> {
    let l = params.layers.get(layer).ok_or_else(|| {
        Error::Domain(format!(
            "layer {layer} out of range ({} layers)",
            params.layers.len()
        ))
    })?;
    let heads = l.heads(kind);
    let n = heads.len();
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        values[(i, i)] = cka(&heads[i], &heads[i])?;
        for j in i + 1..n {
            let s = cka(&heads[i], &heads[j])?;
            values[(i, j)] = s;
            values[(j, i)] = s;
        }
    }
    Ok(SimilarityMatrix { kind, values })
}

/// Mean of the strictly upper-triangular similarities.
pub fn layer_redundancy<T: Scalar>(sim: &SimilarityMatrix<T>) -> Result<T> {
    let n = sim.size();
    if n < 2 {
        return Err(Error::UndefinedRedundancy(n));
    }
    let mut total = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            total += sim.values[(i, j)];
        }
    }
    Ok(total * T::lit(2.0) / T::from_count(n * (n - 1)))
}

/// Redundancy of every layer for query, key and value heads.
pub fn redundancy_table<T: Scalar>(params: &AttentionParams<T>) -> Result<Vec<[T; 3]>> {
    (0..params.layers.len())
        .map(|l| {
            let r = |k| layer_redundancy(&head_similarity_matrix(params, l, k)?);
            Ok([r(HeadKind::Query)?, r(HeadKind::Key)?, r(HeadKind::Value)?])
        })
        .collect()
}
