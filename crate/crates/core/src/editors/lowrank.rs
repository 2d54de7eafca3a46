//! Truncated-SVD reconstruction of delta matrices.

use nalgebra::DMatrix;
use serde_json::json;

use super::{per_tensor, EditOutcome, OpRecord};
use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Views a tensor of rank >= 2 as a `shape[0] × rest` matrix (f64).
pub fn fold_to_matrix(name: &str, t: &Tensor) -> Result<DMatrix<f64>> {
    if t.rank() < 2 {
        return Err(Error::NotAMatrix {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    }
    let rows = t.shape()[0];
    let cols = t.numel() / rows.max(1);
    Ok(DMatrix::from_row_iterator(
        rows,
        cols,
        t.values().iter().map(|&v| f64::from(v)),
    ))
}

/// Keeps the `rank` largest singular triplets of every tensor. Only the
/// reconstruction is defined; with repeated singular values any orthonormal
/// basis of the shared subspace gives the same result.
pub fn svd_truncate(delta: &DeltaSet, rank: usize) -> Result<EditOutcome> {
    let edited = per_tensor(delta, |name, t| {
        let a = fold_to_matrix(name, t)?;
        let max = a.nrows().min(a.ncols());
        if rank == 0 || rank > max {
            return Err(Error::RankOutOfRange {
                name: name.to_string(),
                rank,
                max,
            });
        }
        let svd = a.clone().svd(true, true);
        let u = svd.u.as_ref().expect("requested U");
        let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| {
            svd.singular_values[j]
                .total_cmp(&svd.singular_values[i])
                .then(i.cmp(&j))
        });
        let mut recon = DMatrix::<f64>::zeros(a.nrows(), a.ncols());
        for &i in order.iter().take(rank) {
            let sigma = svd.singular_values[i];
            recon += sigma * u.column(i) * v_t.row(i);
        }
        // Back to row-major order of the original tensor.
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..recon.nrows() {
            for c in 0..recon.ncols() {
                out.push(recon[(r, c)] as f32);
            }
        }
        Ok(out)
    })?;
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord { op: "svd".into(), params: json!({ "rank": rank }), seed: None },
    ))
}
