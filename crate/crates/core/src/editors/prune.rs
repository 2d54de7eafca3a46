//! Magnitude pruning: keep the largest entries of each tensor, zero the rest.

use serde_json::json;

use super::{per_tensor, EditOutcome, OpRecord};
use crate::delta::DeltaSet;
use crate::error::{Error, Result};

/// `⌈keep·n⌉`, with a small allowance so that e.g. `0.3·1000` counts 300
/// despite binary rounding. Always at least one entry of a non-empty tensor.
pub fn keep_count(keep: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = keep * n as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    count.clamp(1, n)
}

/// Indices of the entries kept by [`ties_prune`], in ascending index order.
pub fn ties_keep_indices(values: &[f32], keep: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    });
    idx.truncate(keep_count(keep, values.len()));
    idx.sort_unstable();
    idx
}

/// Per-tensor top-`keep` fraction by magnitude, no rescaling. Ties go to the
/// lower index.
pub fn ties_prune(delta: &DeltaSet, keep: f64) -> Result<EditOutcome> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::InvalidFraction(keep));
    }
    let edited = per_tensor(delta, |_, t| {
        let mut out = vec![0.0f32; t.numel()];
        for i in ties_keep_indices(t.values(), keep) {
            out[i] = t.values()[i];
        }
        Ok(out)
    })?;
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord { op: "ties".into(), params: json!({ "keep": keep }), seed: None },
    ))
}
