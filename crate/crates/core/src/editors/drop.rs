//! Random drop-and-rescale and its variants.
//!
//! With mask `M` (1 = dropped) the generalized operator is
//! `k·M⊙ΔW + (1 - k·p)/(1 - p)·(1 - M)⊙ΔW`; `k = 0` is plain drop-and-rescale.
//! Its expectation over masks is `ΔW` for any `k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{magnitude_order, per_tensor, EditOutcome, OpRecord};
use crate::delta::{check_rate, sample_mask, uniforms, DeltaSet};
use crate::error::{Error, Result};
use crate::rng::Purpose;
use crate::tensor::NamedTensorMap;

fn kept_multiplier(p: f64, k: f64) -> f64 {
    (1.0 - k * p) / (1.0 - p)
}

/// Generalized drop-and-rescale with a freshly sampled mask.
pub fn drop_rescale(delta: &DeltaSet, p: f64, k: f64, seed: u64) -> Result<EditOutcome> {
    let mask = sample_mask(&delta.tensors.shapes(), p, seed)?;
    let mut outcome = drop_rescale_with_mask(delta, &mask.tensors, p, k)?;
    outcome.op_record.seed = Some(seed);
    Ok(outcome)
}

/// Generalized drop-and-rescale with a caller-supplied mask.
pub fn drop_rescale_with_mask(
    delta: &DeltaSet,
    mask: &NamedTensorMap,
    p: f64,
    k: f64,
) -> Result<EditOutcome> {
    check_rate(p)?;
    let kept = kept_multiplier(p, k);
    let edited = per_tensor(delta, |name, t| {
        let m = mask.require(name)?;
        t.check_same_shape(m, name)?;
        Ok(t.values()
            .iter()
            .zip(m.values())
            .map(|(&d, &m)| {
                let scale = if m == 1.0 { k } else { kept };
                (scale * f64::from(d)) as f32
            })
            .collect())
    })?;
    let op = if k == 0.0 { "dare" } else { "comp" };
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord { op: op.into(), params: json!({ "p": p, "k": k }), seed: None },
    ))
}

/// Random drop with no rescaling: `(1 - M)⊙ΔW`.
pub fn drop_only(delta: &DeltaSet, p: f64, seed: u64) -> Result<EditOutcome> {
    let mask = sample_mask(&delta.tensors.shapes(), p, seed)?;
    let edited = per_tensor(delta, |name, t| {
        let m = mask.tensors.require(name)?;
        Ok(t.values()
            .iter()
            .zip(m.values())
            .map(|(&d, &m)| if m == 1.0 { 0.0 } else { d })
            .collect())
    })?;
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord { op: "drop".into(), params: json!({ "p": p }), seed: Some(seed) },
    ))
}

/// Per-element drop probabilities for the magnitude-aware drop: element at
/// rank quantile `q` (ascending magnitude) gets `p + window·(1 - 2q)`.
pub fn magnitude_drop_probabilities(values: &[f32], p: f64, window: f64) -> Vec<f64> {
    let n = values.len();
    let mut probs = vec![p; n];
    if n < 2 {
        return probs;
    }
    let denom = (n - 1) as f64;
    for (rank, idx) in magnitude_order(values).into_iter().enumerate() {
        let q = rank as f64 / denom;
        probs[idx] = p + window * (1.0 - 2.0 * q);
    }
    probs
}

/// Magnitude-aware drop: small-magnitude entries are dropped more often and
/// every kept entry is rescaled by `1 / (1 - p_ij)`. The uniform draws are
/// the ones [`sample_mask`] uses, so `window = 0` reproduces
/// [`drop_rescale`] with `k = 0` exactly.
pub fn magnitude_aware_drop(
    delta: &DeltaSet,
    p: f64,
    window: f64,
    seed: u64,
) -> Result<EditOutcome> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidRate(p));
    }
    if !(window >= 0.0 && window <= p.min(1.0 - p)) {
        return Err(Error::InvalidWindow { p, window });
    }
    let edited = per_tensor(delta, |name, t| {
        let probs = magnitude_drop_probabilities(t.values(), p, window);
        let draws = uniforms(seed, Purpose::DropMask, name, t.numel());
        Ok(t.values()
            .iter()
            .zip(probs.iter().zip(&draws))
            .map(|(&d, (&pij, &u))| {
                if u < pij {
                    0.0
                } else {
                    (kept_multiplier(pij, 0.0) * f64::from(d)) as f32
                }
            })
            .collect())
    })?;
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord {
            op: "della".into(),
            params: json!({ "p": p, "window": window }),
            seed: Some(seed),
        },
    ))
}

/// Which quantity decides the scaling branch in [`sign_biased_scale`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKey {
    DeltaSign,
    ProductSign,
}

/// Deterministic counterpart of drop-and-rescale: entries whose key is
/// negative are multiplied by `k`, the rest by `(1 - k·p)/(1 - p)`. The key
/// is `ΔW` itself or `ΔW ⊙ ∇L`.
pub fn sign_biased_scale(
    delta: &DeltaSet,
    p: f64,
    k: f64,
    bias_on: BiasKey,
    gradient: Option<&NamedTensorMap>,
) -> Result<EditOutcome> {
    check_rate(p)?;
    if bias_on == BiasKey::ProductSign && gradient.is_none() {
        return Err(Error::MissingGradient);
    }
    let kept = kept_multiplier(p, k);
    let edited: BTreeMap<String, Vec<f32>> = per_tensor(delta, |name, t| {
        let grad = match (bias_on, gradient) {
            (BiasKey::ProductSign, Some(g)) => {
                let g = g.require(name)?;
                t.check_same_shape(g, name)?;
                Some(g.values())
            }
            _ => None,
        };
        Ok(t.values()
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let key = match grad {
                    Some(g) => f64::from(d) * f64::from(g[i]),
                    None => f64::from(d),
                };
                let scale = if key < 0.0 { k } else { kept };
                (scale * f64::from(d)) as f32
            })
            .collect())
    })?;
    let key = match bias_on {
        BiasKey::DeltaSign => "delta_sign",
        BiasKey::ProductSign => "product_sign",
    };
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord {
            op: "biased".into(),
            params: json!({ "p": p, "k": k, "bias_on": key }),
            seed: None,
        },
    ))
}
