//! Delta-editing operators.
//!
//! Every operator is a pure transform from a [`DeltaSet`] to an
//! [`EditOutcome`] holding the edited delta `F(ΔW)`, the perturbation
//! `F(ΔW) - ΔW` it induces on top of the post-trained weights, an
//! [`OpRecord`] that regenerates it, and per-tensor metrics.
//!
//! Scalars are computed in f64 and rounded once to fp32. The perturbation is
//! the correctly rounded difference of the fp32 edited value and the fp32
//! delta, so `W_post + perturbation` lands on the edited model up to half an
//! ulp of the perturbation.

mod drop;
mod extrapolate;
mod lowrank;
mod prune;
mod quantize;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::tensor::{NamedTensorMap, Tensor};

pub use drop::{
    drop_only, drop_rescale, drop_rescale_with_mask, magnitude_aware_drop,
    magnitude_drop_probabilities, sign_biased_scale, BiasKey,
};
pub use extrapolate::expo;
pub use lowrank::{fold_to_matrix, svd_truncate};
pub use prune::{keep_count, ties_keep_indices, ties_prune};
pub use quantize::{
    bitdelta, bitdelta_perturbed_scale, bitdelta_sampled_scale, multibit, BlockValue,
    MagnitudeDist,
};

/// Serialized operator invocation: `{"op", "params", "seed"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op: String,
    pub params: Value,
    pub seed: Option<u64>,
}

/// Metadata key under which an op record is embedded in output checkpoints.
pub const META_OP_RECORD: &str = "deltaforge_op";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    /// Frobenius norm of the perturbation.
    pub frobenius_error: f64,
    /// Fraction of entries whose sign is strictly reversed.
    pub sign_flip_fraction: f64,
    /// Fraction of edited entries equal to zero.
    pub sparsity_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub edited: DeltaSet,
    pub perturbation: DeltaSet,
    pub op_record: OpRecord,
    pub metrics: BTreeMap<String, EditMetrics>,
}

impl EditOutcome {
    /// Assembles an outcome from the edited values of every tensor in `delta`.
    pub(crate) fn from_edited(
        delta: &DeltaSet,
        edited: BTreeMap<String, Vec<f32>>,
        op_record: OpRecord,
    ) -> Self {
        let mut edited_map = NamedTensorMap::new();
        let mut perturbation = NamedTensorMap::new();
        let mut metrics = BTreeMap::new();
        for (name, original) in delta.tensors.iter() {
            let values = &edited[name];
            debug_assert_eq!(values.len(), original.numel());
            let mut sq = 0.0f64;
            let (mut flips, mut zeros) = (0usize, 0usize);
            let diff: Vec<f32> = values
                .iter()
                .zip(original.values())
                .map(|(&e, &d)| {
                    let p = f64::from(e) - f64::from(d);
                    sq += p * p;
                    if (e < 0.0 && d > 0.0) || (e > 0.0 && d < 0.0) {
                        flips += 1;
                    }
                    if e == 0.0 {
                        zeros += 1;
                    }
                    p as f32
                })
                .collect();
            let n = original.numel().max(1) as f64;
            metrics.insert(
                name.to_string(),
                EditMetrics {
                    frobenius_error: sq.sqrt(),
                    sign_flip_fraction: flips as f64 / n,
                    sparsity_fraction: zeros as f64 / n,
                },
            );
            edited_map.insert(name, original.with_values(values.clone()));
            perturbation.insert(name, original.with_values(diff));
        }
        Self {
            edited: delta.with_tensors(edited_map),
            perturbation: delta.with_tensors(perturbation),
            op_record,
            metrics,
        }
    }

    /// Metrics pooled over all tensors: Frobenius norm of the whole
    /// perturbation and element-weighted fractions.
    pub fn total_metrics(&self) -> EditMetrics {
        let mut sq = 0.0;
        let mut flips = 0.0;
        let mut zeros = 0.0;
        let mut n = 0usize;
        for (name, t) in self.edited.tensors.iter() {
            let m = &self.metrics[name];
            let k = t.numel();
            sq += m.frobenius_error * m.frobenius_error;
            flips += m.sign_flip_fraction * k as f64;
            zeros += m.sparsity_fraction * k as f64;
            n += k;
        }
        let n = n.max(1) as f64;
        EditMetrics {
            frobenius_error: sq.sqrt(),
            sign_flip_fraction: flips / n,
            sparsity_fraction: zeros / n,
        }
    }

    /// Edited delta as a checkpoint, with the op record in its metadata.
    pub fn edited_checkpoint(&self) -> Result<NamedTensorMap> {
        self.tag(self.edited.to_checkpoint())
    }

    pub fn perturbation_checkpoint(&self) -> Result<NamedTensorMap> {
        self.tag(self.perturbation.to_checkpoint())
    }

    fn tag(&self, mut map: NamedTensorMap) -> Result<NamedTensorMap> {
        map.set_metadata(META_OP_RECORD, serde_json::to_string(&self.op_record)?);
        Ok(map)
    }
}

/// Applies `f` to each tensor of the delta, in canonical order.
pub(crate) fn per_tensor<F>(delta: &DeltaSet, mut f: F) -> Result<BTreeMap<String, Vec<f32>>>
where
    F: FnMut(&str, &Tensor) -> Result<Vec<f32>>,
{
    delta
        .tensors
        .iter()
        .map(|(name, t)| Ok((name.to_string(), f(name, t)?)))
        .collect()
}

/// `Sign(x)` with `Sign(0) = +1`.
#[inline]
pub(crate) fn sign(x: f32) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Mean magnitude, accumulated in f64 in element order.
pub(crate) fn mean_abs(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|&v| f64::from(v).abs()).sum::<f64>() / values.len() as f64
}

/// Indices ordered by ascending magnitude, ties by ascending index.
pub(crate) fn magnitude_order(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[a]
            .abs()
            .total_cmp(&values[b].abs())
            .then(a.cmp(&b))
    });
    idx
}

/// Every operator with its parameters. Seeds travel separately in the
/// [`OpRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "params", rename_all = "kebab-case")]
pub enum EditOp {
    /// Random drop without rescaling (reference for drop-and-rescale).
    Drop { p: f64 },
    Dare { p: f64 },
    Comp { p: f64, k: f64 },
    Della { p: f64, window: f64 },
    Biased { p: f64, k: f64, bias_on: BiasKey },
    Bitdelta,
    BitdeltaScale { factor: f64 },
    BitdeltaSample { dist: MagnitudeDist, spread: f64 },
    Multibit {
        blocks: usize,
        #[serde(default)]
        value: BlockValue,
    },
    Svd { rank: usize },
    Ties { keep: f64 },
    Expo {
        alpha: f64,
        #[serde(default)]
        allow_reversal: bool,
    },
}

impl EditOp {
    pub fn name(&self) -> &'static str {
        match self {
            EditOp::Drop { .. } => "drop",
            EditOp::Dare { .. } => "dare",
            EditOp::Comp { .. } => "comp",
            EditOp::Della { .. } => "della",
            EditOp::Biased { .. } => "biased",
            EditOp::Bitdelta => "bitdelta",
            EditOp::BitdeltaScale { .. } => "bitdelta-scale",
            EditOp::BitdeltaSample { .. } => "bitdelta-sample",
            EditOp::Multibit { .. } => "multibit",
            EditOp::Svd { .. } => "svd",
            EditOp::Ties { .. } => "ties",
            EditOp::Expo { .. } => "expo",
        }
    }

    /// Whether the operator draws random numbers.
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            EditOp::Drop { .. }
                | EditOp::Dare { .. }
                | EditOp::Comp { .. }
                | EditOp::Della { .. }
                | EditOp::BitdeltaSample { .. }
        )
    }

    pub fn record(&self, seed: u64) -> OpRecord {
        let value = serde_json::to_value(self).expect("edit ops serialize");
        let params = value
            .get("params")
            .cloned()
            .unwrap_or_else(|| Value::Object(Default::default()));
        OpRecord {
            op: self.name().to_string(),
            params,
            seed: self.is_stochastic().then_some(seed),
        }
    }

    pub fn from_record(record: &OpRecord) -> Result<Self> {
        let mut obj = serde_json::Map::new();
        obj.insert("op".into(), Value::String(record.op.clone()));
        let params_empty = record.params.as_object().is_some_and(|o| o.is_empty())
            || record.params.is_null();
        if !(params_empty && record.op == "bitdelta") {
            obj.insert("params".into(), record.params.clone());
        }
        serde_json::from_value(Value::Object(obj))
            .map_err(|e| Error::InvalidConfig(format!("op record: {e}")))
    }

    /// Checks the parameters without any tensor data. Ranks are only checked
    /// for being positive; the upper bound depends on the tensor shape.
    pub fn validate(&self) -> Result<()> {
        match *self {
            EditOp::Comp { k, .. } | EditOp::Biased { k, .. } if !k.is_finite() => {
                return Err(Error::InvalidConfig(format!("k must be finite, got {k}")))
            }
            EditOp::Svd { rank: 0 } => {
                return Err(Error::InvalidConfig("rank must be at least 1".into()))
            }
            _ => {}
        }
        let empty = DeltaSet::from_tensors(NamedTensorMap::new());
        self.apply(&empty, 0, Some(&NamedTensorMap::new())).map(|_| ())
    }

    /// Runs the operator. `gradient` is only consulted by product-sign bias.
    pub fn apply(
        &self,
        delta: &DeltaSet,
        seed: u64,
        gradient: Option<&NamedTensorMap>,
    ) -> Result<EditOutcome> {
        let mut outcome = match *self {
            EditOp::Drop { p } => drop_only(delta, p, seed)?,
            EditOp::Dare { p } => drop_rescale(delta, p, 0.0, seed)?,
            EditOp::Comp { p, k } => drop_rescale(delta, p, k, seed)?,
            EditOp::Della { p, window } => magnitude_aware_drop(delta, p, window, seed)?,
            EditOp::Biased { p, k, bias_on } => sign_biased_scale(delta, p, k, bias_on, gradient)?,
            EditOp::Bitdelta => bitdelta(delta),
            EditOp::BitdeltaScale { factor } => bitdelta_perturbed_scale(delta, factor)?,
            EditOp::BitdeltaSample { dist, spread } => {
                bitdelta_sampled_scale(delta, dist, spread, seed)?
            }
            EditOp::Multibit { blocks, value } => multibit(delta, blocks, value)?,
            EditOp::Svd { rank } => svd_truncate(delta, rank)?,
            EditOp::Ties { keep } => ties_prune(delta, keep)?,
            EditOp::Expo {
                alpha,
                allow_reversal,
            } => expo(delta, alpha, allow_reversal)?,
        };
        outcome.op_record = self.record(seed);
        Ok(outcome)
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    pub fn delta(entries: &[(&str, &[usize], &[f32])]) -> DeltaSet {
        DeltaSet::from_tensors(
            entries
                .iter()
                .map(|(n, s, v)| (n.to_string(), Tensor::new(s.to_vec(), v.to_vec()).unwrap()))
                .collect(),
        )
    }

    pub fn vector(values: &[f32]) -> DeltaSet {
        delta(&[("w", &[values.len()], values)])
    }

    pub fn edited<'a>(o: &'a EditOutcome, name: &str) -> &'a [f32] {
        o.edited.tensors.get(name).unwrap().values()
    }

    pub fn perturbation<'a>(o: &'a EditOutcome, name: &str) -> &'a [f32] {
        o.perturbation.tensors.get(name).unwrap().values()
    }
}
