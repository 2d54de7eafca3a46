//! Sign-and-scale quantization of deltas.
//!
//! The 1-bit form replaces each tensor with `AVG(|ΔW|)·Sign(ΔW)`, the
//! single-scalar sign representation with the smallest L2 error. The
//! multi-bit form splits entries into magnitude-ordered blocks, each with its
//! own scale.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{magnitude_order, mean_abs, per_tensor, sign, EditOutcome, OpRecord};
use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

fn scaled_sign(values: &[f32], scale: f64) -> Vec<f32> {
    values.iter().map(|&d| (sign(d) * scale) as f32).collect()
}

/// Per-tensor `AVG(|ΔW|)·Sign(ΔW)`.
pub fn bitdelta(delta: &DeltaSet) -> EditOutcome {
    let edited = per_tensor(delta, |_, t| Ok(scaled_sign(t.values(), mean_abs(t.values()))))
        .expect("infallible");
    EditOutcome::from_edited(
        delta,
        edited,
        OpRecord { op: "bitdelta".into(), params: json!({}), seed: None },
    )
}

/// Like [`bitdelta`] with the scale multiplied by `factor`.
pub fn bitdelta_perturbed_scale(delta: &DeltaSet, factor: f64) -> Result<EditOutcome> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidFactor(factor));
    }
    let edited = per_tensor(delta, |_, t| {
        Ok(scaled_sign(t.values(), factor * mean_abs(t.values())))
    })?;
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord {
            op: "bitdelta-scale".into(),
            params: json!({ "factor": factor }),
            seed: None,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeDist {
    Normal,
    Uniform,
}

impl std::str::FromStr for MagnitudeDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(MagnitudeDist::Normal),
            "uniform" => Ok(MagnitudeDist::Uniform),
            _ => Err(Error::InvalidConfig(format!("unknown distribution {s:?}"))),
        }
    }
}

/// Replaces the single scale with a sampled magnitude matrix centred on
/// `m = AVG(|ΔW|)`: `|N(m, (spread·m)²)|` or `U(m - spread·m, m + spread·m)`
/// clamped at zero.
pub fn bitdelta_sampled_scale(
    delta: &DeltaSet,
    dist: MagnitudeDist,
    spread: f64,
    seed: u64,
) -> Result<EditOutcome> {
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidSpread(spread));
    }
    let edited = per_tensor(delta, |name, t| {
        let m = mean_abs(t.values());
        let width = spread * m;
        let mut rng = substream(seed, Purpose::Magnitude, name);
        Ok(t.values()
            .iter()
            .map(|&d| {
                let g = match dist {
                    MagnitudeDist::Normal => {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (m + width * z).abs()
                    }
                    MagnitudeDist::Uniform => {
                        let u: f64 = rand::Rng::random(&mut rng);
                        (m + width * (2.0 * u - 1.0)).max(0.0)
                    }
                };
                (sign(d) * g) as f32
            })
            .collect())
    })?;
    let dist_name = match dist {
        MagnitudeDist::Normal => "normal",
        MagnitudeDist::Uniform => "uniform",
    };
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord {
            op: "bitdelta-sample".into(),
            params: json!({ "dist": dist_name, "spread": spread }),
            seed: Some(seed),
        },
    ))
}

/// Block representative for [`multibit`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockValue {
    /// Mean magnitude of the block, re-signed per element.
    #[default]
    MagnitudeMean,
    /// Signed mean of the block, shared by every element in it.
    SignedMean,
}

/// Sizes of `blocks` contiguous equal-count blocks over `n` entries, larger
/// blocks first.
pub(crate) fn block_sizes(n: usize, blocks: usize) -> Vec<usize> {
    let blocks = blocks.min(n).max(1);
    let (q, r) = (n / blocks, n % blocks);
    (0..blocks).map(|b| if b < r { q + 1 } else { q }).collect()
}

/// Multi-bit quantization with `blocks` magnitude-ordered blocks per tensor
/// (`log2(blocks)` extra bits on top of the sign). One block is [`bitdelta`];
/// one entry per block reproduces the delta.
pub fn multibit(delta: &DeltaSet, blocks: usize, value: BlockValue) -> Result<EditOutcome> {
    if blocks == 0 {
        return Err(Error::InvalidBlockCount(blocks));
    }
    let edited = per_tensor(delta, |_, t| {
        let values = t.values();
        let order = magnitude_order(values);
        let mut out = vec![0.0f32; values.len()];
        let mut start = 0;
        for size in block_sizes(values.len(), blocks) {
            let mut members = order[start..start + size].to_vec();
            start += size;
            // Sum in element order so a single block matches `bitdelta` bit for bit.
            members.sort_unstable();
            match value {
                BlockValue::MagnitudeMean => {
                    let scale = members
                        .iter()
                        .map(|&i| f64::from(values[i]).abs())
                        .sum::<f64>()
                        / size as f64;
                    for &i in &members {
                        out[i] = (sign(values[i]) * scale) as f32;
                    }
                }
                BlockValue::SignedMean => {
                    let mean =
                        members.iter().map(|&i| f64::from(values[i])).sum::<f64>() / size as f64;
                    for &i in &members {
                        out[i] = mean as f32;
                    }
                }
            }
        }
        Ok(out)
    })?;
    let value_name = match value {
        BlockValue::MagnitudeMean => "magnitude_mean",
        BlockValue::SignedMean => "signed_mean",
    };
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord {
            op: "multibit".into(),
            params: json!({ "blocks": blocks, "value": value_name }),
            seed: None,
        },
    ))
}
