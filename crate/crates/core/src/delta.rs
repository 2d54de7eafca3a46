//! Delta parameters: computing, applying, masking and summarizing them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::tensor::{numel, NamedTensorMap, Tensor};

pub const META_SOURCE_PRE: &str = "source_pre";
pub const META_SOURCE_POST: &str = "source_post";
pub const META_SELECTION: &str = "selection";

/// Which tensors of a checkpoint take part in editing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TensorSelection {
    All,
    /// Tensors of rank >= 2.
    #[default]
    MatricesOnly,
    Names(Vec<String>),
}

impl TensorSelection {
    /// Resolves the selection against a checkpoint pair. Every resolved name
    /// must exist in both maps.
    pub fn resolve(&self, pre: &NamedTensorMap, post: &NamedTensorMap) -> Result<Vec<String>> {
        let names: Vec<String> = match self {
            TensorSelection::All => union_names(pre, post, |_| true),
            TensorSelection::MatricesOnly => union_names(pre, post, |t| t.rank() >= 2),
            TensorSelection::Names(list) => {
                let mut list = list.clone();
                list.sort();
                list.dedup();
                list
            }
        };
        for name in &names {
            pre.require(name)?;
            post.require(name)?;
        }
        Ok(names)
    }

    /// Whether `name` (with the given tensor) is selected.
    pub fn selects(&self, name: &str, tensor: &Tensor) -> bool {
        match self {
            TensorSelection::All => true,
            TensorSelection::MatricesOnly => tensor.rank() >= 2,
            TensorSelection::Names(list) => list.iter().any(|n| n == name),
        }
    }
}

fn union_names(
    pre: &NamedTensorMap,
    post: &NamedTensorMap,
    keep: impl Fn(&Tensor) -> bool,
) -> Vec<String> {
    let mut names: Vec<String> = pre
        .iter()
        .chain(post.iter())
        .filter(|(_, t)| keep(t))
        .map(|(n, _)| n.to_string())
        .collect();
    names.sort();
    names.dedup();
    names
}

impl fmt::Display for TensorSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorSelection::All => f.write_str("all"),
            TensorSelection::MatricesOnly => f.write_str("matrices"),
            TensorSelection::Names(list) => write!(f, "list:{}", list.join(",")),
        }
    }
}

impl FromStr for TensorSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TensorSelection::All),
            "matrices" => Ok(TensorSelection::MatricesOnly),
            _ => match s.strip_prefix("list:") {
                Some(rest) => Ok(TensorSelection::Names(
                    rest.split(',')
                        .filter(|n| !n.is_empty())
                        .map(str::to_string)
                        .collect(),
                )),
                None => Err(Error::InvalidConfig(format!(
                    "unknown selection {s:?} (expected all, matrices or list:a,b)"
                ))),
            },
        }
    }
}

impl Serialize for TensorSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TensorSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Identifiers of the checkpoints a delta was computed from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaSource {
    pub pre: String,
    pub post: String,
}

/// `W_post - W_pre` for every selected tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub tensors: NamedTensorMap,
    pub source: DeltaSource,
    pub selection: TensorSelection,
}

impl DeltaSet {
    /// Wraps existing tensors with no provenance, selecting all of them.
    pub fn from_tensors(tensors: NamedTensorMap) -> Self {
        let selection = TensorSelection::Names(tensors.names().map(str::to_string).collect());
        Self {
            tensors,
            source: DeltaSource::default(),
            selection,
        }
    }

    /// Same provenance, new tensors.
    pub fn with_tensors(&self, tensors: NamedTensorMap) -> Self {
        Self {
            tensors,
            source: self.source.clone(),
            selection: self.selection.clone(),
        }
    }

    /// Checkpoint form with provenance stored in metadata.
    pub fn to_checkpoint(&self) -> NamedTensorMap {
        let mut map = self.tensors.clone();
        map.set_metadata(META_SOURCE_PRE, self.source.pre.clone());
        map.set_metadata(META_SOURCE_POST, self.source.post.clone());
        map.set_metadata(META_SELECTION, self.selection.to_string());
        map
    }

    /// Inverse of [`DeltaSet::to_checkpoint`]. Missing metadata falls back
    /// to an explicit list of the tensors present.
    pub fn from_checkpoint(map: NamedTensorMap) -> Result<Self> {
        let meta = map.metadata();
        let source = DeltaSource {
            pre: meta.get(META_SOURCE_PRE).cloned().unwrap_or_default(),
            post: meta.get(META_SOURCE_POST).cloned().unwrap_or_default(),
        };
        let selection = match meta.get(META_SELECTION) {
            Some(s) => s.parse()?,
            None => TensorSelection::Names(map.names().map(str::to_string).collect()),
        };
        Ok(Self {
            tensors: map,
            source,
            selection,
        })
    }
}

/// Elementwise `post - pre` over the selected tensors.
pub fn compute_delta(
    post: &NamedTensorMap,
    pre: &NamedTensorMap,
    selection: &TensorSelection,
) -> Result<DeltaSet> {
    let names = selection.resolve(pre, post)?;
    let mut tensors = NamedTensorMap::new();
    for name in names {
        let a = post.require(&name)?;
        let b = pre.require(&name)?;
        a.check_same_shape(b, &name)?;
        let values = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x - y)
            .collect();
        tensors.insert(name, a.with_values(values));
    }
    Ok(DeltaSet {
        tensors,
        source: DeltaSource::default(),
        selection: selection.clone(),
    })
}

/// `pre + delta` for tensors present in the delta; everything else is
/// copied through unchanged.
pub fn apply_delta(pre: &NamedTensorMap, edited: &DeltaSet) -> Result<NamedTensorMap> {
    let mut out = pre.clone();
    out.metadata_mut().clear();
    for (name, delta) in edited.tensors.iter() {
        let base = pre.require(name)?;
        base.check_same_shape(delta, name)?;
        let values = base
            .values()
            .iter()
            .zip(delta.values())
            .map(|(x, d)| x + d)
            .collect();
        out.insert(name, base.with_values(values));
    }
    Ok(out)
}

/// Bernoulli drop mask: 1.0 marks a dropped entry.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliMask {
    pub tensors: NamedTensorMap,
    pub p: f64,
    pub seed: u64,
}

pub(crate) fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidRate(p))
    }
}

/// Per-element uniform draws in `[0, 1)` for one tensor.
pub(crate) fn uniforms(seed: u64, purpose: Purpose, name: &str, n: usize) -> Vec<f64> {
    let mut rng = substream(seed, purpose, name);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Samples `M ~ Bernoulli(p)` for every shape.
pub fn sample_mask(shapes: &BTreeMap<String, Vec<usize>>, p: f64, seed: u64) -> Result<BernoulliMask> {
    check_rate(p)?;
    let mut tensors = NamedTensorMap::new();
    for (name, shape) in shapes {
        let values = uniforms(seed, Purpose::DropMask, name, numel(shape))
            .into_iter()
            .map(|u| if u < p { 1.0 } else { 0.0 })
            .collect();
        tensors.insert(name.clone(), Tensor::new(shape.clone(), values)?);
    }
    Ok(BernoulliMask { tensors, p, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub mean_abs: f64,
    pub l1: f64,
    pub l2: f64,
    pub positive_count: usize,
    pub negative_count: usize,
    pub zero_count: usize,
}

pub fn tensor_stats(values: &[f32]) -> DeltaStats {
    let mut l1 = 0.0f64;
    let mut sq = 0.0f64;
    let (mut pos, mut neg, mut zero) = (0, 0, 0);
    for &v in values {
        let v = f64::from(v);
        l1 += v.abs();
        sq += v * v;
        if v > 0.0 {
            pos += 1;
        } else if v < 0.0 {
            neg += 1;
        } else {
            zero += 1;
        }
    }
    DeltaStats {
        mean_abs: if values.is_empty() { 0.0 } else { l1 / values.len() as f64 },
        l1,
        l2: sq.sqrt(),
        positive_count: pos,
        negative_count: neg,
        zero_count: zero,
    }
}

pub fn delta_stats(delta: &DeltaSet) -> BTreeMap<String, DeltaStats> {
    delta
        .tensors
        .iter()
        .map(|(name, t)| (name.to_string(), tensor_stats(t.values())))
        .collect()
}
