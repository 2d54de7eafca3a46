//! Differentiable toy models standing in for a post-trained network.
//!
//! A probe is a linear regression, a softmax regression or a small MLP. All
//! arithmetic is f64 over a flat parameter vector laid out in canonical
//! (lexicographic) tensor order; checkpoints are fp32 and are widened on the
//! way in.

mod data;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensorMap, Tensor};

pub use data::{generate_dataset, GeneratorRecord, ProbeDataset, Targets};
pub use model::{BoundProbe, Objective};
pub use train::{simulate_post_training, TrainRecord, CONVERGENCE_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linreg,
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Probe description. `layer_sizes` and `loss` fall back to per-family
/// defaults when omitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub seed: u64,
}

impl ProbeSpec {
    pub fn linreg(seed: u64) -> Self {
        Self {
            family: Family::Linreg,
            layer_sizes: vec![16, 1],
            activation: Activation::Tanh,
            loss: Some(LossKind::Mse),
            seed,
        }
    }

    pub fn logreg(seed: u64) -> Self {
        Self {
            family: Family::Logreg,
            layer_sizes: vec![16, 4],
            activation: Activation::Tanh,
            loss: Some(LossKind::CrossEntropy),
            seed,
        }
    }

    /// Default MLP: 16 → 64 → 16 with tanh, 2,128 parameters.
    pub fn mlp(seed: u64) -> Self {
        Self {
            family: Family::Mlp,
            layer_sizes: vec![16, 64, 16],
            activation: Activation::Tanh,
            loss: Some(LossKind::CrossEntropy),
            seed,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        if !self.layer_sizes.is_empty() {
            return self.layer_sizes.clone();
        }
        match self.family {
            Family::Linreg => vec![16, 1],
            Family::Logreg => vec![16, 4],
            Family::Mlp => vec![16, 64, 16],
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss.unwrap_or(match self.family {
            Family::Linreg => LossKind::Mse,
            Family::Logreg | Family::Mlp => LossKind::CrossEntropy,
        })
    }

    pub fn has_bias(&self) -> bool {
        self.family != Family::Linreg
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = self.sizes();
        let loss = self.loss_kind();
        match self.family {
            Family::Linreg | Family::Logreg if sizes.len() != 2 => {
                return Err(Error::InvalidSpec(format!(
                    "{:?} takes exactly [inputs, outputs], got {sizes:?}",
                    self.family
                )))
            }
            Family::Mlp if sizes.len() < 2 => {
                return Err(Error::InvalidSpec(format!(
                    "mlp needs at least two layer sizes, got {sizes:?}"
                )))
            }
            _ => {}
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!("zero-width layer in {sizes:?}")));
        }
        match (self.family, loss) {
            (Family::Linreg, LossKind::CrossEntropy) => {
                return Err(Error::InvalidSpec("linreg pairs with mse".into()))
            }
            (Family::Logreg, LossKind::Mse) => {
                return Err(Error::InvalidSpec("logreg pairs with cross_entropy".into()))
            }
            _ => {}
        }
        if loss == LossKind::CrossEntropy && *sizes.last().unwrap() < 2 {
            return Err(Error::InvalidSpec(
                "cross_entropy needs at least two output classes".into(),
            ));
        }
        Ok(())
    }
}

/// One parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("layers.{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("layers.{layer}.bias")
}

/// A validated probe with its parameter layout.
#[derive(Debug, Clone)]
pub struct Probe {
    spec: ProbeSpec,
    sizes: Vec<usize>,
    slots: Vec<ParamSlot>,
    num_params: usize,
}

impl Probe {
    pub fn new(spec: &ProbeSpec) -> Result<Self> {
        spec.validate()?;
        let sizes = spec.sizes();
        let mut named = Vec::new();
        for l in 0..sizes.len() - 1 {
            named.push((weight_name(l), vec![sizes[l], sizes[l + 1]]));
            if spec.has_bias() {
                named.push((bias_name(l), vec![sizes[l + 1]]));
            }
        }
        named.sort();
        let mut offset = 0;
        let slots = named
            .into_iter()
            .map(|(name, shape)| {
                let slot = ParamSlot { name, shape, offset };
                offset += slot.len();
                slot
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            sizes,
            slots,
            num_params: offset,
        })
    }

    pub fn spec(&self) -> &ProbeSpec {
        &self.spec
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Widens a checkpoint into the flat layout. Names and shapes must match
    /// exactly.
    pub fn flatten(&self, params: &NamedTensorMap) -> Result<Vec<f64>> {
        if params.len() != self.slots.len() {
            return Err(Error::LayoutMismatch(format!(
                "expected {} tensors, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        let mut flat = vec![0.0; self.num_params];
        for slot in &self.slots {
            let t = params
                .get(&slot.name)
                .ok_or_else(|| Error::LayoutMismatch(format!("missing {:?}", slot.name)))?;
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::LayoutMismatch(format!(
                    "{:?} has shape {:?}, expected {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                )));
            }
            for (dst, &v) in flat[slot.range()].iter_mut().zip(t.values()) {
                *dst = f64::from(v);
            }
        }
        Ok(flat)
    }

    /// Widens a subset of parameters (e.g. a perturbation over selected
    /// tensors); absent tensors are zero.
    pub fn flatten_partial(&self, params: &NamedTensorMap) -> Result<Vec<f64>> {
        let mut flat = vec![0.0; self.num_params];
        for (name, t) in params.iter() {
            let slot = self
                .slot(name)
                .ok_or_else(|| Error::LayoutMismatch(format!("unknown tensor {name:?}")))?;
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::LayoutMismatch(format!(
                    "{name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape
                )));
            }
            for (dst, &v) in flat[slot.range()].iter_mut().zip(t.values()) {
                *dst = f64::from(v);
            }
        }
        Ok(flat)
    }

    /// Rounds a flat vector to an fp32 checkpoint.
    pub fn unflatten(&self, flat: &[f64]) -> NamedTensorMap {
        assert_eq!(flat.len(), self.num_params, "flat parameter length");
        self.slots
            .iter()
            .map(|slot| {
                let values = flat[slot.range()].iter().map(|&v| v as f32).collect();
                (
                    slot.name.clone(),
                    Tensor::new(slot.shape.clone(), values).expect("slot shape"),
                )
            })
            .collect()
    }

    pub fn bind<'a>(&'a self, data: &'a ProbeDataset) -> Result<BoundProbe<'a>> {
        BoundProbe::new(self, data)
    }
}

/// Mean loss of `params` on `data`.
pub fn loss(spec: &ProbeSpec, params: &NamedTensorMap, data: &ProbeDataset) -> Result<f64> {
    let probe = Probe::new(spec)?;
    let w = probe.flatten(params)?;
    Ok(probe.bind(data)?.loss(&w))
}

/// Analytic gradient of [`loss`], in the layout of `params`.
pub fn grad(spec: &ProbeSpec, params: &NamedTensorMap, data: &ProbeDataset) -> Result<NamedTensorMap> {
    let probe = Probe::new(spec)?;
    let w = probe.flatten(params)?;
    let g = probe.bind(data)?.grad(&w);
    Ok(probe.unflatten(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_zoo_layouts() {
        assert_eq!(Probe::new(&ProbeSpec::linreg(0)).unwrap().num_params(), 16);
        assert_eq!(Probe::new(&ProbeSpec::logreg(0)).unwrap().num_params(), 68);
        let mlp = Probe::new(&ProbeSpec::mlp(0)).unwrap();
        assert_eq!(mlp.num_params(), 16 * 64 + 64 + 64 * 16 + 16);
        let names: Vec<_> = mlp.slots().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            ["layers.0.bias", "layers.0.weight", "layers.1.bias", "layers.1.weight"]
        );
    }

    #[test]
    fn invalid_specs() {
        let mut s = ProbeSpec::linreg(0);
        s.loss = Some(LossKind::CrossEntropy);
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        let mut s = ProbeSpec::logreg(0);
        s.loss = Some(LossKind::Mse);
        assert!(s.validate().is_err());
        let mut s = ProbeSpec::mlp(0);
        s.layer_sizes = vec![16];
        assert!(s.validate().is_err());
        s.layer_sizes = vec![16, 0, 4];
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let s: ProbeSpec = serde_json::from_str(r#"{"family":"mlp","seed":3}"#).unwrap();
        assert_eq!(s.sizes(), [16, 64, 16]);
        assert_eq!(s.loss_kind(), LossKind::CrossEntropy);
        assert_eq!(s.activation, Activation::Tanh);
    }

    #[test]
    fn flatten_round_trip_and_mismatch() {
        let probe = Probe::new(&ProbeSpec::logreg(0)).unwrap();
        let flat: Vec<f64> = (0..probe.num_params()).map(|i| i as f64 * 0.5).collect();
        let map = probe.unflatten(&flat);
        assert_eq!(probe.flatten(&map).unwrap(), flat);

        let mut bad = map.clone();
        bad.remove("layers.0.bias");
        assert!(matches!(probe.flatten(&bad), Err(Error::LayoutMismatch(_))));
        let partial = probe.flatten_partial(&bad).unwrap();
        assert!(partial[0..4].iter().all(|&v| v == 0.0));
    }
}
