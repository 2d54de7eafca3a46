//! Synthetic datasets drawn from a hidden teacher model.
//!
//! The teacher has the probe's own architecture with parameters derived from
//! the probe seed. A non-zero `shift` translates the teacher along a fixed
//! seeded direction, which is how the fine-tuning distribution differs from
//! the base one. Inputs, noise and label draws depend only on the dataset
//! seed, so two datasets with the same seed differ only through the teacher.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::predict;
use super::{Family, LossKind, Probe, ProbeSpec};
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

/// Standard deviation of the additive target noise for regression probes.
pub const NOISE_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Targets {
    /// Real-valued targets, `n × dim` row-major.
    Values { dim: usize, values: Vec<f64> },
    Labels { classes: usize, labels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub probe_seed: u64,
    pub n_samples: usize,
    pub shift: f64,
    pub seed: u64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    /// `n_samples × n_features`, row-major.
    pub inputs: Vec<f64>,
    pub n_samples: usize,
    pub n_features: usize,
    pub targets: Targets,
    pub generator: Option<GeneratorRecord>,
}

impl ProbeDataset {
    pub fn regression(inputs: Vec<f64>, n_features: usize, values: Vec<f64>, dim: usize) -> Result<Self> {
        Self::checked(inputs, n_features, Targets::Values { dim, values })
    }

    pub fn classification(
        inputs: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        Self::checked(inputs, n_features, Targets::Labels { classes, labels })
    }

    fn checked(inputs: Vec<f64>, n_features: usize, targets: Targets) -> Result<Self> {
        if n_features == 0 || inputs.is_empty() || inputs.len() % n_features != 0 {
            return Err(Error::InvalidSpec(format!(
                "{} input values do not form rows of {n_features} features",
                inputs.len()
            )));
        }
        let n = inputs.len() / n_features;
        let ok = match &targets {
            Targets::Values { dim, values } => *dim > 0 && values.len() == n * dim,
            Targets::Labels { classes, labels } => {
                labels.len() == n && labels.iter().all(|&l| l < *classes)
            }
        };
        if !ok {
            return Err(Error::InvalidSpec("targets do not match the inputs".into()));
        }
        let finite = inputs.iter().all(|v| v.is_finite())
            && match &targets {
                Targets::Values { values, .. } => values.iter().all(|v| v.is_finite()),
                Targets::Labels { .. } => true,
            };
        if !finite {
            return Err(Error::InvalidSpec("dataset contains non-finite values".into()));
        }
        Ok(Self {
            inputs,
            n_samples: n,
            n_features,
            targets,
            generator: None,
        })
    }
}

/// Teacher parameters (before any shift) and the unit shift direction.
fn teacher(probe: &Probe) -> (Vec<f64>, Vec<f64>) {
    let spec = probe.spec();
    let n_layers = probe.sizes().len() - 1;
    let mut base = vec![0.0; probe.num_params()];
    let mut direction = vec![0.0; probe.num_params()];
    for slot in probe.slots() {
        let is_weight = slot.shape.len() == 2;
        let last = slot.name.starts_with(&format!("layers.{}.", n_layers - 1));
        let std = if is_weight {
            let gain = match (spec.family, last) {
                (Family::Linreg, _) => 4.0,
                (Family::Logreg, _) => 2.0,
                (Family::Mlp, false) => 1.5,
                (Family::Mlp, true) => 3.0,
            };
            gain / (slot.shape[0] as f64).sqrt()
        } else {
            0.5
        };
        for (out, tag) in [(&mut base, "teacher/"), (&mut direction, "shift/")] {
            let mut rng = substream(spec.seed, Purpose::Data, &format!("{tag}{}", slot.name));
            for v in &mut out[slot.range()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        }
    }
    (base, direction)
}

/// Draws `n_samples` standard-normal inputs and teacher targets.
pub fn generate_dataset(spec: &ProbeSpec, n_samples: usize, shift: f64, seed: u64) -> Result<ProbeDataset> {
    if n_samples == 0 {
        return Err(Error::InvalidSpec("n_samples must be at least 1".into()));
    }
    if !shift.is_finite() {
        return Err(Error::InvalidSpec(format!("shift must be finite, got {shift}")));
    }
    let probe = Probe::new(spec)?;
    let d = probe.sizes()[0];
    let out_dim = *probe.sizes().last().unwrap();

    let (base, direction) = teacher(&probe);
    let params: Vec<f64> = base
        .iter()
        .zip(&direction)
        .map(|(b, u)| b + shift * u)
        .collect();

    let mut rng = substream(seed, Purpose::Data, "inputs");
    let inputs: Vec<f64> = (0..n_samples * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let outputs = predict(&probe, &params, &inputs, n_samples);

    let mut dataset = match spec.loss_kind() {
        LossKind::Mse => {
            let mut rng = substream(seed, Purpose::Data, "noise");
            let values = outputs
                .iter()
                .map(|&y| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    y + NOISE_SCALE * e
                })
                .collect();
            ProbeDataset::regression(inputs, d, values, out_dim)?
        }
        LossKind::CrossEntropy => {
            let mut rng = substream(seed, Purpose::Data, "labels");
            let labels = outputs
                .chunks_exact(out_dim)
                .map(|logits| sample_softmax(logits, rng.random::<f64>()))
                .collect();
            ProbeDataset::classification(inputs, d, labels, out_dim)?
        }
    };
    dataset.generator = Some(GeneratorRecord {
        probe_seed: spec.seed,
        n_samples,
        shift,
        seed,
        noise_scale: NOISE_SCALE,
    });
    Ok(dataset)
}

/// Inverse-CDF draw from `softmax(logits)` with uniform `u`.
fn sample_softmax(logits: &[f64], u: f64) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return k;
        }
    }
    logits.len() - 1
}
