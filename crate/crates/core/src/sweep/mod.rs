//! Parameter sweeps: train a probe once, apply every grid point's operator
//! for every seed, and record the estimated and exact loss change.

mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delta::{compute_delta, DeltaSet, TensorSelection};
use crate::editors::{BiasKey, BlockValue, EditOp};
use crate::error::{Error, Result};
use crate::probe::{self, generate_dataset, simulate_post_training, ProbeDataset, ProbeSpec, TrainRecord};
use crate::riemann::{estimate_with_exact, DEFAULT_SUBDIVISIONS};
use crate::tensor::NamedTensorMap;

pub use report::{emit_report, render_report, ReportFormat, CSV_HEADER};

/// Checkpoint metadata key holding the probe spec as JSON.
pub const META_PROBE_SPEC: &str = "probe_spec";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_samples: usize,
    /// Teacher shift of the fine-tuning distribution.
    pub shift: f64,
    pub base_seed: u64,
    pub finetune_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            shift: 1.0,
            base_seed: 0,
            finetune_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps_base: usize,
    pub steps_finetune: usize,
    pub lr: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps_base: 300,
            steps_finetune: 20,
            lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    #[serde(rename = "C")]
    pub subdivisions: usize,
    pub include_left_endpoint: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            subdivisions: DEFAULT_SUBDIVISIONS,
            include_left_endpoint: true,
        }
    }
}

/// Everything needed to reproduce a trained probe and its datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSetup {
    pub probe: ProbeSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

/// A trained probe with the datasets it was trained on. Losses are
/// measured on the fine-tuning data.
#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub spec: ProbeSpec,
    pub base: ProbeDataset,
    pub finetune: ProbeDataset,
    pub record: TrainRecord,
}

impl ProbeSetup {
    pub fn new(probe: ProbeSpec) -> Self {
        Self {
            probe,
            data: DataConfig::default(),
            training: TrainingConfig::default(),
        }
    }

    pub fn datasets(&self) -> Result<(ProbeDataset, ProbeDataset)> {
        self.probe.validate()?;
        let d = &self.data;
        Ok((
            generate_dataset(&self.probe, d.n_samples, 0.0, d.base_seed)?,
            generate_dataset(&self.probe, d.n_samples, d.shift, d.finetune_seed)?,
        ))
    }

    pub fn train(&self) -> Result<TrainedProbe> {
        let (base, finetune) = self.datasets()?;
        let t = &self.training;
        let record = simulate_post_training(
            &self.probe,
            &base,
            &finetune,
            t.steps_base,
            t.steps_finetune,
            t.lr,
        )?;
        Ok(TrainedProbe {
            spec: self.probe.clone(),
            base,
            finetune,
            record,
        })
    }
}

impl TrainedProbe {
    pub fn delta(&self, selection: &TensorSelection) -> Result<DeltaSet> {
        compute_delta(&self.record.w_post, &self.record.w_pre, selection)
    }

    /// `∇L(W_post)` on the fine-tuning data.
    pub fn gradient_at_post(&self) -> Result<NamedTensorMap> {
        probe::grad(&self.spec, &self.record.w_post, &self.finetune)
    }

    /// `(W_pre, W_post)` tagged with the probe spec.
    pub fn checkpoints(&self) -> Result<(NamedTensorMap, NamedTensorMap)> {
        let spec = serde_json::to_string(&self.spec)?;
        let mut pre = self.record.w_pre.clone();
        let mut post = self.record.w_post.clone();
        pre.set_metadata(META_PROBE_SPEC, spec.clone());
        post.set_metadata(META_PROBE_SPEC, spec);
        Ok((pre, post))
    }
}

/// Parameter lists for one experiment; the grid is their Cartesian product
/// in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", content = "grid", rename_all = "snake_case")]
pub enum Experiment {
    /// Drop-and-rescale over `p × k`; `k = 0` is plain DARE.
    DareGrid { p: Vec<f64>, k: Vec<f64> },
    /// Multi-bit quantization with `2^bits` blocks; 0 bits is BitDelta.
    BitdeltaBits {
        bits: Vec<u32>,
        #[serde(default)]
        value: BlockValue,
    },
    BitdeltaScale { factor: Vec<f64> },
    ExpoAlpha {
        alpha: Vec<f64>,
        #[serde(default)]
        allow_reversal: bool,
    },
    TiesFraction { keep: Vec<f64> },
    SvdRank { rank: Vec<usize> },
    BiasedAblation {
        p: Vec<f64>,
        k: Vec<f64>,
        bias_on: Vec<BiasKey>,
    },
}

impl Experiment {
    pub fn id(&self) -> &'static str {
        match self {
            Experiment::DareGrid { .. } => "dare_grid",
            Experiment::BitdeltaBits { .. } => "bitdelta_bits",
            Experiment::BitdeltaScale { .. } => "bitdelta_scale",
            Experiment::ExpoAlpha { .. } => "expo_alpha",
            Experiment::TiesFraction { .. } => "ties_fraction",
            Experiment::SvdRank { .. } => "svd_rank",
            Experiment::BiasedAblation { .. } => "biased_ablation",
        }
    }

    /// Operators in grid order.
    pub fn ops(&self) -> Result<Vec<EditOp>> {
        let ops: Vec<EditOp> = match self {
            Experiment::DareGrid { p, k } => p
                .iter()
                .flat_map(|&p| {
                    k.iter().map(move |&k| {
                        if k == 0.0 {
                            EditOp::Dare { p }
                        } else {
                            EditOp::Comp { p, k }
                        }
                    })
                })
                .collect(),
            Experiment::BitdeltaBits { bits, value } => bits
                .iter()
                .map(|&b| {
                    if b >= usize::BITS {
                        return Err(Error::InvalidConfig(format!("{b} bits is too many")));
                    }
                    Ok(EditOp::Multibit {
                        blocks: 1usize << b,
                        value: *value,
                    })
                })
                .collect::<Result<_>>()?,
            Experiment::BitdeltaScale { factor } => factor
                .iter()
                .map(|&factor| EditOp::BitdeltaScale { factor })
                .collect(),
            Experiment::ExpoAlpha {
                alpha,
                allow_reversal,
            } => alpha
                .iter()
                .map(|&alpha| EditOp::Expo {
                    alpha,
                    allow_reversal: *allow_reversal,
                })
                .collect(),
            Experiment::TiesFraction { keep } => {
                keep.iter().map(|&keep| EditOp::Ties { keep }).collect()
            }
            Experiment::SvdRank { rank } => rank.iter().map(|&rank| EditOp::Svd { rank }).collect(),
            Experiment::BiasedAblation { p, k, bias_on } => {
                let mut ops = Vec::new();
                for &p in p {
                    for &k in k {
                        for &bias_on in bias_on {
                            ops.push(EditOp::Biased { p, k, bias_on });
                        }
                    }
                }
                ops
            }
        };
        if ops.is_empty() {
            return Err(Error::InvalidConfig(format!("{} grid is empty", self.id())));
        }
        for op in &ops {
            op.validate()?;
        }
        Ok(ops)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub probe: ProbeSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(flatten)]
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub selection: TensorSelection,
}

impl SweepConfig {
    pub fn setup(&self) -> ProbeSetup {
        ProbeSetup {
            probe: self.probe.clone(),
            data: self.data.clone(),
            training: self.training.clone(),
        }
    }

    pub fn validate(&self) -> Result<Vec<EditOp>> {
        self.probe.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        crate::riemann::sample_points(
            self.estimator.subdivisions,
            self.estimator.include_left_endpoint,
        )?;
        self.experiment.ops()
    }
}

/// One operator application. Metrics are pooled over all edited tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experiment: String,
    pub op: String,
    pub params_json: String,
    pub seed: u64,
    pub riemann_estimate: f64,
    pub exact_delta_loss: f64,
    pub frobenius_error: f64,
    pub sparsity: f64,
    pub sign_flip_fraction: f64,
}

/// Runs the sweep. Rows come out ordered by grid position, then seed.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<SweepRow>> {
    let ops = config.validate()?;
    let trained = config.setup().train()?;
    let delta = trained.delta(&config.selection)?;
    let needs_gradient = ops.iter().any(|op| {
        matches!(
            op,
            EditOp::Biased {
                bias_on: BiasKey::ProductSign,
                ..
            }
        )
    });
    let gradient = if needs_gradient {
        Some(trained.gradient_at_post()?)
    } else {
        None
    };

    let jobs: Vec<(&EditOp, u64)> = ops
        .iter()
        .flat_map(|op| config.seeds.iter().map(move |&s| (op, s)))
        .collect();
    let est = &config.estimator;
    jobs.par_iter()
        .map(|&(op, seed)| {
            let outcome = op.apply(&delta, seed, gradient.as_ref())?;
            let estimate = estimate_with_exact(
                &trained.spec,
                &trained.finetune,
                &trained.record.w_post,
                &outcome.perturbation,
                est.subdivisions,
                est.include_left_endpoint,
            )?;
            let metrics = outcome.total_metrics();
            Ok(SweepRow {
                experiment: config.experiment.id().to_string(),
                op: outcome.op_record.op.clone(),
                params_json: serde_json::to_string(&outcome.op_record.params)?,
                seed,
                riemann_estimate: estimate.value,
                exact_delta_loss: estimate.exact.expect("exact value requested"),
                frobenius_error: metrics.frobenius_error,
                sparsity: metrics.sparsity_fraction,
                sign_flip_fraction: metrics.sign_flip_fraction,
            })
        })
        .collect()
}
