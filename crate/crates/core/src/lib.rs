//! Delta-parameter editing for post-trained models and a Riemann-sum
//! estimate of the loss change each edit causes.
//!
//! A delta is `W_post - W_pre` over named tensors. Editing operators turn a
//! delta into an edited delta plus the perturbation `edited - delta`; the
//! estimator then integrates the probe gradient along that perturbation.

pub mod checkpoint;
pub mod delta;
pub mod editors;
pub mod error;
pub mod probe;
pub mod riemann;
pub mod rng;
pub mod sweep;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use delta::{apply_delta, compute_delta, DeltaSet, DeltaSource, TensorSelection};
pub use editors::{EditOp, EditOutcome, OpRecord};
pub use error::{Error, Result};
pub use probe::{generate_dataset, simulate_post_training, Probe, ProbeDataset, ProbeSpec};
pub use riemann::{estimate_delta_loss, exact_delta_loss, frobenius_inner, RiemannEstimate};
pub use tensor::{NamedTensorMap, Tensor};
pub use sweep::{emit_report, run_sweep, ProbeSetup, SweepConfig, SweepRow};
