//! Fixtures shared by the benchmarks.

use deltaforge_core::delta::TensorSelection;
use deltaforge_core::probe::ProbeSpec;
use deltaforge_core::sweep::{DataConfig, ProbeSetup, TrainedProbe, TrainingConfig};
use deltaforge_core::DeltaSet;

/// Default mlp probe after a short fine-tune, with the delta of its weight
/// matrices.
pub fn trained_mlp() -> (TrainedProbe, DeltaSet) {
    let setup = ProbeSetup {
        probe: ProbeSpec::mlp(0),
        data: DataConfig::default(),
        training: TrainingConfig {
            steps_base: 300,
            steps_finetune: 5,
            lr: 0.1,
        },
    };
    let trained = setup.train().expect("probe trains");
    let delta = trained.delta(&TensorSelection::MatricesOnly).expect("delta");
    (trained, delta)
}
