//! Simulated post-training: full-batch gradient descent on a base dataset
//! yields the pre-trained checkpoint, continued descent on a shifted dataset
//! yields the post-trained one.

use rand_distr::{Distribution, StandardNormal};

use super::{Objective, Probe, ProbeDataset, ProbeSpec};
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::tensor::NamedTensorMap;

/// `‖∇L(W_post)‖₂ / ‖W_post‖₂` below this counts as converged.
pub const CONVERGENCE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub w_pre: NamedTensorMap,
    pub w_post: NamedTensorMap,
    pub steps_base: usize,
    pub steps_finetune: usize,
    pub learning_rate: f64,
    pub converged: bool,
    /// Relative gradient norm at `W_post` on the fine-tuning data.
    pub relative_grad_norm: f64,
}

/// Seeded initialization: weights `N(0, 1/fan_in)`, biases zero.
pub fn init_params(probe: &Probe) -> Vec<f64> {
    let mut w = vec![0.0; probe.num_params()];
    for slot in probe.slots() {
        if slot.shape.len() < 2 {
            continue;
        }
        let std = 1.0 / (slot.shape[0] as f64).sqrt();
        let mut rng = substream(probe.spec().seed, Purpose::Init, &slot.name);
        for v in &mut w[slot.range()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = std * z;
        }
    }
    w
}

fn descend(objective: &impl Objective, w: &mut [f64], steps: usize, lr: f64) -> Result<()> {
    for step in 0..steps {
        let g = objective.grad(w);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= lr * gi;
        }
        if !w.iter().all(|v| v.is_finite()) || !objective.loss(w).is_finite() {
            return Err(Error::DivergedTraining { step });
        }
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn simulate_post_training(
    spec: &ProbeSpec,
    base: &ProbeDataset,
    finetune: &ProbeDataset,
    steps_base: usize,
    steps_finetune: usize,
    lr: f64,
) -> Result<TrainRecord> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
    }
    let probe = Probe::new(spec)?;
    let base_obj = probe.bind(base)?;
    let ft_obj = probe.bind(finetune)?;

    let mut w = init_params(&probe);
    descend(&base_obj, &mut w, steps_base, lr)?;
    let w_pre = probe.unflatten(&w);

    // Continue from the stored fp32 checkpoint so the delta is measured from
    // exactly what was saved.
    let mut w = probe.flatten(&w_pre)?;
    descend(&ft_obj, &mut w, steps_finetune, lr)?;
    let w_post = probe.unflatten(&w);

    let w_post_flat = probe.flatten(&w_post)?;
    let g = ft_obj.grad(&w_post_flat);
    let wn = norm(&w_post_flat);
    let relative_grad_norm = if wn > 0.0 { norm(&g) / wn } else { f64::INFINITY };

    Ok(TrainRecord {
        w_pre,
        w_post,
        steps_base,
        steps_finetune,
        learning_rate: lr,
        converged: relative_grad_norm < CONVERGENCE_THRESHOLD,
        relative_grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::generate_dataset;

    #[test]
    fn no_finetune_steps_means_zero_delta() {
        let spec = ProbeSpec::logreg(3);
        let base = generate_dataset(&spec, 64, 0.0, 1).unwrap();
        let ft = generate_dataset(&spec, 64, 1.0, 2).unwrap();
        let rec = simulate_post_training(&spec, &base, &ft, 20, 0, 0.5).unwrap();
        assert!(rec.w_pre.bit_identical(&rec.w_post));
    }

    #[test]
    fn training_is_reproducible() {
        let spec = ProbeSpec::mlp(3);
        let base = generate_dataset(&spec, 32, 0.0, 1).unwrap();
        let ft = generate_dataset(&spec, 32, 1.0, 2).unwrap();
        let a = simulate_post_training(&spec, &base, &ft, 5, 3, 0.2).unwrap();
        let b = simulate_post_training(&spec, &base, &ft, 5, 3, 0.2).unwrap();
        assert!(a.w_pre.bit_identical(&b.w_pre));
        assert!(a.w_post.bit_identical(&b.w_post));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let spec = ProbeSpec::linreg(0);
        let base = generate_dataset(&spec, 32, 0.0, 1).unwrap();
        let err = simulate_post_training(&spec, &base, &base, 10_000, 0, 1e3).unwrap_err();
        assert!(matches!(err, Error::DivergedTraining { .. }));
        assert!(simulate_post_training(&spec, &base, &base, 1, 1, 0.0).is_err());
    }
}
