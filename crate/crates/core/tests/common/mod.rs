#![allow(dead_code)]

use deltaforge_core::delta::TensorSelection;
use deltaforge_core::probe::{Objective, Probe, ProbeSpec};
use deltaforge_core::sweep::{DataConfig, ProbeSetup, TrainedProbe, TrainingConfig};
use deltaforge_core::{DeltaSet, NamedTensorMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// mlp stopped a few steps into fine-tuning: the delta is small and the
/// gradient at `W_post` still points against it.
pub fn early_stopped_setup() -> ProbeSetup {
    ProbeSetup {
        probe: ProbeSpec::mlp(0),
        data: DataConfig::default(),
        training: TrainingConfig {
            steps_base: 300,
            steps_finetune: 5,
            lr: 0.1,
        },
    }
}

/// Longer fine-tune whose delta overshoots along its own line, so scaling it
/// up eventually hurts.
pub fn extrapolation_setup() -> ProbeSetup {
    ProbeSetup {
        training: TrainingConfig {
            steps_finetune: 100,
            ..early_stopped_setup().training
        },
        ..early_stopped_setup()
    }
}

pub fn train(setup: &ProbeSetup) -> (TrainedProbe, DeltaSet) {
    let trained = setup.train().expect("training");
    let delta = trained.delta(&TensorSelection::All).expect("delta");
    (trained, delta)
}

pub fn zoo() -> Vec<ProbeSpec> {
    vec![ProbeSpec::linreg(0), ProbeSpec::logreg(0), ProbeSpec::mlp(0)]
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller keeps the oracle independent of the library's sampler.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_point(probe: &Probe, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..probe.num_params()).map(|_| scale * normal(rng)).collect()
}

/// Central differences with step `h`.
pub fn finite_difference(obj: &impl Objective, w: &[f64], h: f64) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = obj.loss(&x);
            x[i] = orig - h;
            let down = obj.loss(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n|` relative to the largest analytic entry of the same
/// parameter tensor. Entries far below that scale sit under the roundoff
/// floor of central differences and carry no per-element relative meaning.
pub fn gradient_check_error(probe: &Probe, analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for slot in probe.slots() {
        let a = &analytic[slot.range()];
        let n = &numeric[slot.range()];
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (x, y) in a.iter().zip(n) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    worst
}

pub fn random_shape(rng: &mut impl Rng) -> Vec<usize> {
    let rank = rng.random_range(0..=3);
    (0..rank).map(|_| rng.random_range(1..=5)).collect()
}

pub fn random_map(rng: &mut impl Rng) -> NamedTensorMap {
    let n = rng.random_range(0..=6);
    let mut map = NamedTensorMap::new();
    for i in 0..n {
        let shape = random_shape(rng);
        let count: usize = shape.iter().product();
        let values = (0..count)
            .map(|_| loop {
                let v = f32::from_bits(rng.random::<u32>());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        map.insert(format!("t{i}.{}", rng.random_range(0..1000)), Tensor::new(shape, values).unwrap());
    }
    map
}

pub fn vector_delta(values: Vec<f32>) -> DeltaSet {
    let n = values.len();
    let mut map = NamedTensorMap::new();
    map.insert("w", Tensor::new(vec![n], values).unwrap());
    DeltaSet::from_tensors(map)
}

pub fn matrix_delta(rows: usize, cols: usize, values: Vec<f32>) -> DeltaSet {
    let mut map = NamedTensorMap::new();
    map.insert("w", Tensor::new(vec![rows, cols], values).unwrap());
    DeltaSet::from_tensors(map)
}

pub fn random_values(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| normal(rng) as f32).collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// Indices of the `count` largest magnitudes by full sort, lower index
/// first among equals.
pub fn top_magnitude_oracle(values: &[f32], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut kept = idx[..count].to_vec();
    kept.sort_unstable();
    kept
}
