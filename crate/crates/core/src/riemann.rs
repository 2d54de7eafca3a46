//! Riemann-sum estimate of the loss change caused by a perturbation.
//!
//! For a perturbation `D` applied at `W`,
//! `L(W + D) - L(W) = ∫₀¹ ⟨∇L(W + tD), D⟩ dt`, which is approximated by the
//! left sum `(1/C) Σ_{c=0}^{C-1} ⟨∇L(W + (c/C)·D), D⟩`. The variant without
//! the left endpoint averages over `c = 1..C-1` only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delta::DeltaSet;
use crate::editors::OpRecord;
use crate::error::{Error, Result};
use crate::probe::{Objective, Probe, ProbeDataset, ProbeSpec};
use crate::tensor::NamedTensorMap;

pub const DEFAULT_SUBDIVISIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiemannEstimate {
    pub value: f64,
    /// `⟨∇L at each sample point, D⟩`, in subdivision order.
    pub terms: Vec<f64>,
    #[serde(rename = "C")]
    pub subdivisions: usize,
    pub sample_points: Vec<f64>,
    pub exact: Option<f64>,
}

/// JSON form of an estimate together with the edit that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub value: f64,
    pub exact: Option<f64>,
    #[serde(rename = "C")]
    pub subdivisions: usize,
    pub sample_points: Vec<f64>,
    pub terms: Vec<f64>,
    pub op_record: Option<OpRecord>,
}

impl RiemannEstimate {
    pub fn report(&self, op_record: Option<OpRecord>) -> EstimateReport {
        EstimateReport {
            value: self.value,
            exact: self.exact,
            subdivisions: self.subdivisions,
            sample_points: self.sample_points.clone(),
            terms: self.terms.clone(),
            op_record,
        }
    }
}

/// `Σ a_ij·b_ij` over all tensors in canonical order, accumulated in f64.
pub fn frobenius_inner(a: &NamedTensorMap, b: &NamedTensorMap) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LayoutMismatch(format!(
            "{} tensors vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0f64;
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        if na != nb {
            return Err(Error::MissingTensor(if na < nb { nb } else { na }.to_string()));
        }
        ta.check_same_shape(tb, na)?;
        for (&x, &y) in ta.values().iter().zip(tb.values()) {
            total += f64::from(x) * f64::from(y);
        }
    }
    Ok(total)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sample points `c/C`, starting at `c = 0` or `c = 1`.
pub fn sample_points(subdivisions: usize, include_left_endpoint: bool) -> Result<Vec<f64>> {
    let first = usize::from(!include_left_endpoint);
    if subdivisions == 0 || subdivisions <= first {
        return Err(Error::InvalidC(subdivisions));
    }
    Ok((first..subdivisions)
        .map(|c| c as f64 / subdivisions as f64)
        .collect())
}

/// Riemann estimate for any objective over flat parameters.
pub fn riemann_sum<O: Objective + Sync>(
    objective: &O,
    w_post: &[f64],
    perturbation: &[f64],
    subdivisions: usize,
    include_left_endpoint: bool,
) -> Result<RiemannEstimate> {
    let points = sample_points(subdivisions, include_left_endpoint)?;
    if w_post.len() != objective.num_params() || perturbation.len() != w_post.len() {
        return Err(Error::LayoutMismatch(format!(
            "objective has {} parameters, got point {} and perturbation {}",
            objective.num_params(),
            w_post.len(),
            perturbation.len()
        )));
    }
    let terms: Vec<f64> = points
        .par_iter()
        .map(|&t| {
            let w: Vec<f64> = w_post
                .iter()
                .zip(perturbation)
                .map(|(w, d)| w + t * d)
                .collect();
            dot(&objective.grad(&w), perturbation)
        })
        .collect();
    let value = terms.iter().sum::<f64>() / terms.len() as f64;
    Ok(RiemannEstimate {
        value,
        terms,
        subdivisions,
        sample_points: points,
        exact: None,
    })
}

/// `L(w + d) - L(w)`.
pub fn exact_difference<O: Objective>(objective: &O, w_post: &[f64], perturbation: &[f64]) -> f64 {
    let moved: Vec<f64> = w_post.iter().zip(perturbation).map(|(w, d)| w + d).collect();
    objective.loss(&moved) - objective.loss(w_post)
}

fn flatten_pair(
    probe: &Probe,
    w_post: &NamedTensorMap,
    perturbation: &DeltaSet,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        probe.flatten(w_post)?,
        probe.flatten_partial(&perturbation.tensors)?,
    ))
}

/// Riemann estimate of the loss change from adding `perturbation` to
/// `w_post`, measured on `data`. Tensors absent from the perturbation are
/// left untouched.
pub fn estimate_delta_loss(
    spec: &ProbeSpec,
    data: &ProbeDataset,
    w_post: &NamedTensorMap,
    perturbation: &DeltaSet,
    subdivisions: usize,
    include_left_endpoint: bool,
) -> Result<RiemannEstimate> {
    let probe = Probe::new(spec)?;
    let objective = probe.bind(data)?;
    let (w, d) = flatten_pair(&probe, w_post, perturbation)?;
    riemann_sum(&objective, &w, &d, subdivisions, include_left_endpoint)
}

/// The exact loss change the estimate is judged against.
pub fn exact_delta_loss(
    spec: &ProbeSpec,
    data: &ProbeDataset,
    w_post: &NamedTensorMap,
    perturbation: &DeltaSet,
) -> Result<f64> {
    let probe = Probe::new(spec)?;
    let objective = probe.bind(data)?;
    let (w, d) = flatten_pair(&probe, w_post, perturbation)?;
    Ok(exact_difference(&objective, &w, &d))
}

/// Estimate with the exact value filled in.
pub fn estimate_with_exact(
    spec: &ProbeSpec,
    data: &ProbeDataset,
    w_post: &NamedTensorMap,
    perturbation: &DeltaSet,
    subdivisions: usize,
    include_left_endpoint: bool,
) -> Result<RiemannEstimate> {
    let probe = Probe::new(spec)?;
    let objective = probe.bind(data)?;
    let (w, d) = flatten_pair(&probe, w_post, perturbation)?;
    let mut est = riemann_sum(&objective, &w, &d, subdivisions, include_left_endpoint)?;
    est.exact = Some(exact_difference(&objective, &w, &d));
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// `L(w) = w²` in one dimension.
    struct Square;

    impl Objective for Square {
        fn num_params(&self) -> usize {
            1
        }
        fn loss(&self, w: &[f64]) -> f64 {
            w[0] * w[0]
        }
        fn grad(&self, w: &[f64]) -> Vec<f64> {
            vec![2.0 * w[0]]
        }
    }

    #[test]
    fn inner_product_by_hand() {
        let a: NamedTensorMap =
            [("w".to_string(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())]
                .into_iter()
                .collect();
        let b: NamedTensorMap =
            [("w".to_string(), Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())]
                .into_iter()
                .collect();
        assert_eq!(frobenius_inner(&a, &b).unwrap(), 5.0);
        let zero: NamedTensorMap = [("w".to_string(), Tensor::zeros(vec![2, 2]))].into_iter().collect();
        assert_eq!(frobenius_inner(&a, &zero).unwrap(), 0.0);

        let other: NamedTensorMap = [("v".to_string(), Tensor::zeros(vec![2, 2]))].into_iter().collect();
        assert!(frobenius_inner(&a, &other).is_err());
        let wrong: NamedTensorMap = [("w".to_string(), Tensor::zeros(vec![4]))].into_iter().collect();
        assert!(matches!(frobenius_inner(&a, &wrong), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn quadratic_left_sum() {
        let est = riemann_sum(&Square, &[1.0], &[1.0], 5, true).unwrap();
        let expected = [2.0, 2.4, 2.8, 3.2, 3.6];
        for (t, e) in est.terms.iter().zip(expected) {
            assert!((t - e).abs() < 1e-12);
        }
        assert!((est.value - 2.8).abs() < 1e-12);
        assert_eq!(est.sample_points, [0.0, 0.2, 0.4, 0.6, 0.8]);
        assert_eq!(exact_difference(&Square, &[1.0], &[1.0]), 3.0);

        let est10 = riemann_sum(&Square, &[1.0], &[1.0], 10, true).unwrap();
        assert!((est10.value - 2.9).abs() < 1e-12);
    }

    #[test]
    fn interior_points_variant() {
        let est = riemann_sum(&Square, &[1.0], &[1.0], 5, false).unwrap();
        assert_eq!(est.sample_points.len(), 4);
        assert!((est.sample_points[0] - 0.2).abs() < 1e-15);
        // Mean of 2.4, 2.8, 3.2, 3.6.
        assert!((est.value - 3.0).abs() < 1e-12);
        assert!(matches!(riemann_sum(&Square, &[1.0], &[1.0], 1, false), Err(Error::InvalidC(1))));
        assert!(matches!(riemann_sum(&Square, &[1.0], &[1.0], 0, true), Err(Error::InvalidC(0))));
    }

    #[test]
    fn zero_perturbation() {
        for c in [1, 2, 5, 17] {
            assert_eq!(riemann_sum(&Square, &[0.7], &[0.0], c, true).unwrap().value, 0.0);
        }
        assert_eq!(exact_difference(&Square, &[0.7], &[0.0]), 0.0);
    }
}
