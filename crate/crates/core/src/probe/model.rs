use super::{bias_name, weight_name, Activation, LossKind, Probe, ProbeDataset, Targets};
use crate::error::{Error, Result};

/// A scalar loss over a flat f64 parameter vector with its gradient.
pub trait Objective {
    fn num_params(&self) -> usize;

    fn loss(&self, w: &[f64]) -> f64;

    fn grad(&self, w: &[f64]) -> Vec<f64>;
}

/// A probe paired with the dataset its loss is measured on.
#[derive(Debug, Clone, Copy)]
pub struct BoundProbe<'a> {
    probe: &'a Probe,
    data: &'a ProbeDataset,
}

/// Offsets of one dense layer inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layer {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: Option<usize>,
}

impl<'a> BoundProbe<'a> {
    pub(crate) fn new(probe: &'a Probe, data: &'a ProbeDataset) -> Result<Self> {
        let sizes = probe.sizes();
        if data.n_features != sizes[0] {
            return Err(Error::LayoutMismatch(format!(
                "dataset has {} features, probe expects {}",
                data.n_features, sizes[0]
            )));
        }
        let outputs = *sizes.last().unwrap();
        match (&data.targets, probe.spec().loss_kind()) {
            (Targets::Values { dim, .. }, LossKind::Mse) if *dim == outputs => {}
            (Targets::Labels { classes, .. }, LossKind::CrossEntropy) if *classes == outputs => {}
            _ => {
                return Err(Error::LayoutMismatch(
                    "dataset targets do not match the probe's output layer and loss".into(),
                ))
            }
        }
        Ok(Self { probe, data })
    }

    pub fn probe(&self) -> &Probe {
        self.probe
    }

    pub fn data(&self) -> &ProbeDataset {
        self.data
    }

    fn layers(&self) -> Vec<Layer> {
        layers(self.probe)
    }

    fn forward(&self, w: &[f64], layers: &[Layer]) -> Vec<Vec<f64>> {
        forward(self.probe, layers, w, &self.data.inputs, self.data.n_samples)
    }

    /// Mean loss and its derivative with respect to the model output.
    fn head(&self, out: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let n = self.data.n_samples;
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        let mut d_out = if want_grad { vec![0.0; out.len()] } else { Vec::new() };
        match &self.data.targets {
            Targets::Values { dim, values } => {
                for r in 0..n {
                    for k in 0..*dim {
                        let i = r * dim + k;
                        let resid = out[i] - values[i];
                        total += resid * resid;
                        if want_grad {
                            d_out[i] = resid * inv_n;
                        }
                    }
                }
                (0.5 * total * inv_n, d_out)
            }
            Targets::Labels { classes, labels } => {
                let c = *classes;
                for r in 0..n {
                    let logits = &out[r * c..(r + 1) * c];
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
                    let lse = max + sum.ln();
                    total += lse - logits[labels[r]];
                    if want_grad {
                        for k in 0..c {
                            let p = (logits[k] - lse).exp();
                            let onehot = if k == labels[r] { 1.0 } else { 0.0 };
                            d_out[r * c + k] = (p - onehot) * inv_n;
                        }
                    }
                }
                (total * inv_n, d_out)
            }
        }
    }

    pub fn loss_and_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(w.len(), self.probe.num_params(), "parameter length");
        let layers = self.layers();
        let outs = self.forward(w, &layers);
        let (loss, mut dz) = self.head(outs.last().unwrap(), true);
        let n = self.data.n_samples;
        let act = self.probe.spec().activation;
        let mut g = vec![0.0; w.len()];
        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let input: &[f64] = if l == 0 { &self.data.inputs } else { &outs[l - 1] };
            let gw = layer.weight;
            for r in 0..n {
                let dz_row = &dz[r * layer.outputs..(r + 1) * layer.outputs];
                for (j, &a) in input[r * layer.inputs..(r + 1) * layer.inputs].iter().enumerate() {
                    let grow = &mut g[gw + j * layer.outputs..gw + (j + 1) * layer.outputs];
                    for (gk, &d) in grow.iter_mut().zip(dz_row) {
                        *gk += a * d;
                    }
                }
                if let Some(b) = layer.bias {
                    for (gk, &d) in g[b..b + layer.outputs].iter_mut().zip(dz_row) {
                        *gk += d;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Propagate to the previous layer's pre-activation.
            let weight = &w[layer.weight..layer.weight + layer.inputs * layer.outputs];
            let mut prev = vec![0.0; n * layer.inputs];
            for r in 0..n {
                let dz_row = &dz[r * layer.outputs..(r + 1) * layer.outputs];
                for j in 0..layer.inputs {
                    let wrow = &weight[j * layer.outputs..(j + 1) * layer.outputs];
                    let da: f64 = wrow.iter().zip(dz_row).map(|(a, b)| a * b).sum();
                    let h = input[r * layer.inputs + j];
                    prev[r * layer.inputs + j] = da
                        * match act {
                            Activation::Tanh => 1.0 - h * h,
                            Activation::Relu => {
                                if h > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
            dz = prev;
        }
        (loss, g)
    }
}

fn layers(probe: &Probe) -> Vec<Layer> {
    let sizes = probe.sizes();
    (0..sizes.len() - 1)
        .map(|l| Layer {
            inputs: sizes[l],
            outputs: sizes[l + 1],
            weight: probe.slot(&weight_name(l)).expect("weight slot").offset,
            bias: probe.slot(&bias_name(l)).map(|s| s.offset),
        })
        .collect()
}

/// Outputs of every layer; the last entry holds the raw model output,
/// earlier entries the post-activation hidden values.
fn forward(probe: &Probe, layers: &[Layer], w: &[f64], inputs: &[f64], n: usize) -> Vec<Vec<f64>> {
    let act = probe.spec().activation;
    let mut outs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input: &[f64] = if l == 0 { inputs } else { &outs[l - 1] };
        let mut z = vec![0.0; n * layer.outputs];
        let weight = &w[layer.weight..layer.weight + layer.inputs * layer.outputs];
        for r in 0..n {
            let row = &mut z[r * layer.outputs..(r + 1) * layer.outputs];
            if let Some(b) = layer.bias {
                row.copy_from_slice(&w[b..b + layer.outputs]);
            }
            for (j, &a) in input[r * layer.inputs..(r + 1) * layer.inputs].iter().enumerate() {
                let wrow = &weight[j * layer.outputs..(j + 1) * layer.outputs];
                for (zk, &wk) in row.iter_mut().zip(wrow) {
                    *zk += a * wk;
                }
            }
        }
        if l + 1 < layers.len() {
            for v in &mut z {
                *v = match act {
                    Activation::Tanh => v.tanh(),
                    Activation::Relu => v.max(0.0),
                };
            }
        }
        outs.push(z);
    }
    outs
}

/// Raw model outputs (`n × outputs`, row-major) for arbitrary inputs.
pub(crate) fn predict(probe: &Probe, w: &[f64], inputs: &[f64], n: usize) -> Vec<f64> {
    let layers = layers(probe);
    forward(probe, &layers, w, inputs, n).pop().expect("at least one layer")
}

impl Objective for BoundProbe<'_> {
    fn num_params(&self) -> usize {
        self.probe.num_params()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        assert_eq!(w.len(), self.probe.num_params(), "parameter length");
        let layers = self.layers();
        let outs = self.forward(w, &layers);
        self.head(outs.last().unwrap(), false).0
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        self.loss_and_grad(w).1
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, ProbeSpec};
    use super::*;
    use crate::tensor::{NamedTensorMap, Tensor};

    fn tiny_linreg(x: f64, y: f64) -> (Probe, ProbeDataset) {
        let mut spec = ProbeSpec::linreg(0);
        spec.layer_sizes = vec![1, 1];
        let probe = Probe::new(&spec).unwrap();
        let data = ProbeDataset::regression(vec![x], 1, vec![y], 1).unwrap();
        (probe, data)
    }

    #[test]
    fn linreg_zero_weights_by_hand() {
        let (probe, data) = tiny_linreg(1.0, 2.0);
        let bound = probe.bind(&data).unwrap();
        assert_eq!(bound.loss(&[0.0]), 2.0);
        assert_eq!(bound.grad(&[0.0]), vec![-2.0]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let spec = ProbeSpec::logreg(1);
        let probe = Probe::new(&spec).unwrap();
        let data = generate_dataset(&spec, 32, 0.0, 5).unwrap();
        let w = vec![0.0; probe.num_params()];
        let loss = probe.bind(&data).unwrap().loss(&w);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn free_function_layout_checks() {
        let spec = ProbeSpec::logreg(1);
        let data = generate_dataset(&spec, 8, 0.0, 5).unwrap();
        let mut params = NamedTensorMap::new();
        params.insert("layers.0.weight", Tensor::zeros(vec![16, 4]));
        assert!(matches!(
            super::super::loss(&spec, &params, &data),
            Err(Error::LayoutMismatch(_))
        ));
        params.insert("layers.0.bias", Tensor::zeros(vec![4]));
        assert!(super::super::loss(&spec, &params, &data).is_ok());
        let g = super::super::grad(&spec, &params, &data).unwrap();
        assert_eq!(g.shapes(), params.shapes());
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let probe = Probe::new(&ProbeSpec::mlp(0)).unwrap();
        let data = generate_dataset(&ProbeSpec::logreg(0), 8, 0.0, 1).unwrap();
        assert!(matches!(probe.bind(&data), Err(Error::LayoutMismatch(_))));
    }
}
