//! Central finite-difference verification of analytic gradients.

use super::network::Network;
use super::tensor::ParameterSet;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub name: String,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-8)`
    pub relative_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorError>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorError> {
        self.tensors
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares the gradient produced by `loss` (which accumulates into the
/// supplied buffer when given one and returns the scalar loss) against
/// central differences with step `h` on every parameter.
pub fn check_gradients<F>(net: &Network<f64>, h: f64, loss: F) -> GradCheckReport
where
    F: Fn(&Network<f64>, Option<&mut ParameterSet<f64>>) -> f64,
{
    let mut analytic = net.params().zeros_like();
    loss(net, Some(&mut analytic));
    let mut probe = net.clone();
    let mut tensors = Vec::with_capacity(net.params().len());
    for slot in 0..net.params().len() {
        let n = net.params().tensor(slot).len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = probe.params().tensor(slot).data[i];
            probe.params_mut().tensor_mut(slot).data[i] = orig + h;
            let plus = loss(&probe, None);
            probe.params_mut().tensor_mut(slot).data[i] = orig - h;
            let minus = loss(&probe, None);
            probe.params_mut().tensor_mut(slot).data[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let a = &analytic.tensor(slot).data;
        let max_a = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_n = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        tensors.push(TensorError {
            name: net.params().names()[slot].clone(),
            relative_error: diff / max_a.max(max_n).max(1e-8),
            max_abs_grad: max_a,
        });
    }
    GradCheckReport { tensors }
}
