use std::collections::BTreeMap;

use super::graph::{Gradients, Graph};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adadelta with a learning-rate multiplier.
///
/// Per parameter: `E[g²] ← ρE[g²] + (1-ρ)g²`,
/// `u = RMS[Δ]/RMS[g] · g`, `θ ← θ - lr·u`, `E[Δ²] ← ρE[Δ²] + (1-ρ)u²`.
/// The accumulated update is the unscaled `u`, so repeated identical
/// gradients grow the step even when `lr < 1`.
#[derive(Clone, Debug)]
pub struct Adadelta {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    sq_grad: BTreeMap<String, Tensor>,
    sq_update: BTreeMap<String, Tensor>,
}

impl Default for Adadelta {
    fn default() -> Self {
        Self::new(0.1, 0.95, 1e-6)
    }
}

impl Adadelta {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Self {
        Self {
            lr,
            decay,
            eps,
            sq_grad: BTreeMap::new(),
            sq_update: BTreeMap::new(),
        }
    }

    /// Accumulators for a parameter, if it has been stepped.
    pub fn accumulators(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.sq_grad.get(name)?, self.sq_update.get(name)?))
    }

    /// Applies one descent step to a single named tensor.
    pub fn step_tensor(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        grad.expect_shape(param.shape(), &format!("gradient of {name}"))?;
        let sq_g = self
            .sq_grad
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let sq_u = self
            .sq_update
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if sq_g.shape() != param.shape() {
            return Err(Error::shape(format!("adadelta state of {name}"), param.shape(), sq_g.shape()));
        }
        let (rho, eps, lr) = (self.decay, self.eps, self.lr);
        let p = param.data_mut();
        let (eg, eu) = (sq_g.data_mut(), sq_u.data_mut());
        for (i, &g) in grad.data().iter().enumerate() {
            eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
            let u = (eu[i] + eps).sqrt() / (eg[i] + eps).sqrt() * g;
            p[i] -= lr * u;
            eu[i] = rho * eu[i] + (1.0 - rho) * u * u;
        }
        Ok(())
    }

    /// Descends every parameter of `graph` that has a gradient in `grads`.
    ///
    /// Parameters without an entry are left untouched.
    pub fn step(&mut self, graph: &mut Graph, grads: &Gradients) -> Result<()> {
        for (name, param) in graph.params_mut() {
            if let Some(g) = grads.params.get(&name) {
                self.step_tensor(&name, param, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut opt = Adadelta::default();
        let mut p = Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let before = p.clone();
        for _ in 0..5 {
            opt.step_tensor("p", &mut p, &Tensor::zeros(&[3])).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // E[g²] = 0.05, RMS(g) = sqrt(0.05 + 1e-6), RMS(Δ) = sqrt(1e-6) = 1e-3.
        let mut opt = Adadelta::new(0.1, 0.95, 1e-6);
        let mut p = scalar(0.0);
        opt.step_tensor("p", &mut p, &scalar(1.0)).unwrap();
        let expected = -0.1 * 1e-3 / (0.05f64 + 1e-6).sqrt();
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - (-4.472e-4)).abs() < 1e-7);
    }

    #[test]
    fn repeated_gradient_grows_the_step() {
        let mut opt = Adadelta::new(0.1, 0.95, 1e-6);
        let mut p = scalar(0.0);
        opt.step_tensor("p", &mut p, &scalar(1.0)).unwrap();
        let first = p.data()[0];
        opt.step_tensor("p", &mut p, &scalar(1.0)).unwrap();
        let second = p.data()[0] - first;
        assert!(second.abs() > first.abs(), "{second} vs {first}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = Adadelta::default();
        let mut p = Tensor::zeros(&[2]);
        assert!(opt.step_tensor("p", &mut p, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn accumulators_stay_nonnegative() {
        let mut opt = Adadelta::default();
        let mut p = Tensor::zeros(&[4]);
        for k in 0..10 {
            let g = Tensor::from_fn(&[4], |i| ((i + k) as f64).sin() * 3.0);
            opt.step_tensor("p", &mut p, &g).unwrap();
        }
        let (eg, eu) = opt.accumulators("p").unwrap();
        assert!(eg.data().iter().chain(eu.data()).all(|&v| v >= 0.0));
    }
}
