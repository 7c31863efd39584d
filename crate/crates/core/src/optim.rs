//! Adadelta.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaSlot {
    pub sq_grad: Vec<f64>,
    pub sq_update: Vec<f64>,
}

/// Running averages per parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    pub state: BTreeMap<String, AdadeltaSlot>,
}

impl Default for Adadelta {
    fn default() -> Self {
        Self::new(0.9, 1e-6)
    }
}

impl Adadelta {
    pub fn new(rho: f64, eps: f64) -> Self {
        Self {
            rho,
            eps,
            state: BTreeMap::new(),
        }
    }

    /// One update of a single parameter vector.
    pub fn step_slice(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::dim("adadelta_step", &[param.len()], &[grad.len()]));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} for {name}[{i}]",
                grad[i]
            )));
        }
        let n = param.len();
        let slot = self.state.entry(name.to_string()).or_insert_with(|| AdadeltaSlot {
            sq_grad: vec![0.0; n],
            sq_update: vec![0.0; n],
        });
        if slot.sq_grad.len() != n {
            return Err(Error::dim("adadelta_step", &[slot.sq_grad.len()], &[n]));
        }
        let (rho, eps) = (self.rho, self.eps);
        for (((p, &g), eg), ed) in param
            .iter_mut()
            .zip(grad)
            .zip(slot.sq_grad.iter_mut())
            .zip(slot.sq_update.iter_mut())
        {
            *eg = rho * *eg + (1.0 - rho) * g * g;
            let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
            *ed = rho * *ed + (1.0 - rho) * delta * delta;
            *p += lr * delta;
        }
        Ok(())
    }

    /// Updates every trainable entry of `params` that has a gradient. All gradients are
    /// checked before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} for {name}[{i}]",
                    g[i]
                )));
            }
            if !params.get(name)?.requires_grad() {
                return Err(Error::Config(format!("gradient supplied for buffer {name}")));
            }
        }
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            self.step_slice(name, p.data_mut(), g, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays_state() {
        let mut opt = Adadelta::default();
        let mut w = [1.0];
        opt.step_slice("w", &mut w, &[2.0], 1.0).unwrap();
        let before = opt.state["w"].clone();
        let w_before = w[0];
        opt.step_slice("w", &mut w, &[0.0], 1.0).unwrap();
        assert_eq!(w[0], w_before);
        assert_eq!(opt.state["w"].sq_grad[0], 0.9 * before.sq_grad[0]);
        assert_eq!(opt.state["w"].sq_update[0], 0.9 * before.sq_update[0]);
    }

    #[test]
    fn first_step_value() {
        let mut opt = Adadelta::default();
        let mut w = [0.0];
        opt.step_slice("w", &mut w, &[1.0], 1.0).unwrap();
        // -sqrt(1e-6) / sqrt(0.1 + 1e-6)
        assert!((w[0] + 3.1623e-3).abs() < 1e-7, "{}", w[0]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut opt = Adadelta::default();
        let err = opt.step_slice("fc1.weight", &mut [0.0], &[f64::NAN], 1.0).unwrap_err();
        assert!(err.to_string().contains("fc1.weight"));
        assert_eq!(err.exit_code(), 4);
    }
}
