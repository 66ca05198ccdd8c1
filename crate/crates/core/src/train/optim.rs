use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| alloc::vec![0.0; p.tensor.numel()]).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update. Non-finite gradients abort the step with nothing
    /// modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::contract("optimizer state does not match the parameter set"));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.len() != self.m[id.index()].len() {
                return Err(Error::contract(format!("gradient size mismatch for `{}`", params.name(id))));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient for `{}`", params.name(id))));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - math::pow(beta1, self.t as f64);
        let c2 = 1.0 - math::pow(beta2, self.t as f64);
        for (id, g) in params.ids().zip(grads) {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let theta = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                theta[i] -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use alloc::vec;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(1.0);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &[vec![1.0]], 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-9);
        assert!((p.get(p.find("x").unwrap()).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params_and_decays_moments() {
        let mut p = scalar_store(1.0);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(p.get(p.find("x").unwrap()).data()[0], 1.0);

        opt.step(&mut p, &[vec![1.0]], 0.1).unwrap();
        let (m0, v0) = (opt.first_moment()[0][0], opt.second_moment()[0][0]);
        opt.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(opt.first_moment()[0][0], 0.9 * m0);
        assert_eq!(opt.second_moment()[0][0], 0.98 * v0);
    }

    #[test]
    fn nan_gradient_aborts_the_step() {
        let mut p = scalar_store(1.0);
        let mut opt = Adam::new(&p, AdamConfig::default());
        assert!(matches!(opt.step(&mut p, &[vec![f64::NAN]], 0.1), Err(Error::Numeric(_))));
        assert_eq!(opt.steps_taken(), 0);
        assert_eq!(p.get(p.find("x").unwrap()).data()[0], 1.0);
    }
}
