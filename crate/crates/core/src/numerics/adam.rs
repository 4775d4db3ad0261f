use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Updates this parameter has received; drives its bias correction.
    t: i32,
}

/// Adam with bias correction and decoupled weight decay.
///
/// Parameters without a gradient in a step are left untouched: no moment
/// update and no decay. Bias correction counts each parameter's own updates,
/// so rarely-updated parameters are corrected like fresh ones.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Fails without touching any parameter when a
    /// gradient is non-finite or mis-shaped.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = grads.get(*name) {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam_step", p.shape(), g.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (name, p) in params {
            let Some(g) = grads.get(name) else { continue };
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
                t: 0,
            });
            mo.t += 1;
            let bc1 = 1.0 - beta1.powi(mo.t);
            let bc2 = 1.0 - beta2.powi(mo.t);
            for (((x, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mo.m.iter_mut())
                .zip(mo.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![0.5, -1.0, 3.0]);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::full([3], 1.0));
        let mut adam = AdamState::new(cfg(2e-5, 0.0));
        adam.step([("p", &mut p)], &grads).unwrap();
        for (x, x0) in p.data().iter().zip([0.5, -1.0, 3.0]) {
            assert!((x - (x0 - 2e-5)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![0.5, -1.0]);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::zeros([2]));
        let mut adam = AdamState::new(cfg(1e-3, 0.0));
        adam.step([("p", &mut p)], &grads).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0]);
    }

    #[test]
    fn missing_gradient_skips_decay() {
        let mut p = Tensor::vector(vec![0.5]);
        let mut adam = AdamState::new(cfg(1e-3, 0.5));
        adam.step([("p", &mut p)], &BTreeMap::new()).unwrap();
        assert_eq!(p.data(), &[0.5]);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut p = Tensor::vector(vec![0.5]);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::vector(vec![f64::NAN]));
        let mut adam = AdamState::new(cfg(1e-3, 0.0));
        assert!(matches!(adam.step([("p", &mut p)], &grads), Err(Error::NonFinite(_))));
        assert_eq!(p.data(), &[0.5]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn two_steps_descend_a_quadratic() {
        // f(x) = (x - 3)², f'(x) = 2(x - 3)
        let f = |x: f64| (x - 3.0) * (x - 3.0);
        let mut p = Tensor::vector(vec![0.0]);
        let mut adam = AdamState::new(cfg(0.1, 0.0));
        let mut last = f(0.0);
        for _ in 0..2 {
            let x = p.data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::vector(vec![2.0 * (x - 3.0)]));
            adam.step([("x", &mut p)], &grads).unwrap();
            let now = f(p.data()[0]);
            assert!(now < last);
            last = now;
        }
    }
}
