use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the store layout.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam holds {} buffers, got {} grads for {} params",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("grad {:?} for param {:?}", g.shape(), p.shape())));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            adam.step(&mut s, &[Tensor::zeros([2])]).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().1.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+eps).
        let mut s = store_with(&[0.0, 0.0]);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &s);
        adam.step(&mut s, &[Tensor::new([2], vec![0.3, -7.0]).unwrap()]).unwrap();
        let p = s.iter().next().unwrap().1.data().to_vec();
        assert!((p[0] + cfg.lr * 0.3 / (0.3 + cfg.eps)).abs() < 1e-15);
        assert!((p[1] - cfg.lr * 7.0 / (7.0 + cfg.eps)).abs() < 1e-15);
        assert!((p[0].abs() - cfg.lr).abs() < 1e-9);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = Σ (x_i - c_i)², gradient 2(x - c).
        let target = [3.0, -1.5, 0.25];
        let mut s = store_with(&[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &s,
        );
        let mut converged_at = None;
        for step in 1..=2000 {
            let x = s.iter().next().unwrap().1.data().to_vec();
            let g: Vec<f64> = x.iter().zip(&target).map(|(a, c)| 2.0 * (a - c)).collect();
            adam.step(&mut s, &[Tensor::new([3], g).unwrap()]).unwrap();
            let x = s.iter().next().unwrap().1.data().to_vec();
            if x.iter().zip(&target).all(|(a, c)| (a - c).abs() < 1e-3) {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some());
    }

    #[test]
    fn step_counter_increases() {
        let mut s = store_with(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        adam.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        assert_eq!(adam.steps(), 2);
        assert!(adam.step(&mut s, &[Tensor::zeros([2])]).is_err());
    }
}
