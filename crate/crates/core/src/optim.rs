use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Weights;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with moments stored in parameter visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Weights<Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.flat().into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Restores saved moments, checking they fit `params`.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>, params: &Weights<Tensor>) -> Result<Self> {
        let shapes: Vec<&[usize]> = params.flat().into_iter().map(|t| t.shape()).collect();
        for moments in [&m, &v] {
            if moments.len() != shapes.len() {
                return Err(Error::ShapeMismatch { expected: shapes.len(), found: moments.len() });
            }
            for (t, s) in moments.iter().zip(&shapes) {
                if t.shape() != *s {
                    return Err(Error::ShapeMismatch { expected: s.iter().product(), found: t.len() });
                }
            }
        }
        Ok(Self { config, step, m, v })
    }

    /// One descent step on `params` along `grads`.
    pub fn update(&mut self, params: &mut Weights<Tensor>, grads: &Weights<Tensor>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let step_size = (c.lr / bc1) as f32;
        let bc2_sqrt = libm::sqrt(bc2) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        let grads = grads.flat();
        let mut idx = 0;
        params.visit_mut(|p| {
            let g = grads[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (libm::sqrtf(*v) / bc2_sqrt + eps);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // After one step m_hat = g and v_hat = g^2, so each entry moves by
        // lr * sign(g) (up to eps).
        let cfg = ModelConfig::toy();
        let mut p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = p.weights.clone();
        let grads = p.weights.map(|t| {
            let mut g = t.clone();
            for (i, v) in g.data_mut().iter_mut().enumerate() {
                *v = if i % 2 == 0 { 3.0 } else { -0.5 };
            }
            g
        });
        let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &p.weights);
        adam.update(&mut p.weights, &grads);
        for (a, b) in before.flat().iter().zip(p.weights.flat()) {
            for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                let want = if i % 2 == 0 { -1e-2 } else { 1e-2 };
                assert!(((y - x) - want).abs() < 1e-5);
            }
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = ModelConfig::toy();
        let mut p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 5e-2, ..AdamConfig::default() }, &p.weights);
        let target = 0.25f32;
        for _ in 0..400 {
            let grads = p.weights.map(|t| {
                let mut g = t.clone();
                for v in g.data_mut() {
                    *v = 2.0 * (*v - target);
                }
                g
            });
            adam.update(&mut p.weights, &grads);
        }
        assert!((p.weights.latent_shape.data()[0] - target).abs() < 1e-2);
    }

    #[test]
    fn restore_checks_shapes() {
        let p = init_params(&ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = Adam::new(AdamConfig::default(), &p.weights);
        assert!(Adam::from_state(a.config, 3, a.m.clone(), a.v.clone(), &p.weights).is_ok());
        let mut short = a.m.clone();
        short.pop();
        assert!(Adam::from_state(a.config, 3, short, a.v, &p.weights).is_err());
    }
}
