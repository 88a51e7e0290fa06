use serde::{Deserialize, Serialize};

use crate::numcore::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, cfg: AdamConfig) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::from_f64(lr * c2.sqrt() / c1);
        let eps = T::from_f64(self.cfg.eps * c2.sqrt());
        let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
        let (k1, k2) = (T::ONE - b1, T::ONE - b2);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + k1 * g;
                *v = b2 * *v + k2 * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -1.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.3, -5.0]).unwrap();
        let mut adam = Adam::new([&p], AdamConfig::default());
        adam.step(vec![&mut p], &[g], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::from_vec(&[1], vec![3.0f64]).unwrap();
        let mut adam = Adam::new([&p], AdamConfig::default());
        for _ in 0..2000 {
            let g = p.map(|v| 2.0 * v);
            adam.step(vec![&mut p], &[g], 0.05);
        }
        assert!(p.data()[0].abs() < 1e-2);
    }
}
