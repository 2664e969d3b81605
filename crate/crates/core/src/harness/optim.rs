//! AdamW: adaptive moments with decoupled weight decay.

use crate::nn::{GradBuffer, ParamSet};
use crate::tensor::Real;

pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, weight_decay: f64) -> Self {
        AdamW {
            m: params.iter().map(|(_, e)| vec![T::zero(); e.data.len()]).collect(),
            v: params.iter().map(|(_, e)| vec![T::zero(); e.data.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradBuffer<T>, lr: f64) {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.weight_decay);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        for (idx, (_, entry)) in params.iter_mut().enumerate() {
            let g = &grads.grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..entry.data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = entry.data[i];
                entry.data[i] = p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p);
            }
        }
    }
}
