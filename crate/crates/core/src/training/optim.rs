//! Adam with decoupled weight decay.

use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters are rounded to `f32` afterwards so
    /// the stored model is exactly what a checkpoint holds.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, param) in store.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (k, w) in param.value.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let decayed = *w - self.lr * self.weight_decay * *w;
                *w = (decayed - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new([3], vec![0.5, -1.25, 2.0]));
        s
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut s = store();
        let before = s.flatten();
        let mut opt = AdamW::new(&s, 0.0, 0.05);
        for _ in 0..5 {
            opt.update(&mut s, &[vec![0.3, -2.0, 1e3]]);
        }
        assert_eq!(s.flatten(), before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut s = store();
        let mut opt = AdamW::new(&s, 1e-2, 0.0);
        opt.update(&mut s, &[vec![1.0, -1.0, 0.0]]);
        let after = s.flatten();
        assert!((after[0] - (0.5 - 1e-2)).abs() < 1e-6);
        assert!((after[1] - (-1.25 + 1e-2)).abs() < 1e-6);
        assert_eq!(after[2], 2.0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut s = store();
        let mut opt = AdamW::new(&s, 0.1, 0.5);
        opt.update(&mut s, &[vec![0.0; 3]]);
        let after = s.flatten();
        assert_eq!(after[0], (0.5f64 * 0.95) as f32 as f64);
    }
}
