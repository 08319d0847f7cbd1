//! Adam with bias correction. One optimizer instance per training run; the
//! moment buffers are aligned with the flat parameter vector.
//!
//! Invariant: a coordinate whose gradient is exactly zero on every step it
//! has seen keeps its parameter bit-identical. Both moments stay exactly
//! zero, so the update term is 0 / (sqrt(0) + eps) = 0 and `p - lr*0`
//! rounds to `p` in IEEE arithmetic. Frozen-prefix training relies on this.

use crate::diffcore::ParamStore;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from an accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore, grad: &[f64]) {
        assert_eq!(grad.len(), self.m.len(), "gradient length vs optimizer state");
        assert_eq!(grad.len(), store.len(), "gradient length vs parameter count");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let data = store.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
