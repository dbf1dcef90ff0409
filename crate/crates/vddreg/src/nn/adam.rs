//! Adaptive-moment gradient descent.

use ndarray::ArrayD;

use crate::nn::ParamSet;

/// Adam with the conventional defaults (beta1 0.9, beta2 0.999, eps 1e-8).
/// State is kept per parameter tensor and updates are fully deterministic.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let zeros: Vec<ArrayD<f64>> = (0..params.len())
            .map(|i| ArrayD::zeros(params.value(i).raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. `grads[i]` is the gradient for `params` tensor `i`
    /// (None leaves the tensor untouched, e.g. unused side branches).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<&ArrayD<f64>>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(i);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(*g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
