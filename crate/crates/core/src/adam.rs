//! Adaptive-moment gradient descent on flat parameter slices. Each trainable
//! tensor owns one `ParamAdam`, so moments follow their parameters when
//! anchors come and go, and every group keeps its own step counter for bias
//! correction.

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// First/second moment estimates and step counter for one parameter vector.
#[derive(Debug, Clone)]
pub struct ParamAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl ParamAdam {
    pub fn new(n: usize) -> Self {
        ParamAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected update: p -= lr * m̂ / (√v̂ + ε).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}
