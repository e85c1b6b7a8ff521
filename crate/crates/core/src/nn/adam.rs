//! Adaptive-moment gradient updates over the stack's flattened parameters.

use super::NnError;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over aligned (parameter, gradient) tensor lists. Fails on
    /// the first non-finite gradient, naming the parameter it belongs to.
    pub fn update(
        &mut self,
        params: Vec<(String, &mut [f64])>,
        grads: Vec<(String, &[f64])>,
    ) -> Result<(), NnError> {
        let total: usize = params.iter().map(|(_, p)| p.len()).sum();
        if self.m.is_empty() {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
        }
        assert_eq!(self.m.len(), total, "optimizer/parameter shape mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut offset = 0;
        for ((path, param), (gpath, grad)) in params.into_iter().zip(grads.into_iter()) {
            assert_eq!(path, gpath, "tensor traversal order mismatch");
            assert_eq!(param.len(), grad.len());
            for (i, (p, g)) in param.iter_mut().zip(grad.iter()).enumerate() {
                if !g.is_finite() {
                    return Err(NnError::NonFiniteGrad {
                        path: format!("{path}[{i}]"),
                    });
                }
                let slot = offset + i;
                self.m[slot] = self.beta1 * self.m[slot] + (1.0 - self.beta1) * g;
                self.v[slot] = self.beta2 * self.v[slot] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[slot] / bc1;
                let v_hat = self.v[slot] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            offset += grad.len();
        }
        Ok(())
    }
}
