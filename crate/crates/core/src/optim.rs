//! Adam optimiser used both for denoiser training and for the per-timestep
//! embedding updates during alignment.

/// Standard bias-corrected Adam. Moment buffers live here, so reusing one
/// instance across calls carries momentum across timesteps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Returns the update lr·m̂/(√v̂ + ε) tracking `grad` as given. Add the
    /// result to ascend the objective, subtract it to descend.
    pub fn update_delta(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len(), "gradient dimension changed");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        let mut delta = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            delta.push(self.lr * m_hat / (v_hat.sqrt() + self.eps));
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_gives_zero_update() {
        let mut opt = Adam::new(0.01, 3);
        let d = opt.update_delta(&[0.0, 0.0, 0.0]);
        assert_eq!(d, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimise (x-3)²
        let mut x = 0.0f64;
        let mut opt = Adam::new(0.1, 1);
        for _ in 0..500 {
            let g = 2.0 * (x - 3.0);
            let d = opt.update_delta(&[g]);
            x -= d[0];
        }
        assert!((x - 3.0).abs() < 1e-3, "x={x}");
    }

    #[test]
    fn ascent_equals_descent_on_negated_gradient() {
        let g = vec![0.3, -0.7, 1.1];
        let mut a = Adam::new(0.05, 3);
        let mut b = Adam::new(0.05, 3);
        let da = a.update_delta(&g);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let db = b.update_delta(&neg);
        for i in 0..3 {
            assert_eq!(da[i], -db[i]);
        }
    }
}
