use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Nesterov-accelerated Adam with plain bias correction (no momentum schedule):
///
/// ```text
/// m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
/// m_hat = m / (1-b1^t)          v_hat = v / (1-b2^t)
/// theta <- theta - lr (b1 m_hat + (1-b1) g / (1-b1^t)) / (sqrt(v_hat) + eps)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct NadamState {
    pub config: NadamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl NadamState {
    pub fn new(config: NadamConfig, sizes: &[usize]) -> Self {
        NadamState {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::ShapeMismatch("parameter and optimizer state sizes differ".into()));
            }
        }
        self.t += 1;
        let NadamConfig { lr, beta1, beta2, epsilon } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let nesterov = beta1 * m_hat + (1.0 - beta1) * g[i] / bc1;
                p[i] -= lr * nesterov / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = NadamState::new(NadamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        s.step(&mut [&mut p], &[vec![0.0; 3]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn one_scalar_step_by_hand() {
        let mut s = NadamState::new(NadamConfig::default(), &[1]);
        let mut p = vec![1.0];
        s.step(&mut [&mut p], &[vec![1.0]]).unwrap();
        // m = 0.1, v = 0.001, m_hat = v_hat = 1
        // update = 1e-3 * (0.9 * 1 + 0.1 * 1 / 0.1) / (1 + 1e-7)
        let expected = 1.0 - 1e-3 * 1.9 / (1.0 + 1e-7);
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_tensors_update_identically() {
        let mut s = NadamState::new(NadamConfig::default(), &[2, 2]);
        let mut a = vec![0.3, -0.7];
        let mut b = vec![0.3, -0.7];
        for k in 0..5 {
            let g = vec![0.1 * k as f64, -0.4];
            s.step(&mut [&mut a, &mut b], &[g.clone(), g]).unwrap();
        }
        assert_eq!(a, b);
    }

    /// Steps until |theta| < 1e-2 on f = theta^2 from theta = 1 with defaults.
    pub(crate) fn square_descent(max_steps: usize) -> (Option<usize>, f64) {
        let mut s = NadamState::new(NadamConfig::default(), &[1]);
        let mut p: Vec<f64> = vec![1.0];
        for step in 1..=max_steps {
            let g = vec![2.0 * p[0]];
            s.step(&mut [&mut p], &[g]).unwrap();
            if p[0].abs() < 1e-2 {
                return (Some(step), p[0]);
            }
        }
        (None, p[0])
    }

    #[test]
    fn square_descent_matches_reference_trajectory() {
        // Reference values from an independent scalar re-implementation of
        // the update rule.
        let (reached, theta) = square_descent(2000);
        assert_eq!(reached, None);
        assert!((theta - 0.02048226211333922).abs() < 1e-12, "{theta}");
        let (reached, theta) = square_descent(5000);
        assert_eq!(reached, Some(2200));
        assert!((theta - 0.009991317364582756).abs() < 1e-12, "{theta}");
    }

    #[test]
    fn shape_mismatch() {
        let mut s = NadamState::new(NadamConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(s.step(&mut [&mut p], &[vec![0.0; 3]]).is_err());
    }
}
