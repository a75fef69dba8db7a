use serde::{Deserialize, Serialize};

use super::{shape_err, NnError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every tensor in `params`.
    pub fn update(
        &mut self,
        cfg: &AdamConfig,
        params: &mut [&mut [T]],
        grads: &[&[T]],
    ) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(format!(
                "{} params / {} grads for {} optimizer slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(shape_err(format!("tensor {i}: param {} grad {}", p.len(), g.len())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(cfg.beta1);
        let b2 = T::from_f64_lossy(cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64_lossy(cfg.lr);
        let eps = T::from_f64_lossy(cfg.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = vec![0.3f32, -1.2, 4.0];
        let before = params.clone();
        let mut st = AdamState::new(&[3]);
        for _ in 0..5 {
            st.update(&AdamConfig::default(), &mut [&mut params[..]], &[&[0.0; 3]])
                .unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![1.0f32, 2.0];
            let mut st = AdamState::new(&[2]);
            for k in 0..10 {
                let g = [0.1 * k as f32, -0.3];
                st.update(&AdamConfig::default(), &mut [&mut p[..]], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_unit_gradient_decreases_parameter() {
        // Hand iteration of the recurrence: with g == 1 every step, m_hat == v_hat == 1, so each
        // step subtracts exactly lr / (1 + eps).
        let cfg = AdamConfig::default();
        let mut p = [0.5f64];
        let mut st = AdamState::new(&[1]);
        let mut expected = 0.5f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        for t in 1..=20 {
            let prev = p[0];
            st.update(&cfg, &mut [&mut p[..]], &[&[1.0]]).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            expected -= 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!(p[0] < prev);
            assert!((p[0] - expected).abs() < 1e-15);
        }
        assert!((p[0] - (0.5 - 20.0 * 1e-3 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut st = AdamState::<f32>::new(&[2]);
        let mut p = [0.0f32; 3];
        assert!(st
            .update(&AdamConfig::default(), &mut [&mut p[..]], &[&[0.0; 3]])
            .is_err());
    }
}
