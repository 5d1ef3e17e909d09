use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments for tensors of the given lengths.
    pub fn new(lens: &[usize], lr: f64) -> Self {
        Self {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[&[f64]], lr: f64) -> Self {
        Self::new(&params.iter().map(|p| p.len()).collect::<Vec<_>>(), lr)
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} tensors", self.m.len()),
                got: format!("{} params / {} grads", params.len(), grads.len()),
            });
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("tensor {k} of length {}", self.m[k].len()),
                    got: format!("{} params / {} grads", p.len(), g.len()),
                });
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::TrainingDiverged {
                epoch: 0,
                reason: "non-finite gradient".into(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(&[3], 1e-3);
        st.step(&mut [&mut p[..]], &[&[0.0; 3][..]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        for g in [1e-4, 0.3, -2.0, 50.0] {
            let mut p = [0.0];
            let mut st = AdamState::new(&[1], 1e-3);
            st.step(&mut [&mut p[..]], &[&[g][..]]).unwrap();
            let update = p[0];
            assert_eq!(update.signum(), -g.signum());
            assert!(
                update.abs() >= 0.00099 && update.abs() <= 0.001,
                "g = {g}: update {update}"
            );
        }
    }

    #[test]
    fn two_steps_shrink_quadratic() {
        // f(w) = (w - 3)^2 starting at w = 0
        let mut w = [0.0];
        let mut st = AdamState::new(&[1], 0.1);
        let f = |w: f64| (w - 3.0) * (w - 3.0);
        let before = f(w[0]);
        for _ in 0..2 {
            let g = 2.0 * (w[0] - 3.0);
            st.step(&mut [&mut w[..]], &[&[g][..]]).unwrap();
        }
        assert!(f(w[0]) < before);
        // a shrinking same-sign gradient moves slightly less than lr on the second step
        assert!(w[0] > 0.19 && w[0] < 0.2, "w = {}", w[0]);
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(&[1], 1e-3);
        assert!(matches!(
            st.step(&mut [&mut p[..]], &[&[f64::NAN][..]]),
            Err(Error::TrainingDiverged { .. })
        ));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step_count, 0);
    }
}
