use crate::error::{mismatch, Result};
use crate::tensor::Tensor;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&self, params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return mismatch("adam_step", &[params.len()], &[grads.len(), state.m.len()]);
        }
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
            if p.numel() != g.len() || p.numel() != m.len() || p.numel() != v.len() {
                return mismatch("adam_step", p.shape(), &[g.len()]);
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0, 3.5])];
        let before = p.clone();
        let mut st = AdamState::for_params(&p);
        for _ in 0..10 {
            Adam::default().step(&mut p, &[vec![0.0; 3]], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::for_params(&p);
        Adam::with_lr(0.1).step(&mut p, &[vec![1.0]], &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_shifted_quadratic() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::for_params(&p);
        let adam = Adam::with_lr(0.05);
        let mut reached = None;
        for i in 0..2000 {
            let x = p[0].data()[0];
            if (x - 3.0).abs() < 1e-3 {
                reached = Some(i);
                break;
            }
            adam.step(&mut p, &[vec![2.0 * (x - 3.0)]], &mut st).unwrap();
        }
        assert!(reached.is_some(), "x = {}", p[0].data()[0]);
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut p = vec![Tensor::zeros([2])];
        let mut st = AdamState::for_params(&[Tensor::zeros([3])]);
        assert!(Adam::default().step(&mut p, &[vec![0.0; 2]], &mut st).is_err());
    }
}
