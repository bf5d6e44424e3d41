//! Adam with bias correction, operating on flat parameter slices.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair of buffers per parameter
/// slice, plus the step counter driving bias correction.
pub struct AdamState<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero-initialized state for parameter slices of the given lengths.
    pub fn new(slice_lens: &[usize], cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            m: slice_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: slice_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)` with the usual
    /// exponential moment updates and bias correction. Slice structure
    /// must match the state exactly.
    pub fn step(
        &mut self,
        params: &mut [&mut [T]],
        grads: &[&[T]],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "AdamState::step",
                format!(
                    "slice count mismatch: state {}, params {}, grads {}",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        self.step += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        // Bias corrections in f64: beta^t underflows gracefully there.
        let c1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let c2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let eps = T::from_f64(self.cfg.eps);
        let lr = T::from_f64(lr);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::invalid(
                    "AdamState::step",
                    format!(
                        "slice length mismatch: state {}, params {}, grads {}",
                        m.len(),
                        p.len(),
                        g.len()
                    ),
                ));
            }
            for i in 0..m.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
