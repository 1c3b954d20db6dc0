//! Adam with a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Peak learning rate for model parameters.
pub const LR_MODEL: f64 = 1e-4;
/// Peak learning rate for fusion coefficients.
pub const LR_FUSION: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a fixed list of parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix<T>>, config: AdamConfig) -> Self {
        let m: Vec<Matrix<T>> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `params` and `grads` must list the same
    /// matrices in the order the optimizer was built with.
    pub fn step<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Matrix<T>>,
        grads: impl IntoIterator<Item = &'b Matrix<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let eps = T::lit(eps);
        let mut count = 0;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::config(format!(
                    "optimizer slot {count}: parameter {:?}, gradient {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
            count += 1;
        }
        if count != self.m.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} matrices, got {count}",
                self.m.len()
            )));
        }
        Ok(())
    }
}

/// Cosine decay from `peak` at step 0 to `floor_frac · peak` at `total`.
pub fn cosine_lr(peak: f64, step: usize, total: usize, floor_frac: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let progress = (step.min(total) as f64) / total as f64;
    let floor = peak * floor_frac;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decay target used by every training loop: 10% of the peak rate.
pub const COSINE_FLOOR: f64 = 0.1;
