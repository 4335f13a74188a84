use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are allocated on the first step and must
/// keep matching the parameter list afterwards.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<T>] {
        &self.second_moment
    }

    /// Applies one update using each parameter's accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.step_count == 0 && self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len()
            || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(shape_err(
                "adam",
                format!(
                    "optimizer tracks {} parameters, got {}",
                    self.first_moment.len(),
                    params.len()
                ),
            ));
        }
        self.step_count += 1;
        let cfg = self.config;
        let t = self.step_count as i32;
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let c1 = T::one() / (T::one() - T::of(cfg.beta1.powi(t)));
        let c2 = T::one() / (T::one() - T::of(cfg.beta2.powi(t)));
        let alpha = T::of(cfg.alpha);
        let eps = T::of(cfg.epsilon);
        for ((p, m), v) in params
            .iter_mut()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            for (((theta, g), mi), vi) in p.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi * c1;
                let v_hat = *vi * c2;
                *theta -= alpha * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
