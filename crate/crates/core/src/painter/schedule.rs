//! Diffusion noise schedule and the one-step denoise update.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Arrays indexed by `t ∈ 0..=T`. `alpha[t]` is the cumulative product of
/// `1 - b_s` over per-step betas `b_s`, `beta[t] = 1 - alpha[t]`, and
/// `sigma[t]` the posterior standard deviation. Index 0 holds the
/// boundary values `alpha[0] = 1`, `beta[0] = beta[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub config: ScheduleConfig,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let n = config.timesteps;
        if n < 2 {
            return Err(Error::Schedule(format!("need at least 2 timesteps, got {n}")));
        }
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(config.beta_start) || !ok(config.beta_end) {
            return Err(Error::Schedule("per-step betas must lie in (0, 1)".into()));
        }
        let mut alpha = vec![1.0; n + 1];
        let mut sigma = vec![0.0; n + 1];
        for t in 1..=n {
            let b = config.beta_start + (config.beta_end - config.beta_start) * (t - 1) as f64 / (n - 1) as f64;
            alpha[t] = alpha[t - 1] * (1.0 - b);
            sigma[t] = (b * (1.0 - alpha[t - 1]) / (1.0 - alpha[t])).sqrt();
        }
        let mut beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        beta[0] = beta[1];
        Ok(Self {
            config,
            alpha,
            beta,
            sigma,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Schedule(format!("timestep {t} outside 1..={}", self.timesteps())));
        }
        Ok(())
    }

    /// Coefficients `(k_pred, k_fused)` applied to the predicted sample and
    /// the fused latent at step `t`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_timestep(t)?;
        step_coefficients(self.alpha[t - 1], self.alpha[t], self.beta[t - 1], self.beta[t])
    }
}

/// `(√α_{t-1} β_t / β_{t-1}, √α_t β_{t-1} / β_t)`.
pub fn step_coefficients(alpha_prev: f64, alpha_t: f64, beta_prev: f64, beta_t: f64) -> Result<(f64, f64)> {
    if beta_prev == 0.0 || beta_t == 0.0 {
        return Err(Error::Schedule("zero noise level in denoise step".into()));
    }
    Ok((alpha_prev.sqrt() * beta_t / beta_prev, alpha_t.sqrt() * beta_prev / beta_t))
}

/// `z_D = k_pred Z_com + k_fused z_com + σ_t ε`; no noise means ε = 0.
pub fn denoise_step(
    predicted: &Tensor,
    fused: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    predicted.same_shape(fused, "denoise_step")?;
    let (kp, kf) = schedule.coefficients(t)?;
    let mut out = predicted.zeros_like();
    for i in 0..out.data.len() {
        out.data[i] = kp * predicted.data[i] + kf * fused.data[i];
    }
    if let Some(eps) = noise {
        eps.same_shape(predicted, "denoise_step noise")?;
        let s = schedule.sigma[t];
        for (o, e) in out.data.iter_mut().zip(&eps.data) {
            *o += s * e;
        }
    }
    Ok(out)
}
