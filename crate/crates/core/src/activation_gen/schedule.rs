//! Forward-diffusion noise schedule and the noising / epsilon-loss helpers.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, TideError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Per-step variances and their cumulative products `alpha_bar[t] = prod_{s<=t} (1 - beta[s])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(TideError::config("noise schedule: T must be >= 1"));
        }
        if !(beta_start > 0.0) {
            return Err(TideError::config(format!(
                "noise schedule: beta_start = {beta_start} must be > 0"
            )));
        }
        if !(beta_end < 1.0) {
            return Err(TideError::config(format!(
                "noise schedule: beta_end = {beta_end} must be < 1"
            )));
        }
        if beta_start > beta_end {
            return Err(TideError::config(format!(
                "noise schedule: beta_start = {beta_start} exceeds beta_end = {beta_end}"
            )));
        }

        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                if steps == 1 {
                    vec![beta_start]
                } else {
                    let span = beta_end - beta_start;
                    (0..steps)
                        .map(|t| beta_start + span * t as f64 / (steps - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                // Squared-cosine cumulative curve with offset s = 0.008, converted to
                // per-step betas and clipped to the configured range.
                let s = 0.008;
                let f = |t: f64| {
                    let x = (t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (0..steps)
                    .map(|t| {
                        let b = 1.0 - f(t as f64 + 1.0) / f(t as f64);
                        b.clamp(beta_start, beta_end)
                    })
                    .collect()
            }
        };

        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            kind,
            beta,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(TideError::config(format!(
                "timestep {t} out of range for T = {}",
                self.steps()
            )))
        }
    }
}

/// A clean latent, its noise draw, the timestep, and the noised latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub z0: Vec<f32>,
    pub eps: Vec<f32>,
    pub t: usize,
    pub zt: Vec<f32>,
}

/// `zt = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps`, elementwise.
pub fn add_noise(
    z0: &[f32],
    eps: &[f32],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<DiffusionSample> {
    check_dim("noise shape", z0.len(), eps.len())?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let zt = z0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Ok(DiffusionSample {
        z0: z0.to_vec(),
        eps: eps.to_vec(),
        t,
        zt,
    })
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss(noise_pred: &[f32], eps: &[f32]) -> Result<f64> {
    check_dim("noise prediction shape", eps.len(), noise_pred.len())?;
    if eps.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = noise_pred
        .iter()
        .zip(eps)
        .map(|(&p, &e)| {
            let d = p as f64 - e as f64;
            d * d
        })
        .sum();
    Ok(sum / eps.len() as f64)
}
