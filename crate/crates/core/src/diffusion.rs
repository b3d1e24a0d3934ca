//! Noise schedule and closed-form Gaussian diffusion.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `t = T` the
//! last. `alpha_bar(0)` is defined as 1 so that step 0 is the clean image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Parameters a schedule is rebuilt from. Stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default = "default_kind")]
    pub kind: ScheduleKind,
}

fn default_kind() -> ScheduleKind {
    ScheduleKind::Linear
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => build_schedule(self.total_steps, self.beta_start, self.beta_end),
        }
    }
}

/// Precomputed β, α and ᾱ tables. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear β schedule from `beta_start` to `beta_end` inclusive.
pub fn build_schedule(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if total_steps == 0 {
        return Err(Error::config("total_steps", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::config("beta_start", format!("{beta_start} not in (0, 1)")));
    }
    if !(beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::config("beta_end", format!("{beta_end} not in (0, 1)")));
    }
    if beta_start > beta_end {
        return Err(Error::config(
            "beta_end",
            format!("{beta_end} is below beta_start {beta_start}"),
        ));
    }

    let beta: Vec<f64> = if total_steps == 1 {
        vec![beta_start]
    } else {
        let span = (total_steps - 1) as f64;
        (0..total_steps)
            .map(|i| {
                if i == total_steps - 1 {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * (i as f64 / span)
                }
            })
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();

    Ok(NoiseSchedule {
        params: ScheduleParams {
            total_steps,
            beta_start,
            beta_end,
            kind: ScheduleKind::Linear,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn kind(&self) -> ScheduleKind {
        self.params.kind
    }

    pub fn total_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            Err(Error::Index {
                t,
                max: self.total_steps(),
            })
        } else {
            Ok(())
        }
    }

    /// β_t, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// α_t, 1-based.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t for `t` in `0..=T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Variance of q(x_{t-1} | x_t, x_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

/// Samples q(x_t | x_0) = √ᾱ_t x_0 + √(1 − ᾱ_t) ε with caller-supplied ε.
pub fn forward_diffuse(
    x0: &ImageTensor,
    t: usize,
    noise: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    diffuse_at(x0, t, noise, schedule)
}

fn diffuse_at(
    x0: &ImageTensor,
    t: usize,
    noise: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    let ab = schedule.alpha_bar(t);
    x0.check_same_shape(noise, "x0 vs noise")?;
    x0.affine(ab.sqrt(), noise, (1.0 - ab).sqrt())
}

/// Training pair `(x_t, x_{t-1})` built from one shared noise draw.
///
/// At `t = 1` the second element is `x0` itself.
pub fn diffuse_pair(
    x0: &ImageTensor,
    t: usize,
    noise: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<(ImageTensor, ImageTensor)> {
    schedule.check_t(t)?;
    let xt = diffuse_at(x0, t, noise, schedule)?;
    let prev = diffuse_at(x0, t - 1, noise, schedule)?;
    Ok((xt, prev))
}

/// Mean and variance of the Gaussian posterior q(x_{t-1} | x_t, x_0).
pub fn posterior_params(
    x0: &ImageTensor,
    xt: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(ImageTensor, f64)> {
    schedule.check_t(t)?;
    let (c0, ct) = posterior_coefficients(t, schedule);
    let mean = x0.affine(c0, xt, ct)?;
    Ok((mean, schedule.posterior_variance(t)))
}

/// Coefficients on `(x_0, x_t)` of the posterior mean.
pub fn posterior_coefficients(t: usize, schedule: &NoiseSchedule) -> (f64, f64) {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let beta = schedule.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    (c0, ct)
}
