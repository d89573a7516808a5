//! Noise schedules for the Gaussian diffusion process.
//!
//! A schedule holds the per-step retention factors `alpha_t in (0,1)` and
//! their running products `gamma_t = prod_{i<=t} alpha_i`, with the
//! convention `gamma_0 = 1`. `gamma` is stored exactly as the running
//! product of the stored `alpha`, so recomputing the product reproduces it
//! bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Terminal ceiling used by training configurations: sampling must be able to
/// start from (nearly) pure noise, so `gamma_T` has to be small.
pub const DEFAULT_GAMMA_TERMINAL: f64 = 0.01;

/// Retention schedule `alpha_1..alpha_T` with cumulative `gamma_1..gamma_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    gamma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a linear-beta schedule: `beta_t` interpolates from `beta_start`
    /// to `beta_end` over `t_max` steps and `alpha_t = 1 - beta_t`.
    ///
    /// `gamma_terminal_max` rejects schedules that retain too much signal at
    /// step `T` to be usable for generation; pass `1.0` to disable the check
    /// (useful for small hand-built schedules in unit math).
    pub fn linear(
        t_max: usize,
        beta_start: f64,
        beta_end: f64,
        gamma_terminal_max: f64,
    ) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "beta endpoints ({beta_start}, {beta_end}) must lie in (0, 1)"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::Schedule(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let alpha: Vec<f64> = (0..t_max)
            .map(|i| {
                let frac = if t_max == 1 {
                    0.0
                } else {
                    i as f64 / (t_max - 1) as f64
                };
                1.0 - (beta_start + (beta_end - beta_start) * frac)
            })
            .collect();
        Self::from_alpha(alpha, gamma_terminal_max)
    }

    /// Builds a schedule directly from retention factors.
    pub fn from_alpha(alpha: Vec<f64>, gamma_terminal_max: f64) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Schedule("empty alpha sequence".into()));
        }
        if !alpha.iter().all(|&a| a > 0.0 && a < 1.0) {
            return Err(Error::Schedule("every alpha must lie in (0, 1)".into()));
        }
        let mut gamma = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            gamma.push(prod);
        }
        let terminal = *gamma.last().unwrap();
        if terminal > gamma_terminal_max {
            return Err(Error::Schedule(format!(
                "terminal gamma {terminal:.6} exceeds ceiling {gamma_terminal_max}; \
                 the schedule retains too much signal to start from pure noise"
            )));
        }
        // Strict monotonicity follows from alpha < 1 unless gamma underflows.
        if gamma.windows(2).any(|w| w[1] >= w[0]) || terminal <= 0.0 {
            return Err(Error::Schedule(
                "gamma is not strictly decreasing (underflow?)".into(),
            ));
        }
        Ok(NoiseSchedule { alpha, gamma })
    }

    /// Number of diffusion steps `T`.
    pub fn t_max(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `gamma_t` for `t` in `0..=T`, with `gamma_0 = 1`.
    pub fn gamma(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.gamma[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    /// Draws `(gamma, t)`: `t` uniform on `{1..T}`, then `gamma` uniform on
    /// the open segment `(gamma_t, gamma_{t-1})`.
    ///
    /// A zero-width segment (alpha negligibly close to 1) returns its
    /// endpoint. The result is always strictly inside `(gamma_T, 1)` except
    /// in that degenerate case.
    pub fn sample_gamma<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, usize) {
        let t = rng.random_range(1..=self.t_max());
        (sample_in_segment(self.gamma(t), self.gamma(t - 1), rng), t)
    }

    /// Re-grids the schedule onto `steps <= T` points for faster inference.
    ///
    /// The new gamma values are the original ones at (approximately) evenly
    /// spaced indices ending at `T`; the new alphas are their successive
    /// ratios. This is only legal because the denoiser conditions on gamma
    /// rather than on the step index.
    pub fn regrid(&self, steps: usize) -> Result<NoiseSchedule> {
        let t_max = self.t_max();
        if steps == 0 {
            return Err(Error::Schedule("cannot regrid to 0 steps".into()));
        }
        if steps > t_max {
            return Err(Error::Schedule(format!(
                "cannot regrid {t_max} steps up to {steps}"
            )));
        }
        if steps == t_max {
            return Ok(self.clone());
        }
        let mut alpha = Vec::with_capacity(steps);
        let mut prev_gamma = 1.0;
        for s in 1..=steps {
            // Even spacing with the last point pinned to T.
            let idx = ((s * t_max) as f64 / steps as f64).round() as usize;
            let idx = idx.clamp(1, t_max);
            let g = self.gamma(idx);
            alpha.push(g / prev_gamma);
            prev_gamma = g;
        }
        NoiseSchedule::from_alpha(alpha, 1.0)
    }
}

/// Uniform draw strictly inside `(lo, hi)`; a collapsed interval returns its
/// endpoint.
fn sample_in_segment<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi <= lo {
        return lo;
    }
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return lo + u * (hi - lo);
        }
    }
}

/// Serializable sampler settings shared between training and the CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t, self.beta_start, self.beta_end, DEFAULT_GAMMA_TERMINAL)
    }
}
