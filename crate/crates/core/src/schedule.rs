//! Noise schedules for the forward process.
//!
//! Indexing is 0..=T throughout. Entry 0 belongs to the embedding stage:
//! `beta(0)` is the variance of the jitter applied when an embedding enters the
//! diffusion chain, and `alpha_bar(t)` is the running product of `1 - beta(i)`
//! for `i` in `0..=t`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Offset inside the square root of the sqrt schedule.
pub const SQRT_OFFSET: f64 = 1e-4;
/// Floor applied to alpha-bar by the sqrt schedule (the raw formula goes negative at t = T).
pub const SQRT_ALPHA_BAR_FLOOR: f64 = 1e-5;
/// Upper clip on every beta.
pub const MAX_BETA: f64 = 0.999;
const MIN_BETA: f64 = 1e-12;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
/// Largest acceptable alpha-bar at t = T; larger values are reported as a warning.
pub const TERMINAL_ALPHA_BAR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Sqrt,
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Sqrt, ScheduleKind::Linear, ScheduleKind::Cosine];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Sqrt => "sqrt",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sqrt" => Ok(ScheduleKind::Sqrt),
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" | "t-cosine" => Ok(ScheduleKind::Cosine),
            other => Err(invalid(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Coefficients of the Gaussian posterior q(x_{t-1} | x_t, x_0).
///
/// The posterior mean is `c_xt * x_t + c_x0 * x_0` and its per-coordinate
/// variance is `var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub c_xt: f64,
    pub c_x0: f64,
    pub var: f64,
}

impl PosteriorCoeffs {
    pub fn mean(&self, x_t: f64, x_0: f64) -> f64 {
        self.c_xt * x_t + self.c_x0 * x_0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `None` for schedules assembled from explicit betas.
    kind: Option<ScheduleKind>,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Original timestep index of every step; present only after respacing.
    timestep_map: Option<Vec<usize>>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let t_max = steps as f64;
        let mut betas = vec![0.0; steps + 1];
        match kind {
            ScheduleKind::Sqrt => {
                let raw: Vec<f64> = (0..=steps)
                    .map(|t| (1.0 - (t as f64 / t_max + SQRT_OFFSET).sqrt()).max(SQRT_ALPHA_BAR_FLOOR))
                    .collect();
                betas[0] = 1.0 - raw[0];
                for t in 1..=steps {
                    betas[t] = 1.0 - raw[t] / raw[t - 1];
                }
            }
            ScheduleKind::Linear => {
                for (t, beta) in betas.iter_mut().enumerate().skip(1) {
                    *beta = if steps == 1 {
                        LINEAR_BETA_START
                    } else {
                        LINEAR_BETA_START
                            + (LINEAR_BETA_END - LINEAR_BETA_START) * (t - 1) as f64 / (steps - 1) as f64
                    };
                }
                betas[0] = betas[1];
            }
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let phase = ((t as f64 / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
                    phase.cos().powi(2)
                };
                for (t, beta) in betas.iter_mut().enumerate().skip(1) {
                    *beta = 1.0 - f(t) / f(t - 1);
                }
                betas[0] = betas[1];
            }
        }
        for beta in betas.iter_mut() {
            *beta = beta.clamp(MIN_BETA, MAX_BETA);
        }
        let mut schedule = Self::from_full_betas(betas);
        schedule.kind = Some(kind);
        schedule.validate()?;
        Ok(schedule)
    }

    /// Schedule from explicit `beta_1..beta_T` with no embedding-stage noise
    /// (alpha_bar(0) = 1).
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        let mut full = Vec::with_capacity(betas.len() + 1);
        full.push(0.0);
        full.extend_from_slice(betas);
        let schedule = Self::from_full_betas(full);
        schedule.validate()?;
        Ok(schedule)
    }

    fn from_full_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &beta in &betas {
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        Self { kind: None, betas, alpha_bars, timestep_map: None }
    }

    /// Checks the hard invariants and returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let steps = self.steps();
        if self.betas.len() != self.alpha_bars.len() || steps == 0 {
            return Err(invalid("schedule tables have inconsistent lengths"));
        }
        if !(0.0..1.0).contains(&self.betas[0]) {
            return Err(invalid(format!("embedding-stage beta {} outside [0, 1)", self.betas[0])));
        }
        for t in 1..=steps {
            let beta = self.betas[t];
            if !(beta > 0.0 && beta < 1.0) {
                return Err(invalid(format!("beta[{t}] = {beta} outside (0, 1)")));
            }
            if self.alpha_bars[t] >= self.alpha_bars[t - 1] {
                return Err(invalid(format!("alpha_bar not strictly decreasing at t = {t}")));
            }
            // Scaled by alpha_bar[t-1]: when a respaced step drops alpha_bar by
            // orders of magnitude, beta = 1 - ratio carries absolute, not
            // relative, rounding error.
            let expected = self.alpha_bars[t - 1] * (1.0 - beta);
            if (self.alpha_bars[t] - expected).abs() > 1e-12 * self.alpha_bars[t - 1] {
                return Err(invalid(format!("alpha_bar[{t}] inconsistent with beta[{t}]")));
            }
        }
        let mut warnings = Vec::new();
        if self.alpha_bars[steps] > TERMINAL_ALPHA_BAR {
            warnings.push(format!(
                "alpha_bar[T] = {:.3e} exceeds {TERMINAL_ALPHA_BAR:e}; x_T is not close to pure noise",
                self.alpha_bars[steps]
            ));
        }
        Ok(warnings)
    }

    pub fn kind(&self) -> Option<ScheduleKind> {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Variance of the embedding-stage jitter, `1 - alpha_bar(0)`.
    pub fn beta0(&self) -> f64 {
        self.betas[0]
    }

    pub fn timestep_map(&self) -> Option<&[usize]> {
        self.timestep_map.as_deref()
    }

    pub fn is_respaced(&self) -> bool {
        self.timestep_map.is_some()
    }

    /// Timestep index the denoiser should be conditioned on at step `t`.
    pub fn model_timestep(&self, t: usize) -> usize {
        match &self.timestep_map {
            Some(map) => map[t],
            None => t,
        }
    }

    /// Keeps `k` evenly spaced timesteps ending at T and recomputes betas so that
    /// the kept alpha-bars are unchanged.
    pub fn respace(&self, k: usize) -> Result<Self> {
        if self.timestep_map.is_some() {
            return Err(invalid("schedule is already respaced"));
        }
        let steps = self.steps();
        if k == 0 || k > steps {
            return Err(invalid(format!("respaced step count {k} must lie in 1..={steps}")));
        }
        let mut kept: Vec<usize> = (1..=k)
            .map(|i| ((i * steps) as f64 / k as f64).round() as usize)
            .collect();
        kept.dedup();

        let mut betas = Vec::with_capacity(kept.len() + 1);
        let mut alpha_bars = Vec::with_capacity(kept.len() + 1);
        let mut map = Vec::with_capacity(kept.len() + 1);
        betas.push(self.betas[0]);
        alpha_bars.push(self.alpha_bars[0]);
        map.push(0);
        let mut prev = 0;
        for &tau in &kept {
            let beta = if tau == prev + 1 {
                self.betas[tau]
            } else {
                1.0 - self.alpha_bars[tau] / self.alpha_bars[prev]
            };
            betas.push(beta);
            alpha_bars.push(self.alpha_bars[tau]);
            map.push(tau);
            prev = tau;
        }
        let respaced = Self { kind: self.kind, betas, alpha_bars, timestep_map: Some(map) };
        respaced.validate()?;
        Ok(respaced)
    }

    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        let steps = self.steps();
        if t == 0 || t > steps {
            return Err(Error::OutOfRange(format!("timestep {t} outside 1..={steps}")));
        }
        let beta = self.betas[t];
        let alpha = 1.0 - beta;
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let denom = 1.0 - ab;
        Ok(PosteriorCoeffs {
            c_xt: alpha.sqrt() * (1.0 - ab_prev) / denom,
            c_x0: ab_prev.sqrt() * beta / denom,
            var: beta * (1.0 - ab_prev) / denom,
        })
    }

    /// Writes one CSV row per step 1..=T. Respaced schedules get an extra
    /// `timestep_map` column holding the original index.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let respaced = self.timestep_map.is_some();
        if respaced {
            writeln!(out, "t,timestep_map,beta,alpha_bar,c_xt,c_x0,var")?;
        } else {
            writeln!(out, "t,beta,alpha_bar,c_xt,c_x0,var")?;
        }
        for t in 1..=self.steps() {
            let c = self.posterior_coeffs(t)?;
            if respaced {
                write!(out, "{t},{},", self.model_timestep(t))?;
            } else {
                write!(out, "{t},")?;
            }
            writeln!(
                out,
                "{:e},{:e},{:e},{:e},{:e}",
                self.betas[t], self.alpha_bars[t], c.c_xt, c.c_x0, c.var
            )?;
        }
        Ok(())
    }
}
