//! Noise schedule and reverse-step update rules.
//!
//! Timesteps are 0-based: `t = 0` is the least noisy level and the step
//! after it lands on clean data. A strided step goes from `t` to `prev`
//! (`None` meaning clean data) and uses the effective transition between the
//! two levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `betas` evenly spaced from `beta_min` to `beta_max` over `steps`
    /// levels.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min ≤ beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::OutOfBounds(format!(
                "timestep {t} of {}",
                self.len()
            )));
        }
        Ok(())
    }

    fn alpha_bar_at(&self, prev: Option<usize>) -> f64 {
        prev.map_or(1.0, |p| self.alpha_bars[p])
    }

    fn check_pair(&self, t: usize, prev: Option<usize>) -> Result<()> {
        self.check(t)?;
        if let Some(p) = prev {
            if p >= t {
                return Err(Error::InvalidArgument(format!(
                    "step from {t} to {p} is not backwards"
                )));
            }
        }
        Ok(())
    }
}

/// `sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`
pub fn forward_noise(
    x0: &Tensor5,
    t: usize,
    eps: &Tensor5,
    sched: &NoiseSchedule,
) -> Result<Tensor5> {
    sched.check(t)?;
    let ab = sched.alpha_bars[t];
    x0.axpby(ab.sqrt() as f32, eps, (1.0 - ab).sqrt() as f32)
}

/// `steps` timesteps evenly strided over the schedule, noisiest first.
pub fn inference_timesteps(schedule_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > schedule_len {
        return Err(Error::InvalidArgument(format!(
            "{steps} sampling steps over a schedule of {schedule_len}"
        )));
    }
    Ok((0..steps).rev().map(|i| i * schedule_len / steps).collect())
}

/// Clean-sample estimate `(x - sqrt(1 - ᾱ_t) eps) / sqrt(ᾱ_t)`.
pub fn predict_x0(x: &Tensor5, t: usize, eps: &Tensor5, sched: &NoiseSchedule) -> Result<Tensor5> {
    sched.check(t)?;
    let ab = sched.alpha_bars[t];
    let inv = 1.0 / ab.sqrt();
    x.axpby(inv as f32, eps, (-(1.0 - ab).sqrt() * inv) as f32)
}

/// Ancestral step from `t` to `prev`. Adds `sqrt(beta_eff) z` with `z` drawn
/// from `noise_seed` unless landing on clean data.
pub fn ancestral_step(
    x: &Tensor5,
    t: usize,
    prev: Option<usize>,
    eps: &Tensor5,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<Tensor5> {
    sched.check_pair(t, prev)?;
    let ab_t = sched.alpha_bars[t];
    let a_eff = ab_t / sched.alpha_bar_at(prev);
    let b_eff = 1.0 - a_eff;
    let c_x = 1.0 / a_eff.sqrt();
    let c_e = -b_eff / (1.0 - ab_t).sqrt() * c_x;
    let mean = x.axpby(c_x as f32, eps, c_e as f32)?;
    match prev {
        None => Ok(mean),
        Some(_) => {
            let z = Tensor5::randn(x.ledger(), x.shape(), noise_seed)?;
            mean.axpby(1.0, &z, b_eff.sqrt() as f32)
        }
    }
}

/// Single-step ancestral update from `t` to `t - 1`.
pub fn reverse_step_ancestral(
    x: &Tensor5,
    t: usize,
    eps: &Tensor5,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<Tensor5> {
    ancestral_step(x, t, t.checked_sub(1), eps, sched, noise_seed)
}

/// Deterministic implicit step (no added noise).
pub fn ddim_step(
    x: &Tensor5,
    t: usize,
    prev: Option<usize>,
    eps: &Tensor5,
    sched: &NoiseSchedule,
) -> Result<Tensor5> {
    sched.check_pair(t, prev)?;
    let ab_t = sched.alpha_bars[t];
    let ab_p = sched.alpha_bar_at(prev);
    let r = (ab_p / ab_t).sqrt();
    let c_e = (1.0 - ab_p).sqrt() - r * (1.0 - ab_t).sqrt();
    x.axpby(r as f32, eps, c_e as f32)
}

/// Euler step of the probability-flow ODE over `t - prev` levels:
/// `x + Δ · ½ β_t · (x - eps / sqrt(1 - ᾱ_t))`.
pub fn euler_step(
    x: &Tensor5,
    t: usize,
    prev: Option<usize>,
    eps: &Tensor5,
    sched: &NoiseSchedule,
) -> Result<Tensor5> {
    sched.check_pair(t, prev)?;
    let delta = (t as i64 - prev.map_or(-1, |p| p as i64)) as f64;
    let coef = delta * 0.5 * sched.betas[t];
    let c_e = -coef / (1.0 - sched.alpha_bars[t]).sqrt();
    x.axpby((1.0 + coef) as f32, eps, c_e as f32)
}

/// `eps_u + g (eps_c - eps_u)`, evaluated as `(1 - g) eps_u + g eps_c`
/// so that `g = 0` and `g = 1` return the branches exactly.
pub fn cfg_combine(eps_uncond: &Tensor5, eps_cond: &Tensor5, guidance: f32) -> Result<Tensor5> {
    eps_uncond.axpby(1.0 - guidance, eps_cond, guidance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ancestral,
    Ddim,
    Euler,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Option<SamplerKind> {
        match s {
            "ancestral" => Some(SamplerKind::Ancestral),
            "ddim" => Some(SamplerKind::Ddim),
            "euler" => Some(SamplerKind::Euler),
            _ => None,
        }
    }

    pub fn step(
        self,
        x: &Tensor5,
        t: usize,
        prev: Option<usize>,
        eps: &Tensor5,
        sched: &NoiseSchedule,
        noise_seed: u64,
    ) -> Result<Tensor5> {
        match self {
            SamplerKind::Ancestral => ancestral_step(x, t, prev, eps, sched, noise_seed),
            SamplerKind::Ddim => ddim_step(x, t, prev, eps, sched),
            SamplerKind::Euler => euler_step(x, t, prev, eps, sched),
        }
    }
}
