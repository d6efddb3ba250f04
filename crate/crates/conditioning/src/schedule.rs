//! Linear-β diffusion schedule and the time-dependent loss weight.

use std::f64::consts::FRAC_PI_2;

use crate::config::ScheduleConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    /// `betas[t - 1]` is β_t.
    pub betas: Vec<f64>,
    /// `alpha_bars[t - 1]` is ᾱ_t = Π_{s≤t} (1 − β_s).
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let (t, b1, bt) = (cfg.steps, cfg.beta_start, cfg.beta_end);
        if t < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {t}")));
        }
        if !(0.0 < b1 && b1 < bt && bt < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < β_1 < β_T < 1, got {b1} and {bt}"
            )));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| b1 + (bt - b1) * i as f64 / (t - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Precondition(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// z_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε.
pub fn diffusion_forward(x0: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Dimension(format!(
            "x0 has {} values, noise has {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bars[t - 1];
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// cos(tπ/2T), evaluated as sin((T−t)π/2T) so that it is exactly 0 at t = T.
pub fn spatial_weight(t: usize, steps: usize) -> Result<f64> {
    if steps == 0 || t > steps {
        return Err(Error::Precondition(format!("timestep {t} outside 0..={steps}")));
    }
    Ok((FRAC_PI_2 * (steps - t) as f64 / steps as f64).sin())
}
