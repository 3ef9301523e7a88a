//! Variance-preserving noise schedule and the deterministic (eta = 0) DDIM
//! update used for both concept learning and transfer.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    DeterministicDdim,
}

/// Cumulative signal levels `alphas_bar[0..=T]` with `alphas_bar[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alphas_bar: Vec<f64>,
    sampler: Sampler,
}

impl DiffusionSchedule {
    pub const DEFAULT_STEPS: usize = 50;

    pub fn new(alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.len() < 2 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if alphas_bar[0] != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "alphas_bar[0] must be exactly 1, got {}",
                alphas_bar[0]
            )));
        }
        for w in alphas_bar.windows(2) {
            if !(w[1] > 0.0 && w[1] <= w[0]) {
                return Err(Error::InvalidArgument(
                    "alphas_bar must be positive and nonincreasing".into(),
                ));
            }
        }
        Ok(Self {
            alphas_bar,
            sampler: Sampler::DeterministicDdim,
        })
    }

    /// Stable-Diffusion style scaled-linear betas over 1000 training steps,
    /// subsampled to `steps` inference timesteps with leading spacing.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        const TRAIN_STEPS: usize = 1000;
        const BETA_START: f64 = 0.00085;
        const BETA_END: f64 = 0.012;
        if steps == 0 || steps > TRAIN_STEPS {
            return Err(Error::InvalidArgument(format!("steps must be in [1, {TRAIN_STEPS}]")));
        }
        let (s0, s1) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut cumprod = Vec::with_capacity(TRAIN_STEPS);
        let mut acc = 1.0;
        for i in 0..TRAIN_STEPS {
            let b = s0 + (s1 - s0) * i as f64 / (TRAIN_STEPS - 1) as f64;
            acc *= 1.0 - b * b;
            cumprod.push(acc);
        }
        let ratio = TRAIN_STEPS / steps;
        let mut alphas_bar = vec![1.0];
        alphas_bar.extend((1..=steps).map(|t| cumprod[((t - 1) * ratio + 1).min(TRAIN_STEPS - 1)]));
        Self::new(alphas_bar)
    }

    /// Schedule with `alphas_bar == 1` everywhere (no noise at any step).
    pub fn constant_one(steps: usize) -> Self {
        Self {
            alphas_bar: vec![1.0; steps + 1],
            sampler: Sampler::DeterministicDdim,
        }
    }

    pub fn max_timestep(&self) -> usize {
        self.alphas_bar.len() - 1
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn sampler(&self) -> Sampler {
        self.sampler
    }

    pub fn check_timestep(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.max_timestep() {
            return Err(Error::TimestepOutOfRange {
                t,
                min,
                max: self.max_timestep(),
            });
        }
        Ok(())
    }

    /// `x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps`.
    pub fn add_noise(&self, x0: ArrayView3<'_, f64>, eps: ArrayView3<'_, f64>, t: usize) -> Result<Array3<f64>> {
        self.check_timestep(t, 0)?;
        check_same(x0, eps, "add_noise")?;
        if t == 0 {
            return Ok(x0.to_owned());
        }
        let a = self.alphas_bar[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(ndarray::Zip::from(x0).and(eps).map_collect(|&x, &e| sa * x + sn * e))
    }

    /// One deterministic DDIM step from `t` to `t - 1`.
    pub fn denoise_step(&self, x_t: ArrayView3<'_, f64>, eps_pred: ArrayView3<'_, f64>, t: usize) -> Result<Array3<f64>> {
        self.check_timestep(t, 1)?;
        check_same(x_t, eps_pred, "denoise_step")?;
        let a_t = self.alphas_bar[t];
        let a_prev = self.alphas_bar[t - 1];
        let (sa_t, sn_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let (sa_prev, sn_prev) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        Ok(ndarray::Zip::from(x_t).and(eps_pred).map_collect(|&x, &e| {
            let x0 = (x - sn_t * e) / sa_t;
            sa_prev * x0 + sn_prev * e
        }))
    }
}

fn check_same(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, context: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(context, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}
