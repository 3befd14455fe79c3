//! Closed-form DDPM mathematics: schedules, forward noising, the ancestral
//! reverse step for an x0-predicting network, and the deterministic
//! signal/noise transfer used by progressive distillation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-step noise tables, indexed by step `t ∈ [1, T]`.
///
/// Index 0 is the clean-data level (`ᾱ₀ = 1`, `a₀ = 1`, `s₀ = 0`) and is
/// accepted by [`NoiseSchedule::scales`] but not by the per-step accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    signal_scale: Vec<f64>,
    noise_scale: Vec<f64>,
    snr: Vec<f64>,
}

/// `(a, s)` = `(sqrt(ᾱ), sqrt(1 − ᾱ))` at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scales {
    pub signal: f64,
    pub noise: f64,
}

impl Scales {
    pub fn snr(&self) -> f64 {
        (self.signal * self.signal) / (self.noise * self.noise)
    }
}

/// How the variance of the ancestral step is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// `σ_t = sqrt(β_t)` at every step.
    Beta,
    /// `σ_t = sqrt(β_t)`, except `σ_1 = 0`.
    #[default]
    ZeroAtLast,
}

/// A noisy sample together with its step index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Tensor,
    pub t: usize,
}

/// Linear β schedule from `beta_start` to `beta_end` inclusive.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let in_unit = |b: f64| b > 0.0 && b < 1.0;
    if !in_unit(beta_start) || !in_unit(beta_end) || beta_start > beta_end {
        return Err(Error::Config(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got start={beta_start}, end={beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// The β bounds the model uses for a `steps`-step schedule: the classic
/// `1e-4 … 0.02` range rescaled by `1000 / steps`, capped below 1.
pub fn scaled_beta_bounds(steps: usize) -> (f64, f64) {
    let k = 1000.0 / steps.max(1) as f64;
    ((1e-4 * k).min(0.999), (0.02 * k).min(0.999))
}

pub fn scaled_linear_schedule(steps: usize) -> Result<NoiseSchedule> {
    let (lo, hi) = scaled_beta_bounds(steps);
    build_schedule(steps, lo, hi)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self::from_tables(betas, alphas, alpha_bars))
    }

    /// Rebuild a schedule from cumulative products, e.g. a subsampled one.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let mut prev = 1.0;
        let mut alphas = Vec::with_capacity(alpha_bars.len());
        for &ab in &alpha_bars {
            if !(ab > 0.0 && ab < prev) {
                return Err(Error::Config(format!(
                    "cumulative alphas must be strictly decreasing in (0, 1), got {ab} after {prev}"
                )));
            }
            alphas.push(ab / prev);
            prev = ab;
        }
        let betas = alphas.iter().map(|a| 1.0 - a).collect();
        Ok(Self::from_tables(betas, alphas, alpha_bars))
    }

    fn from_tables(betas: Vec<f64>, alphas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        let signal_scale: Vec<f64> = alpha_bars.iter().map(|ab| ab.sqrt()).collect();
        let noise_scale: Vec<f64> = alpha_bars.iter().map(|ab| (1.0 - ab).sqrt()).collect();
        let snr = alpha_bars.iter().map(|ab| ab / (1.0 - ab)).collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            signal_scale,
            noise_scale,
            snr,
        }
    }

    /// Keep every `factor`-th step: new step `τ` has the cumulative product
    /// of old step `factor·τ`.
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.num_steps() % factor != 0 {
            return Err(Error::Config(format!(
                "cannot subsample a {}-step schedule by {factor}",
                self.num_steps()
            )));
        }
        let bars = (1..=self.num_steps() / factor)
            .map(|tau| self.alpha_bars[tau * factor - 1])
            .collect();
        Self::from_alpha_bars(bars)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn signal_scales(&self) -> &[f64] {
        &self.signal_scale
    }

    pub fn noise_scales(&self) -> &[f64] {
        &self.noise_scale
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snr
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::StepRange {
                step: t,
                min: 1,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.snr[t - 1]
    }

    /// Signal/noise scales at level `t ∈ [0, T]`.
    pub fn scales(&self, t: usize) -> Result<Scales> {
        if t == 0 {
            return Ok(Scales {
                signal: 1.0,
                noise: 0.0,
            });
        }
        self.check_step(t)?;
        Ok(Scales {
            signal: self.signal_scale[t - 1],
            noise: self.noise_scale[t - 1],
        })
    }

    /// `σ_t` of the ancestral step.
    pub fn sigma(&self, t: usize, mode: SigmaMode) -> f64 {
        match mode {
            SigmaMode::ZeroAtLast if t == 1 => 0.0,
            _ => self.beta(t).sqrt(),
        }
    }
}

/// `x_t = a_t·x0 + s_t·eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<LatentState> {
    x0.ensure_same_shape(eps, "q_sample noise")?;
    schedule.check_step(t)?;
    let sc = schedule.scales(t)?;
    let x = x0.zip_map(eps, |x, e| sc.signal * x + sc.noise * e);
    Ok(LatentState { x, t })
}

/// Noise implied by an x0 estimate: `(x_t − a_t·x̂0) / s_t`.
pub fn x0_to_eps(state: &LatentState, x0_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    state.x.ensure_same_shape(x0_hat, "x0_to_eps estimate")?;
    let sc = schedule.scales(state.t)?;
    if sc.noise <= 0.0 {
        return Err(Error::Singularity(format!(
            "noise scale is zero at t={}",
            state.t
        )));
    }
    Ok(state
        .x
        .zip_map(x0_hat, |x, x0| (x - sc.signal * x0) / sc.noise))
}

/// One reverse DDPM step, `x_t → x_{t−1}`:
/// `(1/sqrt(α_t))·(x_t − (β_t/sqrt(1−ᾱ_t))·ε̂) + σ_t·z`.
pub fn ancestral_step(
    state: &LatentState,
    x0_hat: &Tensor,
    schedule: &NoiseSchedule,
    z: &Tensor,
    mode: SigmaMode,
) -> Result<LatentState> {
    let t = state.t;
    schedule.check_step(t)?;
    let eps_hat = x0_to_eps(state, x0_hat, schedule)?;
    let alpha = schedule.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = schedule.sigma(t, mode);
    let mut x = state
        .x
        .zip_map(&eps_hat, |x, e| inv_sqrt_alpha * (x - coef * e));
    if sigma > 0.0 {
        state.x.ensure_same_shape(z, "ancestral_step noise")?;
        x.axpy(sigma, z);
    }
    Ok(LatentState { x, t: t - 1 })
}

/// Deterministic move between two noise levels that keeps the implied noise
/// fixed: `x_to = a_to·x̂0 + (s_to/s_from)·(x_from − a_from·x̂0)`.
pub fn transfer(x_from: &Tensor, x0_hat: &Tensor, from: Scales, to: Scales) -> Result<Tensor> {
    x_from.ensure_same_shape(x0_hat, "transfer estimate")?;
    if from.noise <= 0.0 {
        return Err(Error::Singularity(
            "source noise scale is zero in transfer".into(),
        ));
    }
    let ratio = to.noise / from.noise;
    Ok(x_from.zip_map(x0_hat, |x, x0| {
        to.signal * x0 + ratio * (x - from.signal * x0)
    }))
}
