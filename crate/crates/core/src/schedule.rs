//! Noise schedule, forward diffusion, and the deterministic implicit sampler update.

use crate::error::{Error, Result};
use crate::imaging::Raster;

/// Variance schedule: β_t, α_t = 1−β_t, ᾱ_t = Π α_i, for t = 1..=T.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β interpolation inclusive of both endpoints.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self { t_max, betas, alphas, alpha_bars })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// β_t for 1-indexed t.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t for 1-indexed t; ᾱ₀ is defined as 1 so the final implicit step
    /// returns the clean estimate exactly.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::Config(format!("timestep {t} outside 1..={}", self.t_max)));
        }
        Ok(())
    }
}

/// Descending (t, t_next) pairs for implicit sampling with S of T steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    pairs: Vec<(usize, usize)>,
}

impl TimestepPlan {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn first_t(&self) -> usize {
        self.pairs[0].0
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Build the sampling plan: t = (i−1)·T/S + 1 for i = S..1, ending at (1, 0).
///
/// S must divide T so the index formula stays integral; non-divisors are
/// rejected rather than rounded.
pub fn make_plan(t_max: usize, s: usize) -> Result<TimestepPlan> {
    if s == 0 || s > t_max {
        return Err(Error::Config(format!("sample steps {s} outside 1..={t_max}")));
    }
    if t_max % s != 0 {
        return Err(Error::Config(format!("sample steps {s} must divide {t_max}")));
    }
    let stride = t_max / s;
    let mut pairs = Vec::with_capacity(s);
    for i in (1..=s).rev() {
        let t = (i - 1) * stride + 1;
        let t_next = if i > 1 { (i - 2) * stride + 1 } else { 0 };
        pairs.push((t, t_next));
    }
    Ok(TimestepPlan { pairs })
}

/// Forward diffusion: x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn q_sample(x0: &Raster, t: usize, eps: &Raster, sched: &NoiseSchedule) -> Result<Raster> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| sa * x + sb * e)
}

/// Deterministic implicit update from t to t_next given a noise estimate:
/// x ← √ᾱ_{t_next}·((x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t) + √(1−ᾱ_{t_next})·ε̂.
pub fn ddim_step(
    x_t: &Raster,
    eps_hat: &Raster,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Raster> {
    sched.check_t(t)?;
    if t_next >= t {
        return Err(Error::Config(format!("ddim_step requires t > t_next, got {t} <= {t_next}")));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_n = sched.alpha_bar(t_next);
    let (sq_t, sq_n) = (ab_t.sqrt(), ab_n.sqrt());
    let sig_t = (1.0 - ab_t).sqrt();
    let sig_n = (1.0 - ab_n).sqrt();
    x_t.zip_map(eps_hat, |x, e| sq_n * ((x - sig_t * e) / sq_t) + sig_n * e)
}
