//! Linear noise schedules and the accelerated starting step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BETA_START: f64 = 1e-4;

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            beta_start: DEFAULT_BETA_START,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// β, α and cumulative ᾱ chains for steps `1..=S` (stored 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    config: ScheduleConfig,
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
}

/// β_s = β_start + (s−1)/(S−1)·(β_end − β_start) for s = 1…S.
pub fn linear_schedule<T: Scalar>(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule<T>> {
    if steps < 2 {
        return Err(Error::config(
            "schedule.steps",
            "need at least 2 diffusion steps",
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(
            "schedule.beta_end",
            format!("need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"),
        ));
    }
    let beta: Vec<T> = (0..steps)
        .map(|i| T::lit(beta_start + (i as f64) / ((steps - 1) as f64) * (beta_end - beta_start)))
        .collect();
    Ok(NoiseSchedule::from_betas(
        ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        },
        beta,
    ))
}

impl<T: Scalar> NoiseSchedule<T> {
    fn from_betas(config: ScheduleConfig, beta: Vec<T>) -> Self {
        let alpha: Vec<T> = beta.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = T::one();
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        NoiseSchedule {
            config,
            beta,
            alpha,
            alpha_bar,
        }
    }

    /// Arbitrary β chain; used for degenerate schedules in tests and diagnostics.
    pub fn from_beta_chain(beta: Vec<T>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b >= T::zero() && b < T::one())) {
            return Err(Error::contract("β values must lie in [0, 1)"));
        }
        let config = ScheduleConfig {
            steps: beta.len(),
            beta_start: beta[0].to_f64_lossy(),
            beta_end: beta[beta.len() - 1].to_f64_lossy(),
        };
        Ok(Self::from_betas(config, beta))
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, s: usize) -> Result<usize> {
        if s == 0 || s > self.steps() {
            return Err(Error::contract(format!(
                "diffusion step {s} outside 1..={}",
                self.steps()
            )));
        }
        Ok(s - 1)
    }

    /// β_s for 1-based `s`.
    pub fn beta(&self, s: usize) -> Result<T> {
        Ok(self.beta[self.check(s)?])
    }

    pub fn alpha(&self, s: usize) -> Result<T> {
        Ok(self.alpha[self.check(s)?])
    }

    /// ᾱ_s for 1-based `s`; ᾱ_0 = 1.
    pub fn alpha_bar(&self, s: usize) -> Result<T> {
        if s == 0 {
            return Ok(T::one());
        }
        Ok(self.alpha_bar[self.check(s)?])
    }

    pub fn betas(&self) -> &[T] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }

    /// Posterior variance β̃_s = β_s·(1−ᾱ_{s−1})/(1−ᾱ_s).
    pub fn posterior_variance(&self, s: usize) -> Result<T> {
        let ab = self.alpha_bar(s)?;
        let ab_prev = self.alpha_bar(s - 1)?;
        let denom = T::one() - ab;
        if denom <= T::zero() {
            return Ok(T::zero());
        }
        Ok(self.beta(s)? * (T::one() - ab_prev) / denom)
    }

    /// 1-based S′ minimizing |√ᾱ_i − 1/2|; ties go to the smaller index.
    pub fn accelerated_step(&self) -> usize {
        let half = T::lit(0.5);
        let mut best = 0;
        let mut best_gap = T::infinity();
        for (i, &ab) in self.alpha_bar.iter().enumerate() {
            let gap = (ab.sqrt() - half).abs();
            if gap < best_gap {
                best_gap = gap;
                best = i;
            }
        }
        best + 1
    }
}

/// Closed-form estimate `2·√(S·ln2/β_end)` of the accelerated step.
pub fn approx_step(steps: usize, beta_end: f64) -> f64 {
    2.0 * (steps as f64 * std::f64::consts::LN_2 / beta_end).sqrt()
}

pub const TABLE_BETAS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
pub const TABLE_STEPS: [usize; 6] = [50, 100, 200, 300, 400, 500];

/// Accelerated step for every `(β_end, S)` pair, rows indexed by β_end.
pub fn accelerated_step_grid(
    betas: &[f64],
    steps: &[usize],
    beta_start: f64,
) -> Result<Vec<Vec<usize>>> {
    betas
        .iter()
        .map(|&b| {
            steps
                .iter()
                .map(|&s| Ok(linear_schedule::<f64>(s, beta_start, b)?.accelerated_step()))
                .collect()
        })
        .collect()
}

/// The standard 4×6 grid over β_end ∈ {0.1,…,0.4} and S ∈ {50,…,500}.
pub fn table4() -> Vec<Vec<usize>> {
    accelerated_step_grid(&TABLE_BETAS, &TABLE_STEPS, DEFAULT_BETA_START)
        .expect("fixed grid is valid")
}
