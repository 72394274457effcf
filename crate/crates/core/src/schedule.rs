//! Noise schedules `(α_t, ᾱ_t, β̃_t)` and strided sampling plans.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::format_f64;

/// First linear retention factor, `α_1 = 1 - 1e-4`.
pub const LINEAR_ALPHA_FIRST: f64 = 1.0 - 1e-4;
/// Last linear retention factor, `α_T = 0.98`.
pub const LINEAR_ALPHA_LAST: f64 = 0.98;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
/// Upper bound applied to every `1 - α_t` of the cosine schedule.
pub const MAX_NOISE_STEP: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedules need at least 2 steps, got {0}")]
    StepCountTooSmall(usize),
    #[error("cosine offset must lie in (0, 1), got {0}")]
    OffsetOutOfRange(f64),
    #[error("sampling step count K={k} must satisfy 2 <= K <= T={steps}")]
    InvalidK { k: usize, steps: usize },
}

/// Serializable description of how a schedule was built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ScheduleSpec {
    Linear { steps: usize },
    Cosine { steps: usize, offset: f64 },
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        match *self {
            ScheduleSpec::Linear { steps } => linear_schedule(steps),
            ScheduleSpec::Cosine { steps, offset } => cosine_schedule(steps, offset),
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleSpec::Linear { steps } | ScheduleSpec::Cosine { steps, .. } => steps,
        }
    }
}

/// The per-step retention factors and everything derived from them.
///
/// Steps are 1-based as in the diffusion literature; `alpha_bar(0) == 1`
/// and `beta_tilde(1) == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from `α_1..α_T`, filling `ᾱ` as a left-to-right
    /// running product and `β̃_t = (1-ᾱ_{t-1})/(1-ᾱ_t)·(1-α_t)`.
    fn from_alphas(spec: ScheduleSpec, alpha: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(alpha.len() + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let beta_tilde = (1..=alpha.len())
            .map(|t| {
                if t == 1 {
                    0.0
                } else {
                    (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * (1.0 - alpha[t - 1])
                }
            })
            .collect();
        Self {
            spec,
            alpha,
            alpha_bar,
            beta_tilde,
        }
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `α_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `β̃_t` for `t` in `1..=T`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Writes `t,alpha,alpha_bar,beta_tilde` rows for `t = 1..=T`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "alpha", "alpha_bar", "beta_tilde"])?;
        for t in 1..=self.steps() {
            w.write_record([
                t.to_string(),
                format_f64(self.alpha(t)),
                format_f64(self.alpha_bar(t)),
                format_f64(self.beta_tilde(t)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `α_t = α_1 - (t-1)(α_1-α_T)/(T-1)` with `α_1 = 1-1e-4`, `α_T = 0.98`.
pub fn linear_schedule(steps: usize) -> Result<NoiseSchedule, ScheduleError> {
    if steps < 2 {
        return Err(ScheduleError::StepCountTooSmall(steps));
    }
    // Written as a convex combination so both endpoints come out exact.
    let alpha = (0..steps)
        .map(|i| {
            let r = i as f64 / (steps - 1) as f64;
            LINEAR_ALPHA_FIRST * (1.0 - r) + LINEAR_ALPHA_LAST * r
        })
        .collect();
    Ok(NoiseSchedule::from_alphas(ScheduleSpec::Linear { steps }, alpha))
}

/// Cosine schedule: `ᾱ_t ∝ cos²(((t/T + s)/(1 + s))·π/2)`, then
/// `α_t = ᾱ_t/ᾱ_{t-1}` with `1 - α_t` clipped to [`MAX_NOISE_STEP`].
///
/// After clipping `ᾱ` is recomputed as the running product of the clipped
/// `α`, so the product invariant holds exactly.
pub fn cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule, ScheduleError> {
    if steps < 2 {
        return Err(ScheduleError::StepCountTooSmall(steps));
    }
    if !(offset > 0.0 && offset < 1.0) {
        return Err(ScheduleError::OffsetOutOfRange(offset));
    }
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64 + offset) * std::f64::consts::PI) / ((1.0 + offset) * 2.0);
        x.cos().powi(2)
    };
    let f0 = f(0);
    let analytic: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
    let alpha = (1..=steps)
        .map(|t| {
            let noise = (1.0 - analytic[t] / analytic[t - 1]).min(MAX_NOISE_STEP);
            1.0 - noise
        })
        .collect();
    Ok(NoiseSchedule::from_alphas(
        ScheduleSpec::Cosine { steps, offset },
        alpha,
    ))
}

/// Sampling steps `0 = t_0 < t_1 < … < t_K = T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StridePlan {
    steps: Vec<usize>,
}

impl StridePlan {
    /// Validates an explicit plan.
    pub fn new(steps: Vec<usize>, total: usize) -> Result<Self, ScheduleError> {
        let k = steps.len().saturating_sub(1);
        let ok = k >= 2
            && k <= total
            && steps[0] == 0
            && steps[k] == total
            && steps.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(ScheduleError::InvalidK { k, steps: total });
        }
        Ok(Self { steps })
    }

    /// `K`.
    pub fn len(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `t_k` for `k` in `0..=K`.
    pub fn step(&self, k: usize) -> usize {
        self.steps[k]
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }
}

/// `t_k = 1 + ⌊(k-1)(T-1)/(K-1)⌋` for `k = 1..=K`, plus `t_0 = 0`.
pub fn stride_steps(total: usize, k: usize) -> Result<StridePlan, ScheduleError> {
    if k < 2 || k > total {
        return Err(ScheduleError::InvalidK { k, steps: total });
    }
    let mut steps = Vec::with_capacity(k + 1);
    steps.push(0);
    for i in 1..=k {
        let mut t = 1 + (i - 1) * (total - 1) / (k - 1);
        // The floor never collides for K <= T; keep the plan strictly increasing regardless.
        if let Some(&prev) = steps.last() {
            if t <= prev {
                t = prev + 1;
            }
        }
        steps.push(t);
    }
    StridePlan::new(steps, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints() {
        let s = linear_schedule(1000).unwrap();
        assert_eq!(s.alpha(1), 0.9999);
        assert_eq!(s.alpha(1000), 0.98);
        let two = linear_schedule(2).unwrap();
        assert_eq!(two.alphas(), &[0.9999, 0.98]);
        assert_eq!(linear_schedule(1), Err(ScheduleError::StepCountTooSmall(1)));
    }

    #[test]
    fn linear_terminal_product_is_tiny() {
        let s = linear_schedule(1000).unwrap();
        // Product in log space with compensated summation as an independent check.
        let log_prod: f64 = (1..=1000).map(|t| s.alpha(t).ln()).sum();
        let ab = s.alpha_bar(1000);
        assert!(ab > 0.0 && ab < 5e-5);
        assert!((ab.ln() - log_prod).abs() < 1e-10);
    }

    #[test]
    fn cosine_basics() {
        let s = cosine_schedule(1000, DEFAULT_COSINE_OFFSET).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alphas().iter().all(|a| 1.0 - a <= MAX_NOISE_STEP + 1e-15 && 1.0 - a > 0.0));
        assert_eq!(1.0 - s.alpha(1000), MAX_NOISE_STEP);
        assert_eq!(cosine_schedule(10, 0.0), Err(ScheduleError::OffsetOutOfRange(0.0)));
        assert_eq!(cosine_schedule(10, 1.0), Err(ScheduleError::OffsetOutOfRange(1.0)));
    }

    #[test]
    fn invariants_hold_for_both_schedules() {
        for s in [linear_schedule(1000).unwrap(), cosine_schedule(1000, 0.008).unwrap()] {
            let ab = s.alpha_bars();
            assert!(ab.windows(2).all(|w| w[1] < w[0]));
            assert!(ab.iter().all(|&v| v > 0.0 && v <= 1.0));
            assert_eq!(s.beta_tilde(1), 0.0);
            let mut prod = 1.0;
            for t in 1..=s.steps() {
                prod *= s.alpha(t);
                assert_eq!(prod, s.alpha_bar(t));
                if t >= 2 {
                    assert!(s.beta_tilde(t) <= 1.0 - s.alpha(t));
                }
            }
        }
    }

    #[test]
    fn cosine_keeps_more_signal_early() {
        let lin = linear_schedule(1000).unwrap();
        let cos = cosine_schedule(1000, 0.008).unwrap();
        for t in 1..=500 {
            assert!(cos.alpha_bar(t) > lin.alpha_bar(t), "t={t}");
        }
    }

    #[test]
    fn stride_examples() {
        let p = stride_steps(1000, 100).unwrap();
        assert_eq!((p.step(0), p.step(1), p.step(2), p.step(100)), (0, 1, 11, 1000));
        assert_eq!(stride_steps(5, 5).unwrap().steps(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(stride_steps(10, 2).unwrap().steps(), &[0, 1, 10]);
        assert!(stride_steps(10, 11).is_err());
        assert!(stride_steps(10, 1).is_err());
    }

    #[test]
    fn stride_plans_are_strictly_increasing() {
        for total in 2..80 {
            for k in 2..=total {
                let p = stride_steps(total, k).unwrap();
                assert_eq!(p.len(), k);
                assert!(p.steps().windows(2).all(|w| w[0] < w[1]));
                assert_eq!(p.step(k), total);
            }
        }
    }

    #[test]
    fn csv_dump() {
        let mut buf = Vec::new();
        linear_schedule(3).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,alpha,alpha_bar,beta_tilde"));
        assert!(lines.next().unwrap().starts_with("1,9.9990000000000001e-1,9.9990000000000001e-1,0.0000000000000000e0"));
    }
}
