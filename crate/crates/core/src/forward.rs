//! The forward noising process, its backward posterior given `x0`, and the
//! discretized decoder likelihood on the 8-bit grid.

use thiserror::Error;

use crate::numerics::Tensor;
use crate::schedule::NoiseSchedule;

/// Number of quantization levels on `[-1, 1]`; neighbouring levels are `2/255` apart.
pub const GRID_LEVELS: usize = 256;
/// Half of the grid spacing.
pub const HALF_BIN: f64 = 1.0 / 255.0;
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForwardError {
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("coordinate {index} = {value} is not on the 256-level grid")]
    OffGridInput { index: usize, value: f64 },
    #[error("decoder variance must be positive, got {0}")]
    NonpositiveVariance(f64),
}

/// A clean datum together with its closed-form noised version at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x0: Tensor,
    pub t: usize,
    pub eps: Tensor,
    pub xt: Tensor,
}

fn check_step(t: usize, sched: &NoiseSchedule) -> Result<(), ForwardError> {
    if t == 0 || t > sched.steps() {
        return Err(ForwardError::StepOutOfRange { t, steps: sched.steps() });
    }
    Ok(())
}

fn check_len(expected: usize, found: usize) -> Result<(), ForwardError> {
    if expected != found {
        return Err(ForwardError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·eps`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<NoisedSample, ForwardError> {
    check_step(t, sched)?;
    check_len(x0.len(), eps.len())?;
    let ab = sched.alpha_bar(t);
    let xt = noised(x0, eps, ab);
    Ok(NoisedSample {
        x0: x0.clone(),
        t,
        eps: eps.clone(),
        xt,
    })
}

/// Closed-form noising with an explicit `ᾱ`; shapes are taken from `x0`.
pub fn noised(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e).expect("equal lengths")
}

/// Coefficients `(c_xt, c_x0)` of the posterior mean
/// `μ̃_t = c_xt·x_t + c_x0·x0`, for `t >= 2`.
pub fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64), ForwardError> {
    check_step(t, sched)?;
    if t == 1 {
        return Err(ForwardError::StepOutOfRange { t, steps: sched.steps() });
    }
    let (a, ab, ab_prev) = (sched.alpha(t), sched.alpha_bar(t), sched.alpha_bar(t - 1));
    Ok((
        a.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        ab_prev.sqrt() * (1.0 - a) / (1.0 - ab),
    ))
}

/// Mean and variance of `q(x_{t-1} | x_t, x0)` for `2 <= t <= T`.
///
/// Step 1 has no Gaussian posterior term; it is scored by
/// [`decoder_loglik`] instead.
pub fn posterior_mean_var(xt: &Tensor, x0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(Tensor, f64), ForwardError> {
    let (cx, c0) = posterior_coefficients(t, sched)?;
    check_len(xt.len(), x0.len())?;
    let mean = xt.zip_map(x0, |a, b| cx * a + c0 * b).expect("equal lengths");
    Ok((mean, sched.beta_tilde(t)))
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// The grid point `-1 + 2k/255`.
pub fn grid_value(k: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / 255.0
}

/// Grid index `k` with `x = -1 + 2k/255`, if `x` is on the grid.
pub fn grid_index(x: f64) -> Option<usize> {
    let k = (x + 1.0) * 255.0 / 2.0;
    let r = k.round();
    if (k - r).abs() <= GRID_TOL && (0.0..=255.0).contains(&r) {
        Some(r as usize)
    } else {
        None
    }
}

/// `Φ((δ₊ - mean)/σ) - Φ((δ₋ - mean)/σ)` for the bin around grid index `k`.
///
/// Uses upper-tail differences when the bin lies above the mean so that
/// probabilities far in either tail keep their relative precision.
pub fn bin_probability(k: usize, mean: f64, sigma: f64) -> f64 {
    let x = grid_value(k);
    let lo = if k == 0 { f64::NEG_INFINITY } else { (x - HALF_BIN - mean) / sigma };
    let hi = if k == GRID_LEVELS - 1 { f64::INFINITY } else { (x + HALF_BIN - mean) / sigma };
    if x >= mean {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// `Σ_i ln P(bin(x0_i))` with a shared decoder variance.
pub fn decoder_loglik(x0: &Tensor, mean: &Tensor, variance: f64) -> Result<f64, ForwardError> {
    let v = Tensor::full(&[x0.len()], variance);
    decoder_loglik_diag(x0, mean, &v)
}

/// `Σ_i ln P(bin(x0_i))` with a per-coordinate decoder variance.
pub fn decoder_loglik_diag(x0: &Tensor, mean: &Tensor, variances: &Tensor) -> Result<f64, ForwardError> {
    check_len(x0.len(), mean.len())?;
    check_len(x0.len(), variances.len())?;
    let mut total = 0.0;
    for (i, ((&x, &m), &var)) in x0.data().iter().zip(mean.data()).zip(variances.data()).enumerate() {
        if !(var > 0.0) {
            return Err(ForwardError::NonpositiveVariance(var));
        }
        let k = grid_index(x).ok_or(ForwardError::OffGridInput { index: i, value: x })?;
        total += bin_probability(k, m, var.sqrt()).ln();
    }
    Ok(total)
}
