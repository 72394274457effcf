//! Backward-process generators: ancestral DDPM, strided learned-variance
//! sampling, the DDIM η-family and classifier-free guidance.
//!
//! Every chain owns an [`RngStream`] derived from `(seed, chain index)`. It
//! draws the latent `X_T` first and then one standard normal vector per step,
//! so a chain's draws do not depend on the batch size.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::encode_pgm;
use crate::denoiser::{Condition, DenoiserError, NoisePredictor, Prediction};
use crate::io::format_f64;
use crate::numerics::{NumericsError, RngStream, Tensor};
use crate::schedule::{NoiseSchedule, ScheduleError, StridePlan};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("head mismatch: {0}")]
    HeadMismatch(String),
    #[error("conditioning mismatch: {0}")]
    ConditioningMismatch(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(#[from] ScheduleError),
    #[error("sigma^2 = {sigma_sq} exceeds 1 - alpha_bar = {bound} at step {step}")]
    SigmaConstraintViolated { step: usize, sigma_sq: f64, bound: f64 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which recursion to run, with its variant-specific settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerVariant {
    Ddpm,
    Improved { k: usize },
    Ddim { k: usize, eta: f64 },
    Guided { w: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub count: usize,
    pub seed: u64,
    pub variant: SamplerVariant,
    /// Class for class-conditioned models; `None` feeds the zero vector.
    pub class: Option<usize>,
    /// Token matrix for token-conditioned models.
    pub tokens: Option<Tensor>,
    /// Overrides the latent `X_T` (`count x d`); the chains still draw it.
    pub latent: Option<Tensor>,
    pub record_trajectory: bool,
}

impl SampleRequest {
    pub fn new(count: usize, seed: u64, variant: SamplerVariant) -> Self {
        Self {
            count,
            seed,
            variant,
            class: None,
            tokens: None,
            latent: None,
            record_trajectory: false,
        }
    }

    pub fn with_class(mut self, class: Option<usize>) -> Self {
        self.class = class;
        self
    }

    pub fn with_latent(mut self, latent: Tensor) -> Self {
        self.latent = Some(latent);
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `count x d`.
    pub samples: Tensor,
    /// `X_T, …, X_0` when recording was requested.
    pub trajectory: Option<Vec<Tensor>>,
}

/// One ancestral step from `x_t`:
/// `(x_t - (1-α_t)/√(1-ᾱ_t)·ε̂)/√α_t + √β̃_t·z`.
pub fn ddpm_step(xt: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule, z: &Tensor) -> Result<Tensor, SamplerError> {
    let a = sched.alpha(t);
    let coef = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sd = sched.beta_tilde(t).sqrt();
    let mean = xt.zip_map(eps, |x, e| (x - coef * e) / a.sqrt())?;
    Ok(mean.zip_map(z, |m, n| m + sd * n)?)
}

/// Per-coordinate variance `exp(v₂ ln(1-α') + (1-v₂) ln β̃')` of a strided step.
/// When `β̃' = 0` the variance is zero unless `v₂ = 1` exactly.
pub fn strided_variance(v2: &Tensor, t_cur: usize, t_prev: usize, sched: &NoiseSchedule) -> Tensor {
    let (ab, abp) = (sched.alpha_bar(t_cur), sched.alpha_bar(t_prev));
    let a = ab / abp;
    let bt = (1.0 - abp) / (1.0 - ab) * (1.0 - a);
    let (la, lb) = ((1.0 - a).ln(), bt.ln());
    v2.map(|v| {
        if bt == 0.0 {
            if 1.0 - v == 0.0 {
                1.0 - a
            } else {
                0.0
            }
        } else {
            (v * la + (1.0 - v) * lb).exp()
        }
    })
}

/// One strided learned-variance step from `t_cur` down to `t_prev`, using
/// the effective `α' = ᾱ_{t_cur}/ᾱ_{t_prev}`.
pub fn improved_step(
    xt: &Tensor,
    eps: &Tensor,
    v2: &Tensor,
    t_cur: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor, SamplerError> {
    let ab = sched.alpha_bar(t_cur);
    let a = ab / sched.alpha_bar(t_prev);
    let coef = (1.0 - a) / (1.0 - ab).sqrt();
    let var = strided_variance(v2, t_cur, t_prev, sched);
    let mean = xt.zip_map(eps, |x, e| (x - coef * e) / a.sqrt())?;
    let noise = var.zip_map(z, |v, n| v.sqrt() * n)?;
    Ok(mean.add(&noise)?)
}

/// `σ² = η²(1-α_{τ_k})(1-ᾱ_{τ_{k-1}})/(1-ᾱ_{τ_k})`, checked against `1-ᾱ_{τ_{k-1}}`.
pub fn ddim_sigma_sq(t_cur: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> Result<f64, SamplerError> {
    let abp = sched.alpha_bar(t_prev);
    let s2 = eta * eta * (1.0 - sched.alpha(t_cur)) * (1.0 - abp) / (1.0 - sched.alpha_bar(t_cur));
    if s2 > 1.0 - abp {
        return Err(SamplerError::SigmaConstraintViolated { step: t_cur, sigma_sq: s2, bound: 1.0 - abp });
    }
    Ok(s2)
}

/// One DDIM step: `√ᾱ_prev·x̂₀ + √(1-ᾱ_prev-σ²)·ε̂ + σz`.
pub fn ddim_step(
    xt: &Tensor,
    eps: &Tensor,
    t_cur: usize,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor, SamplerError> {
    let s2 = ddim_sigma_sq(t_cur, t_prev, eta, sched)?;
    let (ab, abp) = (sched.alpha_bar(t_cur), sched.alpha_bar(t_prev));
    let x0 = xt.zip_map(eps, |x, e| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())?;
    let dir = (1.0 - abp - s2).max(0.0).sqrt();
    let mut out = x0.zip_map(eps, |x, e| abp.sqrt() * x + dir * e)?;
    if s2 > 0.0 {
        out = out.zip_map(z, |o, n| o + s2.sqrt() * n)?;
    }
    Ok(out)
}

/// `(1+w)·ε̂(x, c) - w·ε̂(x, 0)`.
pub fn guided_estimate(cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor, SamplerError> {
    Ok(cond.zip_map(uncond, |c, u| (1.0 + w) * c - w * u)?)
}

/// A class-conditioned predictor whose noise estimate is extrapolated away
/// from the unconditional one.
pub struct Guided<'a, P: NoisePredictor + ?Sized> {
    pub inner: &'a P,
    pub w: f64,
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Guided<'_, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn is_dual_head(&self) -> bool {
        self.inner.is_dual_head()
    }

    fn num_classes(&self) -> Option<usize> {
        self.inner.num_classes()
    }

    fn predict(&self, xt: &Tensor, t: usize, cond: &Condition) -> Result<Prediction, DenoiserError> {
        let c = self
            .inner
            .num_classes()
            .ok_or_else(|| DenoiserError::ConditioningMismatch("guidance needs a class-conditioned model".into()))?;
        let with = self.inner.predict(xt, t, cond)?;
        let without = self.inner.predict(xt, t, &Condition::class_rows(None, c, xt.rows()))?;
        let eps = with
            .eps
            .zip_map(&without.eps, |a, b| (1.0 + self.w) * a - self.w * b)
            .map_err(DenoiserError::from)?;
        Ok(Prediction { eps, v2: with.v2 })
    }
}

fn condition_for(model: &(impl NoisePredictor + ?Sized), req: &SampleRequest) -> Result<Condition, SamplerError> {
    if let Some(tokens) = &req.tokens {
        return Ok(Condition::Tokens(tokens.clone()));
    }
    match (model.num_classes(), req.class) {
        (Some(c), class) => {
            if class.is_some_and(|k| k >= c) {
                return Err(SamplerError::ConditioningMismatch(format!("class {} out of range for {c} classes", class.unwrap_or(0))));
            }
            Ok(Condition::class_rows(class, c, req.count))
        }
        (None, Some(k)) => Err(SamplerError::ConditioningMismatch(format!("class {k} given to an unconditioned model"))),
        (None, None) => Ok(Condition::None),
    }
}

fn draw(rngs: &mut [RngStream], d: usize) -> Result<Tensor, SamplerError> {
    let mut data = Vec::with_capacity(rngs.len() * d);
    for r in rngs.iter_mut() {
        data.extend(r.normal_vec(d));
    }
    Ok(Tensor::matrix(rngs.len(), d, data)?)
}

/// Runs the chains over `steps` (ascending, starting at 0) from the top down.
fn run<P, F>(model: &P, steps: &[usize], req: &SampleRequest, mut step: F) -> Result<SampleOutput, SamplerError>
where
    P: NoisePredictor + ?Sized,
    F: FnMut(&Tensor, &Prediction, usize, usize, &Tensor) -> Result<Tensor, SamplerError>,
{
    if req.count == 0 {
        return Err(SamplerError::InvalidRequest("count must be positive".into()));
    }
    let d = model.dim();
    let cond = condition_for(model, req)?;
    let mut rngs: Vec<RngStream> = (0..req.count).map(|i| RngStream::derive(req.seed, i as u64)).collect();
    let mut x = draw(&mut rngs, d)?;
    if let Some(latent) = &req.latent {
        if latent.shape() != x.shape() {
            return Err(SamplerError::InvalidRequest(format!("latent shape {:?}, expected {:?}", latent.shape(), x.shape())));
        }
        x = latent.clone();
    }
    let mut trajectory = req.record_trajectory.then(|| vec![x.clone()]);
    for k in (1..steps.len()).rev() {
        let (t, tp) = (steps[k], steps[k - 1]);
        let pred = model.predict(&x, t, &cond)?;
        let z = draw(&mut rngs, d)?;
        x = step(&x, &pred, t, tp, &z)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(x.clone());
        }
    }
    Ok(SampleOutput { samples: x, trajectory })
}

fn full_plan(sched: &NoiseSchedule) -> Result<Vec<usize>, SamplerError> {
    if sched.steps() < 2 {
        return Err(ScheduleError::StepCountTooSmall(sched.steps()).into());
    }
    Ok((0..=sched.steps()).collect())
}

fn require_noise_head(model: &(impl NoisePredictor + ?Sized)) -> Result<(), SamplerError> {
    if model.is_dual_head() {
        return Err(SamplerError::HeadMismatch("this sampler needs a noise-only head".into()));
    }
    Ok(())
}

/// Ancestral sampling over every step `T, …, 1`.
pub fn ddpm_sample<P: NoisePredictor + ?Sized>(model: &P, sched: &NoiseSchedule, req: &SampleRequest) -> Result<SampleOutput, SamplerError> {
    require_noise_head(model)?;
    let steps = full_plan(sched)?;
    run(model, &steps, req, |x, p, t, _, z| ddpm_step(x, &p.eps, t, sched, z))
}

/// Strided sampling with the learned per-coordinate variance.
pub fn improved_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    plan: &StridePlan,
    req: &SampleRequest,
) -> Result<SampleOutput, SamplerError> {
    if !model.is_dual_head() {
        return Err(SamplerError::HeadMismatch("learned-variance sampling needs a dual head".into()));
    }
    check_plan(plan, sched)?;
    run(model, plan.steps(), req, |x, p, t, tp, z| {
        let v2 = p.v2.as_ref().ok_or_else(|| SamplerError::HeadMismatch("model returned no variance output".into()))?;
        improved_step(x, &p.eps, v2, t, tp, sched, z)
    })
}

/// DDIM sampling; `eta = 0` is deterministic given the latent.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    plan: &StridePlan,
    eta: f64,
    req: &SampleRequest,
) -> Result<SampleOutput, SamplerError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(SamplerError::InvalidRequest(format!("eta = {eta} outside [0, 1]")));
    }
    check_plan(plan, sched)?;
    run(model, plan.steps(), req, |x, p, t, tp, z| ddim_step(x, &p.eps, t, tp, eta, sched, z))
}

/// Ancestral sampling with the guided noise estimate for `req.class`.
pub fn guided_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    w: f64,
    req: &SampleRequest,
) -> Result<SampleOutput, SamplerError> {
    if model.num_classes().is_none() {
        return Err(SamplerError::ConditioningMismatch("guidance needs a class-conditioned model".into()));
    }
    if !(w >= 0.0) {
        return Err(SamplerError::InvalidRequest(format!("guidance weight {w} must be non-negative")));
    }
    ddpm_sample(&Guided { inner: model, w }, sched, req)
}

fn check_plan(plan: &StridePlan, sched: &NoiseSchedule) -> Result<(), SamplerError> {
    if plan.step(plan.len()) != sched.steps() {
        return Err(ScheduleError::InvalidK { k: plan.len(), steps: sched.steps() }.into());
    }
    Ok(())
}

/// Dispatches on `req.variant`, building the stride plan where needed.
pub fn sample<P: NoisePredictor + ?Sized>(model: &P, sched: &NoiseSchedule, req: &SampleRequest) -> Result<SampleOutput, SamplerError> {
    match req.variant {
        SamplerVariant::Ddpm => ddpm_sample(model, sched, req),
        SamplerVariant::Improved { k } => improved_sample(model, sched, &crate::schedule::stride_steps(sched.steps(), k)?, req),
        SamplerVariant::Ddim { k, eta } => ddim_sample(model, sched, &crate::schedule::stride_steps(sched.steps(), k)?, eta, req),
        SamplerVariant::Guided { w } => guided_sample(model, sched, w, req),
    }
}

/// One row per sample, header `x0,…,x{d-1}`.
pub fn write_samples_csv<W: Write>(samples: &Tensor, out: W) -> csv::Result<()> {
    let (n, d) = samples.dims2();
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..d).map(|j| format!("x{j}")))?;
    for i in 0..n {
        w.write_record(samples.row(i).iter().map(|&v| format_f64(v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Tiles `height x width` images (rows of `samples`, values in `[-1, 1]`)
/// into a binary PGM grid with `columns` images per row.
pub fn samples_to_pgm_grid(samples: &Tensor, height: usize, width: usize, columns: usize) -> Result<Vec<u8>, SamplerError> {
    let (n, d) = samples.dims2();
    if d != height * width || columns == 0 {
        return Err(SamplerError::InvalidRequest(format!("cannot tile dimension {d} as {height}x{width}")));
    }
    let grid_rows = n.div_ceil(columns);
    let (gw, gh) = (columns * width, grid_rows * height);
    let mut pixels = vec![-1.0; gw * gh];
    for i in 0..n {
        let (gr, gc) = (i / columns, i % columns);
        for r in 0..height {
            for c in 0..width {
                pixels[(gr * height + r) * gw + gc * width + c] = samples.at(i, r * width + c);
            }
        }
    }
    Ok(encode_pgm(gw, gh, &pixels))
}
