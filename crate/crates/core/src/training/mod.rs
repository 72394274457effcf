//! Training objectives, classifier-free conditioning dropout, the SGD loop
//! and checkpoint persistence.

mod checkpoint;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, ModelMeta, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{DataError, DataSource};
use crate::denoiser::{Condition, DenoiserError, DenoiserModel, NoisePredictor};
use crate::forward::{grid_index, noised, posterior_coefficients, ForwardError, GRID_LEVELS, HALF_BIN};
use crate::io::format_f64;
use crate::numerics::{NumericsError, RngStream, Tape, Tensor, Var};
use crate::schedule::NoiseSchedule;

/// Weight of the variational term in the hybrid objective.
pub const DEFAULT_LAMBDA: f64 = 0.001;
/// Floor on decoder bin probabilities inside the differentiable objective.
pub const BIN_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("hybrid objective needs a model with a variance head")]
    NotDualHead,
    #[error("conditioning mismatch: {0}")]
    ConditioningMismatch(String),
    #[error("parameter and gradient lengths differ: {params} vs {grads}")]
    LengthMismatch { params: usize, grads: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which objective and conditioning scheme the loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Simple noise-matching loss.
    Ddpm,
    /// Hybrid loss with learned variances.
    Improved,
    /// Simple loss on a class-conditioned model with class dropout.
    Cfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch: usize,
    pub steps: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub p_uncond: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl TrainConfig {
    pub fn new(gamma: f64, batch: usize, steps: usize, seed: u64) -> Self {
        Self {
            gamma,
            batch,
            steps,
            lambda: DEFAULT_LAMBDA,
            p_uncond: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad("p_uncond must lie in [0, 1]");
        }
        Ok(())
    }
}

fn check_step(t: usize, sched: &NoiseSchedule) -> Result<(), TrainError> {
    if t == 0 || t > sched.steps() {
        return Err(TrainError::StepOutOfRange { t, steps: sched.steps() });
    }
    Ok(())
}

fn as_matrix(x: &Tensor) -> Result<Tensor, NumericsError> {
    let (r, c) = x.dims2();
    x.clone().reshape(vec![r, c])
}

/// Batch mean of `‖ε - V(√ᾱ_t·x0 + √(1-ᾱ_t)·ε, t)‖²` for any predictor.
pub fn simple_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &Tensor,
    eps: &Tensor,
    t: usize,
    cond: &Condition,
    sched: &NoiseSchedule,
) -> Result<f64, TrainError> {
    check_step(t, sched)?;
    let xt = as_matrix(&noised(x0, eps, sched.alpha_bar(t)))?;
    let pred = model.predict(&xt, t, cond)?;
    let rows = xt.rows() as f64;
    Ok(as_matrix(eps)?.sub(&pred.eps)?.norm_sq() / rows)
}

fn simple_term(tape: &mut Tape, eps: Var, eps_hat: Var) -> Result<Var, NumericsError> {
    let rows = tape.value(eps).rows() as f64;
    let diff = tape.sub(eps, eps_hat)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows))
}

/// Value and batch-mean parameter gradient of [`simple_loss`].
pub fn simple_loss_grad(
    model: &DenoiserModel,
    x0: &Tensor,
    eps: &Tensor,
    t: usize,
    cond: &Condition,
    sched: &NoiseSchedule,
) -> Result<(f64, Tensor), TrainError> {
    check_step(t, sched)?;
    let mut tape = Tape::new();
    let p = model.param_vars(&mut tape, true);
    let xt = tape.constant(as_matrix(&noised(x0, eps, sched.alpha_bar(t)))?);
    let e = tape.constant(as_matrix(eps)?);
    let out = model.forward_on_tape(&mut tape, &p, xt, t, cond)?;
    let loss = simple_term(&mut tape, e, out.eps)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), model.flat_gradient(&grads, &p)))
}

/// `ln β̃_t` for the variance interpolation; step 1 borrows `ln β̃_2`
/// because `β̃_1 = 0`.
pub fn log_beta_tilde_for_variance(t: usize, sched: &NoiseSchedule) -> f64 {
    if t == 1 {
        sched.beta_tilde(2).ln()
    } else {
        sched.beta_tilde(t).ln()
    }
}

/// `Σ = exp(v2·ln(1-α_t) + (1-v2)·ln β̃_t)` elementwise.
pub fn interpolated_variance(v2: &Tensor, t: usize, sched: &NoiseSchedule) -> Tensor {
    let (hi, lo) = ((1.0 - sched.alpha(t)).ln(), log_beta_tilde_for_variance(t, sched));
    v2.map(|v| (v * hi + (1.0 - v) * lo).exp())
}

/// Reverse-step mean implied by a noise estimate:
/// `(x_t - (1-α_t)/√(1-ᾱ_t)·ε̂)/√α_t`.
pub fn mean_from_eps(xt: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Tensor {
    let (a, ab) = (sched.alpha(t), sched.alpha_bar(t));
    let c = (1.0 - a) / (1.0 - ab).sqrt();
    let s = a.sqrt();
    xt.zip_map(eps_hat, |x, e| (x - c * e) / s).expect("equal shapes")
}

struct HybridParts {
    loss: Var,
    simple: Var,
    vlb: Var,
}

/// Records the hybrid objective. `frozen` supplies the mean through a
/// separate, non-differentiable forward pass.
#[allow(clippy::too_many_arguments)]
fn hybrid_on_tape(
    tape: &mut Tape,
    model: &DenoiserModel,
    p: &[Var],
    frozen: &DenoiserModel,
    x0: &Tensor,
    eps: &Tensor,
    t: usize,
    cond: &Condition,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<HybridParts, TrainError> {
    check_step(t, sched)?;
    if !model.arch().is_dual_head() || !frozen.arch().is_dual_head() {
        return Err(TrainError::NotDualHead);
    }
    let x0m = as_matrix(x0)?;
    let xt_val = as_matrix(&noised(x0, eps, sched.alpha_bar(t)))?;
    let rows = xt_val.rows();
    let xt = tape.constant(xt_val.clone());
    let e = tape.constant(as_matrix(eps)?);
    let out = model.forward_on_tape(tape, p, xt, t, cond)?;
    let v2 = out.v2.expect("dual head");
    let simple = simple_term(tape, e, out.eps)?;

    let frozen_eps = frozen.predict(&xt_val, t, cond)?.eps;
    let mu = mean_from_eps(&xt_val, &frozen_eps, t, sched);

    // ln Σ = v2·(ln(1-α) - ln β̃) + ln β̃
    let (hi, lo) = ((1.0 - sched.alpha(t)).ln(), log_beta_tilde_for_variance(t, sched));
    let log_sigma = tape.scale(v2, hi - lo);
    let log_sigma = tape.add_scalar(log_sigma, lo);

    let per_batch = if t > 1 {
        let (cx, c0) = posterior_coefficients(t, sched)?;
        let bt = sched.beta_tilde(t);
        let mu_tilde = xt_val.zip_map(&x0m, |a, b| cx * a + c0 * b)?;
        let dm2 = mu_tilde.zip_map(&mu, |a, b| (a - b) * (a - b))?;
        // ½[ln Σ - ln β̃ - 1 + (β̃ + (μ̃-μ)²)/Σ]
        let num = tape.constant(dm2.map(|v| v + bt));
        let neg_log = tape.neg(log_sigma);
        let inv_sigma = tape.exp(neg_log);
        let ratio = tape.mul(num, inv_sigma)?;
        let kl = tape.add(log_sigma, ratio)?;
        let kl = tape.add_scalar(kl, -bt.ln() - 1.0);
        let kl = tape.scale(kl, 0.5);
        tape.sum(kl)
    } else {
        let nll = decoder_nll_on_tape(tape, &x0m, &mu, log_sigma)?;
        tape.sum(nll)
    };
    let vlb = tape.scale(per_batch, 1.0 / rows as f64);
    let weighted = tape.scale(vlb, lambda);
    let loss = tape.add(simple, weighted)?;
    Ok(HybridParts { loss, simple, vlb })
}

/// `-ln P(bin)` per coordinate with differentiable log-variance and a constant mean.
fn decoder_nll_on_tape(tape: &mut Tape, x0: &Tensor, mu: &Tensor, log_sigma: Var) -> Result<Var, TrainError> {
    let (rows, cols) = x0.dims2();
    let n = rows * cols;
    let mut sign = Vec::with_capacity(n);
    let (mut lo_off, mut hi_off) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut lo_mask, mut hi_mask) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut lo_const, mut hi_const) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, (&x, &m)) in x0.data().iter().zip(mu.data()).enumerate() {
        let k = grid_index(x).ok_or(ForwardError::OffGridInput { index: i, value: x })?;
        // Evaluate in the upper tail when the bin is above the mean.
        let s = if x >= m { 1.0 } else { -1.0 };
        sign.push(s);
        lo_off.push(x - HALF_BIN - m);
        hi_off.push(x + HALF_BIN - m);
        // erfc(s·z/√2) at z = ∓∞ is a constant; mask the edge and add it.
        let (lm, lc) = if k == 0 { (0.0, if s > 0.0 { 2.0 } else { 0.0 }) } else { (1.0, 0.0) };
        let (hm, hc) = if k == GRID_LEVELS - 1 { (0.0, if s > 0.0 { 0.0 } else { 2.0 }) } else { (1.0, 0.0) };
        lo_mask.push(lm);
        lo_const.push(lc);
        hi_mask.push(hm);
        hi_const.push(hc);
    }
    let mat = |v: Vec<f64>| Tensor::matrix(rows, cols, v);
    let s_over_rt2 = tape.constant(mat(sign.iter().map(|s| s / std::f64::consts::SQRT_2).collect())?);
    let half_sign = tape.constant(mat(sign.iter().map(|s| 0.5 * s).collect())?);
    let neg_half_log = tape.scale(log_sigma, -0.5);
    let inv_sd = tape.exp(neg_half_log);

    let mut tail = |offsets: Vec<f64>, mask: Vec<f64>, consts: Vec<f64>| -> Result<Var, TrainError> {
        let off = tape.constant(mat(offsets)?);
        let z = tape.mul(off, inv_sd)?;
        let z = tape.mul(z, s_over_rt2)?;
        let e = tape.erfc(z);
        let m = tape.constant(mat(mask)?);
        let c = tape.constant(mat(consts)?);
        let e = tape.mul(e, m)?;
        Ok(tape.add(e, c)?)
    };
    let lo = tail(lo_off, lo_mask, lo_const)?;
    let hi = tail(hi_off, hi_mask, hi_const)?;
    let diff = tape.sub(lo, hi)?;
    let prob = tape.mul(diff, half_sign)?;
    let prob = tape.clamp_min(prob, BIN_PROB_FLOOR);
    let lp = tape.ln(prob);
    Ok(tape.neg(lp))
}

/// Hybrid objective `‖ε - v1‖² + λ·L` (batch mean) and its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridLoss {
    pub total: f64,
    pub simple: f64,
    pub vlb: f64,
}

/// Value of the hybrid objective.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss(
    model: &DenoiserModel,
    frozen: &DenoiserModel,
    x0: &Tensor,
    eps: &Tensor,
    t: usize,
    cond: &Condition,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<HybridLoss, TrainError> {
    let mut tape = Tape::new();
    let p = model.param_vars(&mut tape, false);
    let parts = hybrid_on_tape(&mut tape, model, &p, frozen, x0, eps, t, cond, sched, lambda)?;
    Ok(HybridLoss {
        total: tape.value(parts.loss).item(),
        simple: tape.value(parts.simple).item(),
        vlb: tape.value(parts.vlb).item(),
    })
}

/// Value and gradient of [`hybrid_loss`] with respect to `model` only;
/// `frozen` contributes the mean as a constant.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss_grad(
    model: &DenoiserModel,
    frozen: &DenoiserModel,
    x0: &Tensor,
    eps: &Tensor,
    t: usize,
    cond: &Condition,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<(f64, Tensor), TrainError> {
    let mut tape = Tape::new();
    let p = model.param_vars(&mut tape, true);
    let parts = hybrid_on_tape(&mut tape, model, &p, frozen, x0, eps, t, cond, sched, lambda)?;
    let grads = tape.backward(parts.loss)?;
    Ok((tape.value(parts.loss).item(), model.flat_gradient(&grads, &p)))
}

/// `c` when `keep`, otherwise the zero vector.
pub fn cfg_mask(c: &Tensor, keep: bool) -> Tensor {
    if keep {
        c.clone()
    } else {
        c.map(|_| 0.0)
    }
}

/// One-hot rows for `labels`, each replaced by zeros with probability `p`.
pub fn cfg_dropout(labels: &[usize], num_classes: usize, p: f64, rng: &mut RngStream) -> Condition {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (r, &c) in labels.iter().enumerate() {
        let drop = rng.bernoulli(p);
        if !drop {
            data[r * num_classes + c] = 1.0;
        }
    }
    Condition::Class(Tensor::matrix(labels.len(), num_classes, data).expect("non-empty"))
}

/// `θ - γ·g`, where `g` is already the batch-mean gradient.
pub fn sgd_step(params: &Tensor, grads: &Tensor, gamma: f64) -> Result<Tensor, TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::LengthMismatch { params: params.len(), grads: grads.len() });
    }
    Ok(params.zip_map(grads, |p, g| p - gamma * g)?)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub losses: Vec<f64>,
    /// Final positions of the data and noise streams.
    pub rng: Vec<RngState>,
}

/// Runs `cfg.steps` SGD steps. Each step draws `J` fresh data points, one
/// `t ~ U{1..T}` shared by the batch and `J` fresh noise vectors.
///
/// Data come from the stream `derive(seed, 0)`; `t`, noise and class
/// dropout from `derive(seed, 1)`.
pub fn train(
    model: DenoiserModel,
    source: &mut dyn DataSource,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if source.dim() != model.arch().input_dim {
        return Err(TrainError::InvalidConfig(format!(
            "data dimension {} does not match model input {}",
            source.dim(),
            model.arch().input_dim
        )));
    }
    let num_classes = model.arch().num_classes();
    match variant {
        Variant::Improved if !model.arch().is_dual_head() => return Err(TrainError::NotDualHead),
        Variant::Cfg if num_classes.is_none() => {
            return Err(TrainError::ConditioningMismatch("variant cfg needs a class-conditioned model".into()))
        }
        Variant::Ddpm | Variant::Improved if num_classes.is_some() => {
            return Err(TrainError::ConditioningMismatch("class-conditioned models train with variant cfg".into()))
        }
        _ => {}
    }
    if let (Some(c), Some(sc)) = (num_classes, source.num_classes()) {
        if sc > c {
            return Err(TrainError::ConditioningMismatch(format!("data has {sc} classes, model {c}")));
        }
    }

    let (data_seed, noise_seed) = (derive_seed(cfg.seed, 0), derive_seed(cfg.seed, 1));
    let mut data_rng = RngStream::new(data_seed);
    let mut noise_rng = RngStream::new(noise_seed);
    let mut model = model;
    let mut losses = Vec::with_capacity(cfg.steps);
    let d = model.arch().input_dim;
    for step in 0..cfg.steps {
        let batch = source.next_batch(cfg.batch, &mut data_rng)?;
        let t = noise_rng.uniform_int(1, sched.steps());
        let eps = Tensor::matrix(cfg.batch, d, noise_rng.normal_vec(cfg.batch * d))?;
        let cond = match (variant, num_classes) {
            (Variant::Cfg, Some(c)) => {
                let labels = batch
                    .labels
                    .as_ref()
                    .ok_or_else(|| TrainError::ConditioningMismatch("variant cfg needs labeled data".into()))?;
                cfg_dropout(labels, c, cfg.p_uncond, &mut noise_rng)
            }
            _ => Condition::None,
        };
        let (loss, g) = match variant {
            Variant::Improved => {
                let frozen = model.clone();
                hybrid_loss_grad(&model, &frozen, &batch.x, &eps, t, &cond, sched, cfg.lambda)?
            }
            _ => simple_loss_grad(&model, &batch.x, &eps, t, &cond, sched)?,
        };
        if !loss.is_finite() || !g.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: step + 1 });
        }
        let next = sgd_step(model.params(), &g, cfg.gamma)?;
        model.set_params(next)?;
        losses.push(loss);
    }
    Ok(TrainOutcome {
        model,
        losses,
        rng: vec![
            RngState { seed: data_seed, counter: data_rng.counter() },
            RngState { seed: noise_seed, counter: noise_rng.counter() },
        ],
    })
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    RngStream::derive(seed, index).seed()
}

/// Writes the `step,loss` log (steps are 1-based).
pub fn write_loss_csv<W: Write>(losses: &[f64], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format_f64(*l)])?;
    }
    w.flush()?;
    Ok(())
}
