//! Sample-quality metrics: discrete KL, Inception-style score, Fréchet
//! distance, PSNR and patch SSIM, plus a small MLP classifier that serves
//! as the feature model at desk scale.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::io::format_f64;
use crate::numerics::linalg::trace;
use crate::numerics::{spd_sqrt, NumericsError, RngStream, Tape, Tensor, Var};
use crate::training::{sgd_step, RngState, TrainError};

/// Smoothing added to every classifier probability before renormalizing.
pub const PROB_SMOOTHING: f64 = 1e-12;
/// PSNR of identical images is infinite; CSV output caps it here.
pub const PSNR_CAP: f64 = 1e9;
/// Default SSIM stabilizers for unit-range images, `(0.01)²` and `(0.03)²`.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("entry {index} = {value} is not strictly positive")]
    NonpositiveEntry { index: usize, value: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("batch {0} is empty")]
    EmptyBatch(usize),
    #[error("need at least 2 samples per set, got {0}")]
    TooFewSamples(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("window {window} does not tile a {rows}x{cols} image")]
    BadWindow { window: usize, rows: usize, cols: usize },
    #[error("invalid classifier: {0}")]
    InvalidClassifier(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// `Σ_i ln(v_i/w_i)·v_i`.
pub fn discrete_kl(v: &[f64], w: &[f64]) -> Result<f64, MetricsError> {
    if v.len() != w.len() {
        return Err(MetricsError::LengthMismatch(v.len(), w.len()));
    }
    for (index, &value) in v.iter().chain(w).enumerate() {
        if !(value > 0.0) {
            return Err(MetricsError::NonpositiveEntry { index: index % v.len(), value });
        }
    }
    Ok(v.iter().zip(w).map(|(a, b)| (a / b).ln() * a).sum())
}

/// `(p + ε)/(1 + N·ε)` per row.
pub fn smooth_probabilities(p: &Tensor) -> Tensor {
    let n = p.cols() as f64;
    p.map(|v| (v + PROB_SMOOTHING) / (1.0 + n * PROB_SMOOTHING))
}

/// Classifier with a probability head and a feature head.
pub trait FeatureModel {
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// `K x N` strictly positive rows summing to one.
    fn probabilities(&self, x: &Tensor) -> Result<Tensor, MetricsError>;
    /// `K x D` features.
    fn features(&self, x: &Tensor) -> Result<Tensor, MetricsError>;
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub k_samples: usize,
    pub m_samples: usize,
    pub batches: usize,
    pub std: f64,
}

impl MetricReport {
    pub fn single(metric: &str, value: f64, k_samples: usize, m_samples: usize) -> Self {
        Self {
            metric: metric.into(),
            value,
            k_samples,
            m_samples,
            batches: 1,
            std: 0.0,
        }
    }
}

/// Writes `metric,value,k_samples,m_samples,batches,std`; infinite values
/// are capped at [`PSNR_CAP`].
pub fn write_reports_csv<W: Write>(reports: &[MetricReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value", "k_samples", "m_samples", "batches", "std"])?;
    let cap = |v: f64| if v.is_infinite() { v.signum() * PSNR_CAP } else { v };
    for r in reports {
        w.write_record([
            r.metric.clone(),
            format_f64(cap(r.value)),
            r.k_samples.to_string(),
            r.m_samples.to_string(),
            r.batches.to_string(),
            format_f64(cap(r.std)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `exp(mean_i KL(p_i ‖ mean_j p_j))` for one batch of probability rows.
pub fn inception_score_of_probs(p: &Tensor) -> Result<f64, MetricsError> {
    let (k, n) = p.dims2();
    let mut marginal = vec![0.0; n];
    for i in 0..k {
        for (m, v) in marginal.iter_mut().zip(p.row(i)) {
            *m += v;
        }
    }
    marginal.iter_mut().for_each(|m| *m /= k as f64);
    let mut total = 0.0;
    for i in 0..k {
        total += discrete_kl(p.row(i), &marginal)?;
    }
    Ok((total / k as f64).exp())
}

/// Inception-style score over `batches` contiguous, near-equal batches;
/// reports the mean and (population) standard deviation across batches.
pub fn inception_score(samples: &Tensor, fm: &dyn FeatureModel, batches: usize) -> Result<MetricReport, MetricsError> {
    let k = samples.rows();
    if batches == 0 {
        return Err(MetricsError::EmptyBatch(0));
    }
    if k < batches {
        return Err(MetricsError::EmptyBatch(k));
    }
    let probs = fm.probabilities(samples)?;
    let n = probs.cols();
    let mut scores = Vec::with_capacity(batches);
    let mut start = 0;
    for b in 0..batches {
        let size = k / batches + usize::from(b < k % batches);
        let rows = probs.data()[start * n..(start + size) * n].to_vec();
        scores.push(inception_score_of_probs(&Tensor::matrix(size, n, rows)?)?);
        start += size;
    }
    let mean = scores.iter().sum::<f64>() / batches as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / batches as f64;
    Ok(MetricReport {
        metric: "is".into(),
        value: mean,
        k_samples: k,
        m_samples: 0,
        batches,
        std: var.sqrt(),
    })
}

/// Column means and the `(K-1)`-normalized covariance of the rows of `f`.
pub fn mean_and_covariance(f: &Tensor) -> Result<(Vec<f64>, Tensor), MetricsError> {
    let (k, d) = f.dims2();
    if k < 2 {
        return Err(MetricsError::TooFewSamples(k));
    }
    let mut mean = vec![0.0; d];
    for i in 0..k {
        for (m, v) in mean.iter_mut().zip(f.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..k {
        let r = f.row(i);
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (k - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok((mean, Tensor::matrix(d, d, cov)?))
}

/// Fréchet distance between two feature sets:
/// `‖μx - μy‖² + tr Σx + tr Σy - 2·tr((Σx^½ Σy Σx^½)^½)`.
pub fn fid_from_features(fx: &Tensor, fy: &Tensor) -> Result<f64, MetricsError> {
    if fx.cols() != fy.cols() {
        return Err(MetricsError::ShapeMismatch(fx.shape().to_vec(), fy.shape().to_vec()));
    }
    let (mx, sx) = mean_and_covariance(fx)?;
    let (my, sy) = mean_and_covariance(fy)?;
    let dmu: f64 = mx.iter().zip(&my).map(|(a, b)| (a - b).powi(2)).sum();
    let rx = spd_sqrt(&sx)?;
    let inner = rx.matmul(&sy)?.matmul(&rx)?;
    let inner = crate::numerics::linalg::symmetrize(&inner);
    let cross = trace(&spd_sqrt(&inner)?);
    Ok(dmu + trace(&sx) + trace(&sy) - 2.0 * cross)
}

/// Fréchet distance in the feature space of `fm`.
pub fn fid(gen: &Tensor, reference: &Tensor, fm: &dyn FeatureModel) -> Result<f64, MetricsError> {
    fid_from_features(&fm.features(gen)?, &fm.features(reference)?)
}

/// `10·log10(1/MSE)` for images in `[0, 1]`; `+∞` when identical.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let mse = a.sub(b).map_err(|_| MetricsError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()))?.norm_sq() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Mean over non-overlapping `window x window` patches of
/// `((2μaμb + c1)(2σab + c2)) / ((μa² + μb² + c1)(σa² + σb² + c2))`.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, c1: f64, c2: f64) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (rows, cols) = a.dims2();
    if window == 0 || rows % window != 0 || cols % window != 0 {
        return Err(MetricsError::BadWindow { window, rows, cols });
    }
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut patches = 0usize;
    for pr in (0..rows).step_by(window) {
        for pc in (0..cols).step_by(window) {
            let cells = || (pr..pr + window).flat_map(move |r| (pc..pc + window).map(move |c| (r, c)));
            let ma = cells().map(|(r, c)| a.at(r, c)).sum::<f64>() / n;
            let mb = cells().map(|(r, c)| b.at(r, c)).sum::<f64>() / n;
            let va = cells().map(|(r, c)| (a.at(r, c) - ma) * (a.at(r, c) - ma)).sum::<f64>() / n;
            let vb = cells().map(|(r, c)| (b.at(r, c) - mb) * (b.at(r, c) - mb)).sum::<f64>() / n;
            let cab = cells().map(|(r, c)| (a.at(r, c) - ma) * (b.at(r, c) - mb)).sum::<f64>() / n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            patches += 1;
        }
    }
    Ok(total / patches as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ClassifierArch {
    fn validate(&self) -> Result<(), MetricsError> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) || self.num_classes < 2 {
            return Err(MetricsError::InvalidClassifier(format!("{self:?}")));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        let mut prev = self.input_dim;
        for &w in self.hidden.iter().chain(std::iter::once(&self.num_classes)) {
            out.push([prev, w]);
            out.push([1, w]);
            prev = w;
        }
        out
    }

    fn num_params(&self) -> usize {
        self.shapes().iter().map(|s| s[0] * s[1]).sum()
    }
}

/// Tanh MLP classifier; its last hidden layer is the feature head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    arch: ClassifierArch,
    params: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub gamma: f64,
    pub batch: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl MlpClassifier {
    pub fn new(arch: ClassifierArch, seed: u64) -> Result<Self, MetricsError> {
        arch.validate()?;
        let mut rng = RngStream::new(seed);
        let mut params = Vec::with_capacity(arch.num_params());
        for s in arch.shapes() {
            let fan_in = if s[0] == 1 { params_fan_in(&arch, params.len()) } else { s[0] };
            let r = 1.0 / (fan_in as f64).sqrt();
            params.extend(rng.uniform_vec(s[0] * s[1], -r, r));
        }
        Ok(Self { arch, params: Tensor::from_vec(params) })
    }

    pub fn from_params(arch: ClassifierArch, params: Tensor) -> Result<Self, MetricsError> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(MetricsError::LengthMismatch(params.len(), arch.num_params()));
        }
        let params = params.reshape(vec![arch.num_params()])?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn vars(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut off = 0;
        self.arch
            .shapes()
            .into_iter()
            .map(|s| {
                let n = s[0] * s[1];
                let t = Tensor::matrix(s[0], s[1], self.params.data()[off..off + n].to_vec()).expect("shape");
                off += n;
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Returns `(features, logits)`.
    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var), NumericsError> {
        let mut h = x;
        let layers = self.arch.hidden.len();
        for l in 0..layers {
            let z = tape.matmul(h, p[2 * l])?;
            let z = tape.add(z, p[2 * l + 1])?;
            h = tape.tanh(z);
        }
        let z = tape.matmul(h, p[2 * layers])?;
        let logits = tape.add(z, p[2 * layers + 1])?;
        Ok((h, logits))
    }

    fn input(&self, tape: &mut Tape, x: &Tensor) -> Result<Var, MetricsError> {
        let (r, c) = x.dims2();
        if c != self.arch.input_dim {
            return Err(MetricsError::ShapeMismatch(vec![r, c], vec![r, self.arch.input_dim]));
        }
        Ok(tape.constant(x.clone().reshape(vec![r, c])?))
    }

    /// Mean cross-entropy of a labeled batch and its gradient.
    pub fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), MetricsError> {
        let mut tape = Tape::new();
        let p = self.vars(&mut tape, true);
        let xv = self.input(&mut tape, x)?;
        let (_, logits) = self.forward(&mut tape, &p, xv)?;
        let n = self.arch.num_classes;
        let mut onehot = vec![0.0; labels.len() * n];
        for (i, &c) in labels.iter().enumerate() {
            onehot[i * n + c] = 1.0;
        }
        let y = tape.constant(Tensor::matrix(labels.len(), n, onehot)?);
        let probs = tape.softmax_rows(logits);
        let probs = tape.clamp_min(probs, 1e-300);
        let lp = tape.ln(probs);
        let picked = tape.mul(lp, y)?;
        let s = tape.sum(picked);
        let loss = tape.scale(s, -1.0 / labels.len() as f64);
        let grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(self.params.len());
        for &v in &p {
            flat.extend_from_slice(grads.get(v).data());
        }
        Ok((tape.value(loss).item(), Tensor::from_vec(flat)))
    }

    /// Plain SGD on minibatches drawn with replacement.
    pub fn train(mut self, ds: &Dataset, cfg: &ClassifierTrainConfig) -> Result<(Self, Vec<f64>, RngState), MetricsError> {
        let labels = ds
            .labels()
            .ok_or_else(|| MetricsError::InvalidClassifier("training data has no labels".into()))?;
        if ds.dim() != self.arch.input_dim {
            return Err(MetricsError::LengthMismatch(ds.dim(), self.arch.input_dim));
        }
        if labels.iter().any(|&l| l >= self.arch.num_classes) {
            return Err(MetricsError::InvalidClassifier("label exceeds class count".into()));
        }
        let mut rng = RngStream::new(cfg.seed);
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.uniform_int(0, ds.len() - 1)).collect();
            let mut xb = Vec::with_capacity(cfg.batch * ds.dim());
            for &i in &idx {
                xb.extend_from_slice(ds.sample(i));
            }
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, g) = self.loss_grad(&Tensor::matrix(cfg.batch, ds.dim(), xb)?, &yb)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: step + 1 }.into());
            }
            self.params = sgd_step(&self.params, &g, cfg.gamma)?;
            losses.push(loss);
        }
        let state = RngState { seed: cfg.seed, counter: rng.counter() };
        Ok((self, losses, state))
    }

    /// Fraction of rows whose most probable class matches the label.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64, MetricsError> {
        let p = self.probabilities(x)?;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| {
                let row = p.row(*i);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                best == l
            })
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn params_fan_in(arch: &ClassifierArch, offset: usize) -> usize {
    // Bias blocks follow their weight block; recover its fan-in from the offset.
    let mut off = 0;
    for s in arch.shapes() {
        if off == offset {
            break;
        }
        off += s[0] * s[1];
        if off == offset {
            return s[0];
        }
    }
    1
}

impl FeatureModel for MlpClassifier {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn feature_dim(&self) -> usize {
        *self.arch.hidden.last().expect("validated")
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor, MetricsError> {
        let mut tape = Tape::new();
        let p = self.vars(&mut tape, false);
        let xv = self.input(&mut tape, x)?;
        let (_, logits) = self.forward(&mut tape, &p, xv)?;
        let probs = tape.softmax_rows(logits);
        Ok(smooth_probabilities(tape.value(probs)))
    }

    fn features(&self, x: &Tensor) -> Result<Tensor, MetricsError> {
        let mut tape = Tape::new();
        let p = self.vars(&mut tape, false);
        let xv = self.input(&mut tape, x)?;
        let (h, _) = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(h).clone())
    }
}
