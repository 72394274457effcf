//! The noise-prediction network: a residual tanh MLP with a sinusoidal
//! time embedding, optional class conditioning through adaptive group
//! normalization, optional token conditioning through cross-attention,
//! and an optional second head for learned variances.
//!
//! The noise head also sees the input directly through a linear skip and a
//! time-gated skip, `x·S + x ⊙ (emb·G)`, so the estimate stays linear in
//! `x` far from the training data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Gradients, NumericsError, RngStream, Tape, Tensor, Var};

/// Variance of the group normalization is offset by this before the square root.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("time embedding needs c = d_emb/2 >= 2, got d_emb = {0}")]
    DegenerateEmbedding(usize),
    #[error("conditioning mismatch: {0}")]
    ConditioningMismatch(String),
    #[error("parameter vector has {found} entries, layout needs {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Outputs the noise estimate only.
    Noise,
    /// Outputs the noise estimate and the variance interpolation `v2 ∈ (-1, 1)^d`.
    NoiseAndVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Conditioning {
    None,
    /// One-hot classes mapped to the AdaGN signals `(y1, y2)` of length
    /// `signal_dim` in every hidden block, normalized in `groups` groups.
    Class {
        num_classes: usize,
        signal_dim: usize,
        groups: usize,
    },
    /// A `len x dim` token matrix attended to by one cross-attention block
    /// after the first hidden layer.
    Tokens {
        len: usize,
        dim: usize,
        heads: usize,
        head_dim: usize,
    },
}

/// Architecture metadata; together with a flat parameter vector it fully
/// determines the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub emb_dim: usize,
    pub head: HeadMode,
    pub conditioning: Conditioning,
}

impl Arch {
    /// Unconditioned noise-only MLP.
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, emb_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            emb_dim,
            head: HeadMode::Noise,
            conditioning: Conditioning::None,
        }
    }

    pub fn with_head(mut self, head: HeadMode) -> Self {
        self.head = head;
        self
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: String| Err(DenoiserError::InvalidArch(m));
        if self.input_dim == 0 {
            return bad("input dimension must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("need at least one hidden layer, all widths positive".into());
        }
        if !self.emb_dim.is_multiple_of(2) {
            return bad(format!("embedding dimension {} must be even", self.emb_dim));
        }
        if self.emb_dim < 4 {
            return Err(DenoiserError::DegenerateEmbedding(self.emb_dim));
        }
        match self.conditioning {
            Conditioning::None => {}
            Conditioning::Class { num_classes, signal_dim, groups } => {
                if num_classes == 0 || signal_dim == 0 || groups == 0 {
                    return bad("class conditioning sizes must be positive".into());
                }
                for &w in &self.hidden {
                    if w % signal_dim != 0 || w % groups != 0 {
                        return bad(format!("width {w} must be divisible by signal_dim {signal_dim} and groups {groups}"));
                    }
                }
            }
            Conditioning::Tokens { len, dim, heads, head_dim } => {
                if len == 0 || dim == 0 || heads == 0 || head_dim == 0 {
                    return bad("token conditioning sizes must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn is_dual_head(&self) -> bool {
        self.head == HeadMode::NoiseAndVariance
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.conditioning {
            Conditioning::Class { num_classes, .. } => Some(num_classes),
            _ => None,
        }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Const(f64),
    Identity,
}

/// One named block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: [usize; 2],
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init) {
        self.entries.push(ParamEntry {
            name,
            offset: self.offset,
            shape: [rows, cols],
        });
        self.inits.push(init);
        self.offset += rows * cols;
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) {
        self.push(name, rows, cols, Init::Uniform { fan_in: rows });
    }

    fn bias(&mut self, name: String, cols: usize, fan_in: usize) {
        self.push(name, 1, cols, Init::Uniform { fan_in });
    }
}

fn build_layout(arch: &Arch) -> (Vec<ParamEntry>, Vec<Init>) {
    let mut b = LayoutBuilder {
        entries: Vec::new(),
        inits: Vec::new(),
        offset: 0,
    };
    let mut prev = arch.input_dim;
    for (l, &w) in arch.hidden.iter().enumerate() {
        b.weight(format!("block{l}.w"), prev, w);
        b.bias(format!("block{l}.b"), w, prev);
        b.weight(format!("block{l}.time"), arch.emb_dim, w);
        if let Conditioning::Class { num_classes, signal_dim, .. } = arch.conditioning {
            b.weight(format!("block{l}.scale.w"), num_classes, signal_dim);
            b.push(format!("block{l}.scale.b"), 1, signal_dim, Init::Const(1.0));
            b.weight(format!("block{l}.shift.w"), num_classes, signal_dim);
            b.push(format!("block{l}.shift.b"), 1, signal_dim, Init::Const(0.0));
            b.push(format!("block{l}.norm.gamma"), 1, w, Init::Const(1.0));
            b.push(format!("block{l}.norm.beta"), 1, w, Init::Const(0.0));
        }
        if l == 0 {
            if let Conditioning::Tokens { dim, heads, head_dim, .. } = arch.conditioning {
                for h in 0..heads {
                    b.weight(format!("attn.q{h}"), w, head_dim);
                    b.weight(format!("attn.k{h}"), dim, head_dim);
                    b.weight(format!("attn.v{h}"), dim, head_dim);
                }
                b.weight("attn.out".into(), heads * head_dim, w);
            }
        }
        prev = w;
    }
    b.weight("out.w".into(), prev, arch.input_dim);
    b.bias("out.b".into(), arch.input_dim, prev);
    b.push("skip.w".into(), arch.input_dim, arch.input_dim, Init::Identity);
    b.weight("skip.time".into(), arch.emb_dim, arch.input_dim);
    if arch.is_dual_head() {
        b.weight("var.w".into(), prev, arch.input_dim);
        b.bias("var.b".into(), arch.input_dim, prev);
    }
    (b.entries, b.inits)
}

/// Sinusoidal embedding: entry `i` (1-based, `i <= c`) is
/// `sin(t / 10000^{i/(c-1)})` and entry `c + i` the matching cosine.
pub fn time_embedding(t: f64, emb_dim: usize) -> Result<Tensor, DenoiserError> {
    let c = emb_dim / 2;
    if !emb_dim.is_multiple_of(2) || c < 2 {
        return Err(DenoiserError::DegenerateEmbedding(emb_dim));
    }
    let mut out = vec![0.0; emb_dim];
    for i in 1..=c {
        let arg = t / 10000f64.powf(i as f64 / (c - 1) as f64);
        out[i - 1] = arg.sin();
        out[c + i - 1] = arg.cos();
    }
    Ok(Tensor::from_vec(out))
}

/// Parameters of a group normalization over `groups` contiguous channel blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub groups: usize,
}

/// Adaptive group normalization on the tape.
///
/// `x` is `rows x F`; `y1` and `y2` are `rows x D` (or `1 x D`) with
/// `F = D·n`. Output entry `i + D·j` is `y1_i·GN(x)_{i+D·j} + y2_i`.
#[allow(clippy::too_many_arguments)]
pub fn adagn_var(tape: &mut Tape, x: Var, y1: Var, y2: Var, gamma: Var, beta: Var, eps: f64, groups: usize) -> Result<Var, NumericsError> {
    let (rows, f) = tape.value(x).dims2();
    let d = tape.value(y1).cols();
    if groups == 0 || f % groups != 0 || d == 0 || f % d != 0 || tape.value(y2).cols() != d {
        return Err(NumericsError::ShapeMismatch {
            expected: vec![rows, f],
            found: vec![tape.value(y1).rows(), d],
        });
    }
    let n = f / d;
    let gsize = f / groups;
    let xg = tape.reshape(x, rows * groups, gsize)?;
    let sum = tape.sum_rows(xg);
    let mean = tape.scale(sum, 1.0 / gsize as f64);
    let centered = tape.sub(xg, mean)?;
    let sq = tape.square(centered);
    let ss = tape.sum_rows(sq);
    let var = tape.scale(ss, 1.0 / gsize as f64);
    let var_eps = tape.add_scalar(var, eps);
    let inv_sd = tape.powf(var_eps, -0.5);
    let normed = tape.mul(centered, inv_sd)?;
    let normed = tape.reshape(normed, rows, f)?;
    let scaled = tape.mul(normed, gamma)?;
    let gn = tape.add(scaled, beta)?;
    let (s, b) = if n == 1 { (y1, y2) } else { (tape.tile_cols(y1, n), tape.tile_cols(y2, n)) };
    let modulated = tape.mul(gn, s)?;
    tape.add(modulated, b)
}

/// Adaptive group normalization of a single feature vector.
pub fn adagn(x: &Tensor, y1: &Tensor, y2: &Tensor, p: &GroupNormParams) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let row = |t: &Tensor| t.clone().reshape(vec![1, t.len()]);
    let (xv, a, b) = (tape.constant(row(x)?), tape.constant(row(y1)?), tape.constant(row(y2)?));
    let (g, be) = (tape.constant(row(&p.gamma)?), tape.constant(row(&p.beta)?));
    let out = adagn_var(&mut tape, xv, a, b, g, be, p.eps, p.groups)?;
    tape.value(out).clone().reshape(vec![x.len()])
}

/// Per-head query/key/value projections and the output map of a cross-attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars<'a> {
    pub wq: &'a [Var],
    pub wk: &'a [Var],
    pub wv: &'a [Var],
    pub out: Var,
}

/// `concat_i softmax(Q_i K_iᵀ / √d_head) V_i · A` with `Q_i = x·W^Q_i`,
/// `K_i = y·W^K_i`, `V_i = y·W^V_i`; the softmax runs over the key rows.
pub fn cross_attention_var(tape: &mut Tape, x: Var, y: Var, w: AttentionVars<'_>) -> Result<Var, NumericsError> {
    let mut heads = Vec::with_capacity(w.wq.len());
    for ((&wq, &wk), &wv) in w.wq.iter().zip(w.wk).zip(w.wv) {
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(y, wk)?;
        let v = tape.matmul(y, wv)?;
        let dh = tape.value(q).cols() as f64;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / dh.sqrt());
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, v)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    tape.matmul(cat, w.out)
}

/// Weights of a standalone cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionWeights {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub out: Tensor,
}

pub fn cross_attention(x: &Tensor, y: &Tensor, w: &CrossAttentionWeights) -> Result<Tensor, NumericsError> {
    if w.wq.is_empty() || w.wq.len() != w.wk.len() || w.wq.len() != w.wv.len() {
        return Err(NumericsError::ShapeMismatch {
            expected: vec![w.wq.len()],
            found: vec![w.wk.len(), w.wv.len()],
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let c = |tape: &mut Tape, ts: &[Tensor]| ts.iter().map(|t| tape.constant(t.clone())).collect::<Vec<_>>();
    let (wq, wk, wv) = (c(&mut tape, &w.wq), c(&mut tape, &w.wk), c(&mut tape, &w.wv));
    let out = tape.constant(w.out.clone());
    let r = cross_attention_var(&mut tape, xv, yv, AttentionVars { wq: &wq, wk: &wk, wv: &wv, out })?;
    Ok(tape.value(r).clone())
}

/// Conditioning input for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    None,
    /// `J x C` matrix of one-hot (or all-zero) rows.
    Class(Tensor),
    /// `len x dim` token matrix shared by every row of the batch.
    Tokens(Tensor),
}

impl Condition {
    /// The same one-hot class (or the zero vector when `class` is `None`) for `rows` rows.
    pub fn class_rows(class: Option<usize>, num_classes: usize, rows: usize) -> Self {
        let mut data = vec![0.0; rows * num_classes];
        if let Some(c) = class {
            for r in 0..rows {
                data[r * num_classes + c] = 1.0;
            }
        }
        Condition::Class(Tensor::matrix(rows, num_classes, data).expect("non-empty"))
    }

    /// One-hot rows for a list of labels.
    pub fn one_hot(labels: &[usize], num_classes: usize) -> Self {
        let mut data = vec![0.0; labels.len() * num_classes];
        for (r, &c) in labels.iter().enumerate() {
            data[r * num_classes + c] = 1.0;
        }
        Condition::Class(Tensor::matrix(labels.len(), num_classes, data).expect("non-empty"))
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `J x d` noise estimate.
    pub eps: Tensor,
    /// `J x d` variance interpolation, for dual-head models.
    pub v2: Option<Tensor>,
}

/// Anything that predicts the injected noise of a noised batch.
pub trait NoisePredictor {
    fn dim(&self) -> usize;
    fn is_dual_head(&self) -> bool;
    fn num_classes(&self) -> Option<usize>;
    /// `xt` is `J x d`; all rows share the step `t`.
    fn predict(&self, xt: &Tensor, t: usize, cond: &Condition) -> Result<Prediction, DenoiserError>;
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub eps: Var,
    pub v2: Option<Var>,
}

/// Network parameters plus the architecture that lays them out.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Arch,
    layout: Vec<ParamEntry>,
    params: Tensor,
}

impl DenoiserModel {
    /// Fresh model with weights uniform in `±1/√fan_in`; AdaGN scales
    /// start at 1 and shifts at 0, and the linear skip at the identity.
    pub fn new(arch: Arch, seed: u64) -> Result<Self, DenoiserError> {
        arch.validate()?;
        let (layout, inits) = build_layout(&arch);
        let mut rng = RngStream::new(seed);
        let mut params = Vec::with_capacity(layout.last().map_or(0, |e| e.offset + e.len()));
        for (e, init) in layout.iter().zip(&inits) {
            match *init {
                Init::Uniform { fan_in } => {
                    let r = 1.0 / (fan_in as f64).sqrt();
                    params.extend(rng.uniform_vec(e.len(), -r, r));
                }
                Init::Const(c) => params.extend(std::iter::repeat_n(c, e.len())),
                Init::Identity => {
                    let n = e.shape[0];
                    params.extend((0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(Self {
            arch,
            layout,
            params: Tensor::from_vec(params),
        })
    }

    pub fn from_params(arch: Arch, params: Tensor) -> Result<Self, DenoiserError> {
        arch.validate()?;
        let (layout, _) = build_layout(&arch);
        let expected = layout.last().map_or(0, |e| e.offset + e.len());
        if params.len() != expected {
            return Err(DenoiserError::ParamLength { expected, found: params.len() });
        }
        let params = params.reshape(vec![expected])?;
        Ok(Self { arch, layout, params })
    }

    pub fn zeros(arch: Arch) -> Result<Self, DenoiserError> {
        let n = {
            arch.validate()?;
            let (l, _) = build_layout(&arch);
            l.last().map_or(0, |e| e.offset + e.len())
        };
        Self::from_params(arch, Tensor::zeros(&[n]))
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Tensor) -> Result<(), DenoiserError> {
        if params.len() != self.params.len() {
            return Err(DenoiserError::ParamLength { expected: self.params.len(), found: params.len() });
        }
        self.params = params.reshape(vec![self.params.len()])?;
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.layout.iter().find(|e| e.name == name)
    }

    /// Views of one layout block as a matrix.
    pub fn param_matrix(&self, name: &str) -> Option<Tensor> {
        let e = self.entry(name)?;
        let data = self.params.data()[e.offset..e.offset + e.len()].to_vec();
        Tensor::matrix(e.shape[0], e.shape[1], data).ok()
    }

    /// Pushes every parameter block onto the tape, as leaves when
    /// `trainable` and as constants otherwise.
    pub fn param_vars(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.layout
            .iter()
            .map(|e| {
                let data = self.params.data()[e.offset..e.offset + e.len()].to_vec();
                let t = Tensor::matrix(e.shape[0], e.shape[1], data).expect("layout shape");
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Flattens per-block gradients back into the parameter layout.
    pub fn flat_gradient(&self, grads: &Gradients, vars: &[Var]) -> Tensor {
        let mut out = Vec::with_capacity(self.params.len());
        for &v in vars {
            out.extend_from_slice(grads.get(v).data());
        }
        Tensor::from_vec(out)
    }

    fn check_condition(&self, cond: &Condition, rows: usize) -> Result<(), DenoiserError> {
        let mismatch = |m: String| Err(DenoiserError::ConditioningMismatch(m));
        match (&self.arch.conditioning, cond) {
            (Conditioning::None, Condition::None) => Ok(()),
            (Conditioning::Class { num_classes, .. }, Condition::Class(c)) => {
                if c.dims2() != (rows, *num_classes) {
                    return mismatch(format!("class input {:?} for {rows} rows and {num_classes} classes", c.shape()));
                }
                Ok(())
            }
            (Conditioning::Tokens { len, dim, .. }, Condition::Tokens(y)) => {
                if y.dims2() != (*len, *dim) {
                    return mismatch(format!("token matrix {:?}, expected [{len}, {dim}]", y.shape()));
                }
                Ok(())
            }
            (expected, _) => mismatch(format!("model expects {expected:?}")),
        }
    }

    /// Records the forward pass of a `J x d` batch at step `t`.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &[Var], xt: Var, t: usize, cond: &Condition) -> Result<ForwardVars, DenoiserError> {
        let (rows, cols) = tape.value(xt).dims2();
        if cols != self.arch.input_dim {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![rows, self.arch.input_dim],
                found: vec![rows, cols],
            }
            .into());
        }
        self.check_condition(cond, rows)?;
        let emb = time_embedding(t as f64, self.arch.emb_dim)?.reshape(vec![1, self.arch.emb_dim])?;
        let emb = tape.constant(emb);
        let cvar = match cond {
            Condition::Class(c) | Condition::Tokens(c) => Some(tape.constant(c.clone())),
            Condition::None => None,
        };

        let mut next = 0;
        let mut take = || {
            next += 1;
            p[next - 1]
        };
        let mut h = xt;
        let mut width = self.arch.input_dim;
        for (l, &w) in self.arch.hidden.iter().enumerate() {
            let (wl, bl, ul) = (take(), take(), take());
            let z = tape.matmul(h, wl)?;
            let z = tape.add(z, bl)?;
            let te = tape.matmul(emb, ul)?;
            let mut z = tape.add(z, te)?;
            if let Conditioning::Class { groups, .. } = self.arch.conditioning {
                let (sw, sb, hw, hb, gamma, beta) = (take(), take(), take(), take(), take(), take());
                let c = cvar.expect("checked");
                let y1 = tape.matmul(c, sw)?;
                let y1 = tape.add(y1, sb)?;
                let y2 = tape.matmul(c, hw)?;
                let y2 = tape.add(y2, hb)?;
                z = adagn_var(tape, z, y1, y2, gamma, beta, GROUP_NORM_EPS, groups)?;
            }
            let a = tape.tanh(z);
            h = if w == width { tape.add(h, a)? } else { a };
            if l == 0 {
                if let Conditioning::Tokens { heads, .. } = self.arch.conditioning {
                    let mut wq = Vec::with_capacity(heads);
                    let mut wk = Vec::with_capacity(heads);
                    let mut wv = Vec::with_capacity(heads);
                    for _ in 0..heads {
                        wq.push(take());
                        wk.push(take());
                        wv.push(take());
                    }
                    let out = take();
                    let y = cvar.expect("checked");
                    let att = cross_attention_var(tape, h, y, AttentionVars { wq: &wq, wk: &wk, wv: &wv, out })?;
                    h = tape.add(h, att)?;
                }
            }
            width = w;
        }
        let (ow, ob, sw, st) = (take(), take(), take(), take());
        let eps = tape.matmul(h, ow)?;
        let eps = tape.add(eps, ob)?;
        let skip = tape.matmul(xt, sw)?;
        let eps = tape.add(eps, skip)?;
        let gate = tape.matmul(emb, st)?;
        let gated = tape.mul(xt, gate)?;
        let eps = tape.add(eps, gated)?;
        let v2 = if self.arch.is_dual_head() {
            let (vw, vb) = (take(), take());
            let v = tape.matmul(h, vw)?;
            let v = tape.add(v, vb)?;
            Some(tape.tanh(v))
        } else {
            None
        };
        Ok(ForwardVars { eps, v2 })
    }
}

impl NoisePredictor for DenoiserModel {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn is_dual_head(&self) -> bool {
        self.arch.is_dual_head()
    }

    fn num_classes(&self) -> Option<usize> {
        self.arch.num_classes()
    }

    fn predict(&self, xt: &Tensor, t: usize, cond: &Condition) -> Result<Prediction, DenoiserError> {
        let mut tape = Tape::new();
        let p = self.param_vars(&mut tape, false);
        let (r, c) = xt.dims2();
        let x = tape.constant(xt.clone().reshape(vec![r, c])?);
        let out = self.forward_on_tape(&mut tape, &p, x, t, cond)?;
        Ok(Prediction {
            eps: tape.value(out.eps).clone(),
            v2: out.v2.map(|v| tape.value(v).clone()),
        })
    }
}

/// `(eps_hat, v2)` for a batch.
pub fn denoise(model: &DenoiserModel, xt: &Tensor, t: usize, cond: &Condition) -> Result<(Tensor, Option<Tensor>), DenoiserError> {
    let p = model.predict(xt, t, cond)?;
    Ok((p.eps, p.v2))
}
