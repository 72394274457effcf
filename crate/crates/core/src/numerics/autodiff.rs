//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Every node holds a full forward value. Binary elementwise operations
//! broadcast over `1`-sized matrix dimensions (rank-2 x row or column
//! vector), which is all the denoiser and the losses need. Gradients
//! are recovered by a single reverse sweep in node order, so the tape
//! is topologically sorted by construction.

use std::f64::consts::PI;

use super::tensor::{matmul_into, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Erfc(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    TileCols(Var, usize),
    Opaque(&'static str),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`, shaped like its forward value.
    /// Nodes the output does not depend on get a zero tensor.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g
                .clone()
                .reshape(self.shapes[var.0].clone())
                .expect("gradient length matches value"),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// Copy of `var` that blocks gradient flow.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    /// Records a node with no derivative rule. Its value participates in
    /// the forward pass, but [`Tape::backward`] fails with
    /// [`NumericsError::UnsupportedPrimitive`] if a gradient has to flow
    /// through it into differentiable inputs.
    pub fn opaque(&mut self, name: &'static str, parents: &[Var], value: Tensor) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Op::Opaque(name), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push_from(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push_from(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push_from(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push_from(Op::Div(a, b), v, &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = as_matrix(self.value(a).map(|x| -x));
        self.push_from(Op::Neg(a), v, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = as_matrix(self.value(a).map(|x| x * c));
        self.push_from(Op::Scale(a, c), v, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = as_matrix(self.value(a).map(|x| x + c));
        self.push_from(Op::AddScalar(a), v, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_from(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push_from(Op::Transpose(a), v, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = as_matrix(self.value(a).map(f64::exp));
        self.push_from(Op::Exp(a), v, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = as_matrix(self.value(a).map(f64::ln));
        self.push_from(Op::Ln(a), v, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = as_matrix(self.value(a).map(f64::tanh));
        self.push_from(Op::Tanh(a), v, &[a])
    }

    /// Complementary error function.
    pub fn erfc(&mut self, a: Var) -> Var {
        let v = as_matrix(self.value(a).map(libm::erfc));
        self.push_from(Op::Erfc(a), v, &[a])
    }

    /// Elementwise `x^p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = as_matrix(self.value(a).map(|x| x.powf(p)));
        self.push_from(Op::Powf(a, p), v, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powf(a, 2.0)
    }

    /// Elementwise `max(x, c)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let v = as_matrix(self.value(a).map(|x| x.max(c)));
        self.push_from(Op::ClampMin(a, c), v, &[a])
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= z;
            }
        }
        let v = Tensor::new(vec![r, c], out).expect("softmax shape");
        self.push_from(Op::SoftmaxRows(a), v, &[a])
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::new(vec![1, 1], vec![self.value(a).sum()]).unwrap();
        self.push_from(Op::Sum(a), v, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, _) = x.dims2();
        let data = (0..r).map(|i| x.row(i).iter().sum()).collect();
        let v = Tensor::new(vec![r, 1], data).unwrap();
        self.push_from(Op::SumRows(a), v, &[a])
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(x.row(i)) {
                *d += v;
            }
        }
        let v = Tensor::new(vec![1, c], data).unwrap();
        self.push_from(Op::SumCols(a), v, &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let v = self.value(a).clone().reshape(vec![rows, cols])?;
        Ok(self.push_from(Op::Reshape(a), v, &[a]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.value(p);
            if x.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    expected: vec![rows, w],
                    found: x.shape().to_vec(),
                });
            }
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w].copy_from_slice(x.row(i));
            }
            offset += w;
        }
        let v = Tensor::new(vec![rows, total], out)?;
        Ok(self.push_from(Op::ConcatCols(parts.to_vec()), v, parts))
    }

    /// Repeats the columns of `a` `n` times: output column `i + D*j` is input column `i`.
    pub fn tile_cols(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = Vec::with_capacity(r * c * n);
        for i in 0..r {
            for _ in 0..n {
                out.extend_from_slice(x.row(i));
            }
        }
        let v = Tensor::new(vec![r, c * n], out).unwrap();
        self.push_from(Op::TileCols(a, n), v, &[a])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericsError> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(NumericsError::NonScalarOutput {
                shape: out_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out_val.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_backward(node, &g)?;
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[parent.0], pg);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>, NumericsError> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a))),
                (*b, reduce_to(g, val(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, val(*a))),
                (*b, reduce_to(&g.map(|x| -x), val(*b))),
            ],
            Op::Mul(a, b) => {
                let ga = broadcast_zip(g, val(*b), |x, y| x * y)?;
                let gb = broadcast_zip(g, val(*a), |x, y| x * y)?;
                vec![(*a, reduce_to(&ga, val(*a))), (*b, reduce_to(&gb, val(*b)))]
            }
            Op::Div(a, b) => {
                let ga = broadcast_zip(g, val(*b), |x, y| x / y)?;
                // d(a/b)/db = -out / b
                let q = broadcast_zip(out, val(*b), |o, y| -o / y)?;
                let gb = broadcast_zip(g, &q, |x, y| x * y)?;
                vec![(*a, reduce_to(&ga, val(*a))), (*b, reduce_to(&gb, val(*b)))]
            }
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let (_, n) = val(*b).dims2();
                let mut ga = vec![0.0; m * k];
                matmul_into(g.data(), val(*b).transpose().data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_into(val(*a).transpose().data(), g.data(), &mut gb, k, m, n);
                vec![
                    (*a, Tensor::new(vec![m, k], ga)?),
                    (*b, Tensor::new(vec![k, n], gb)?),
                ]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Exp(a) => vec![(*a, g.zip_map(out, |x, y| x * y)?)],
            Op::Ln(a) => vec![(*a, g.zip_map(val(*a), |x, y| x / y)?)],
            Op::Tanh(a) => vec![(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))?)],
            Op::Erfc(a) => {
                let c = -2.0 / PI.sqrt();
                vec![(*a, g.zip_map(val(*a), |x, y| x * c * (-y * y).exp())?)]
            }
            Op::Powf(a, p) => {
                let p = *p;
                vec![(*a, g.zip_map(val(*a), |x, y| x * p * y.powf(p - 1.0))?)]
            }
            Op::ClampMin(a, c) => {
                let c = *c;
                vec![(*a, g.zip_map(val(*a), |x, y| if y > c { x } else { 0.0 })?)]
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = out.dims2();
                let mut gi = vec![0.0; r * c];
                for i in 0..r {
                    let s = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gi[i * c + j] = s[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], gi)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(&[val(*a).rows(), val(*a).cols()], g.item()))],
            Op::SumRows(a) => {
                let (r, c) = val(*a).dims2();
                let mut gi = Vec::with_capacity(r * c);
                for i in 0..r {
                    gi.extend(std::iter::repeat_n(g.data()[i], c));
                }
                vec![(*a, Tensor::new(vec![r, c], gi)?)]
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).dims2();
                let mut gi = Vec::with_capacity(r * c);
                for _ in 0..r {
                    gi.extend_from_slice(g.data());
                }
                vec![(*a, Tensor::new(vec![r, c], gi)?)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape().to_vec())?)],
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    res.push((p, Tensor::new(vec![rows, w], gp)?));
                    offset += w;
                }
                res
            }
            Op::TileCols(a, n) => {
                let (r, c) = val(*a).dims2();
                let mut gi = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*n {
                        for k in 0..c {
                            gi[i * c + k] += g.data()[i * c * n + j * c + k];
                        }
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], gi)?)]
            }
            Op::Opaque(name) => return Err(NumericsError::UnsupportedPrimitive(name)),
        })
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_from(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(op, value, rg)
    }
}

/// Evaluates `f` on fresh leaves and returns its value with the gradient
/// with respect to every leaf.
pub fn grad<F>(f: F, leaves: &[Tensor]) -> Result<(f64, Vec<Tensor>), NumericsError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let value = tape.value(out).item();
    Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = t.dims2();
    t.reshape(vec![r, c]).expect("same length")
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
    let (ra, ca) = a.dims2();
    let (rb, cb) = b.dims2();
    let rows = broadcast_dim(ra, rb).ok_or_else(|| mismatch(a, b))?;
    let cols = broadcast_dim(ca, cb).ok_or_else(|| mismatch(a, b))?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(rows * cols);
    if ra == rb && ca == cb {
        out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
    } else {
        for i in 0..rows {
            let ia = if ra == 1 { 0 } else { i };
            let ib = if rb == 1 { 0 } else { i };
            for j in 0..cols {
                let x = ad[ia * ca + if ca == 1 { 0 } else { j }];
                let y = bd[ib * cb + if cb == 1 { 0 } else { j }];
                out.push(f(x, y));
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, _) => Some(b),
        (_, 1) => Some(a),
        _ => None,
    }
}

fn mismatch(a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        expected: a.shape().to_vec(),
        found: b.shape().to_vec(),
    }
}

/// Sums `g` over the dimensions along which `target` was broadcast.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    let (rg, cg) = g.dims2();
    let (rt, ct) = target.dims2();
    if rg == rt && cg == ct {
        return g.clone();
    }
    let mut out = vec![0.0; rt * ct];
    for i in 0..rg {
        let it = if rt == 1 { 0 } else { i };
        for j in 0..cg {
            let jt = if ct == 1 { 0 } else { j };
            out[it * ct + jt] += g.data()[i * cg + j];
        }
    }
    Tensor::new(vec![rt, ct], out).unwrap()
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
