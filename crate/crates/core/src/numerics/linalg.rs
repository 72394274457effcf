//! Dense symmetric linear algebra on square [`Tensor`] matrices.

use super::tensor::Tensor;
use super::NumericsError;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-10;
const INDEFINITE_TOL: f64 = 1e-6;

fn square_dim(m: &Tensor) -> Result<usize, NumericsError> {
    let (r, c) = m.dims2();
    if r != c || m.shape().len() != 2 {
        return Err(NumericsError::NotSquare {
            shape: m.shape().to_vec(),
        });
    }
    Ok(r)
}

fn scale_of(m: &Tensor) -> f64 {
    m.max_abs().max(1.0)
}

pub fn is_symmetric(m: &Tensor, tol: f64) -> bool {
    let Ok(n) = square_dim(m) else { return false };
    let d = m.data();
    (0..n).all(|i| (0..i).all(|j| (d[i * n + j] - d[j * n + i]).abs() <= tol))
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Tensor) -> Tensor {
    let t = m.transpose();
    m.zip_map(&t, |a, b| 0.5 * (a + b)).expect("same shape")
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as the columns of the second tensor.
pub fn symmetric_eigen(m: &Tensor) -> Result<(Vec<f64>, Tensor), NumericsError> {
    let n = square_dim(m)?;
    if !is_symmetric(m, SYMMETRY_TOL * scale_of(m)) {
        return Err(NumericsError::NotSymmetric);
    }
    let mut a = symmetrize(m).into_data();
    let mut v = Tensor::identity(n).into_data();
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * frob || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + new_col] = v[k * n + old_col];
        }
    }
    Ok((values, Tensor::matrix(n, n, vecs)?))
}

/// Principal square root of a symmetric positive semidefinite matrix.
///
/// Eigenvalues in `[-1e-6·s, 0)` (with `s = max(1, max|λ|)`) are treated as
/// round-off and clamped to zero; anything more negative is rejected.
pub fn spd_sqrt(m: &Tensor) -> Result<Tensor, NumericsError> {
    let (values, vecs) = symmetric_eigen(m)?;
    let n = values.len();
    let scale = values.iter().fold(1.0_f64, |s, v| s.max(v.abs()));
    let mut roots = Vec::with_capacity(n);
    for &lambda in &values {
        if lambda < -INDEFINITE_TOL * scale {
            return Err(NumericsError::IndefiniteMatrix {
                min_eigenvalue: lambda,
            });
        }
        roots.push(lambda.max(0.0).sqrt());
    }
    let vd = vecs.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|k| vd[i * n + k] * roots[k] * vd[j * n + k]).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Tensor::matrix(n, n, out)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &Tensor) -> Result<Tensor, NumericsError> {
    let n = square_dim(m)?;
    if !is_symmetric(m, SYMMETRY_TOL * scale_of(m)) {
        return Err(NumericsError::NotSymmetric);
    }
    let a = m.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(NumericsError::NotPositiveDefinite);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Tensor::matrix(n, n, l)
}

/// Solves `L Lᵀ x = b` for each column of `b`.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let n = square_dim(l)?;
    let (rb, cb) = if b.shape().len() == 1 { (b.len(), 1) } else { b.dims2() };
    if rb != n {
        return Err(NumericsError::ShapeMismatch {
            expected: vec![n, cb],
            found: b.shape().to_vec(),
        });
    }
    let ld = l.data();
    let mut x = b.data().to_vec();
    for col in 0..cb {
        for i in 0..n {
            let mut s = x[i * cb + col];
            for k in 0..i {
                s -= ld[i * n + k] * x[k * cb + col];
            }
            x[i * cb + col] = s / ld[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * cb + col];
            for k in i + 1..n {
                s -= ld[k * n + i] * x[k * cb + col];
            }
            x[i * cb + col] = s / ld[i * n + i];
        }
    }
    Tensor::new(if b.shape().len() == 1 { vec![n] } else { vec![n, cb] }, x)
}

/// `ln det L Lᵀ` from a Cholesky factor.
pub fn cholesky_logdet(l: &Tensor) -> f64 {
    let n = l.rows();
    2.0 * (0..n).map(|i| l.at(i, i).ln()).sum::<f64>()
}

pub fn trace(m: &Tensor) -> f64 {
    let n = m.rows();
    (0..n).map(|i| m.at(i, i)).sum()
}

pub fn frobenius(m: &Tensor) -> f64 {
    m.norm()
}
