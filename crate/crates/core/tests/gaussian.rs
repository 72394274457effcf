use difflab::gaussian::*;
use difflab::numerics::{RngStream, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn v(x: &[f64]) -> Tensor {
    Tensor::from_vec(x.to_vec())
}

fn random_spd(rng: &mut RngStream, n: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.uniform() * 2.0 - 1.0);
    &b * b.transpose() + DMatrix::identity(n, n) * 0.2
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::matrix(r, c, (0..r * c).map(|k| m[(k / c, k % c)]).collect()).unwrap()
}

#[test]
fn kl_matches_monte_carlo_in_three_dimensions() {
    let mut rng = RngStream::new(11);
    let (s1, s2) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3));
    let mu1 = [0.3, -0.2, 0.5];
    let mu2 = [-0.1, 0.4, 0.0];
    let p = GaussianSpec::full(v(&mu1), to_tensor(&s1)).unwrap();
    let q = GaussianSpec::full(v(&mu2), to_tensor(&s2)).unwrap();
    let kl = gaussian_kl(&p, &q).unwrap();

    let l = s1.clone().cholesky().unwrap().l();
    let n = 1_000_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let z = DVector::from_vec(rng.normal_vec(3));
        let x = DVector::from_row_slice(&mu1) + &l * z;
        let xt = v(x.as_slice());
        let r = gaussian_logpdf(&xt, &p).unwrap() - gaussian_logpdf(&xt, &q).unwrap();
        sum += r;
        sum_sq += r * r;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - kl).abs() <= 3.0 * se, "mc {mean} closed {kl} se {se}");
}

#[test]
fn scalar_marginal_matches_two_stage_monte_carlo() {
    let (m2, s2, a, m1, s1) = (0.7, 0.4, -1.3, 0.25, 0.09);
    let inner = GaussianSpec::isotropic(v(&[m2]), s2).unwrap();
    let k = AffineKernel::new(LinearMap::Scalar(a), v(&[m1]), Covariance::Isotropic(s1));
    let g = gaussian_marginal(&inner, &k).unwrap();
    let (mean, var) = (g.mean().data()[0], g.scalar_variance().unwrap());

    let mut rng = RngStream::new(3);
    let n = 1_000_000;
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let y = m2 + s2.sqrt() * rng.standard_normal();
            a * y + m1 + s1.sqrt() * rng.standard_normal()
        })
        .collect();
    let em = xs.iter().sum::<f64>() / n as f64;
    let ev = xs.iter().map(|x| (x - em).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((em - mean).abs() <= 3.0 * (var / n as f64).sqrt());
    assert!((ev - var).abs() <= 3.0 * var * (2.0 / (n - 1) as f64).sqrt());
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * quad_erfc(-z / std::f64::consts::SQRT_2)
}

// Independent of the library's erfc: Simpson quadrature of 2/√π ∫_x^{x+12} e^{-t²} dt.
fn quad_erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - quad_erfc(-x);
    }
    let n = 4000;
    let h = 12.0 / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(x) + f(x + 12.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(x + i as f64 * h);
    }
    2.0 / std::f64::consts::PI.sqrt() * s * h / 3.0
}

#[test]
fn posterior_matches_rejection_sampled_histogram() {
    let (m2, s2, a, m1, s1) = (0.2, 1.0, 0.8, -0.1, 0.5);
    let x_obs = 0.6;
    let prior = GaussianSpec::isotropic(v(&[m2]), s2).unwrap();
    let k = AffineKernel::new(LinearMap::Scalar(a), v(&[m1]), Covariance::Isotropic(s1));
    let post = gaussian_posterior(&v(&[x_obs]), &prior, &k).unwrap();
    let (pm, pv) = (post.mean().data()[0], post.scalar_variance().unwrap());

    let mut rng = RngStream::new(17);
    let half = 0.005;
    let mut kept = Vec::new();
    for _ in 0..1_000_000 {
        let y = m2 + s2.sqrt() * rng.standard_normal();
        let x = a * y + m1 + s1.sqrt() * rng.standard_normal();
        if (x - x_obs).abs() <= half {
            kept.push(y);
        }
    }
    kept.sort_by(f64::total_cmp);
    let n = kept.len();
    assert!(n > 2000, "only {n} accepted");
    let ks = kept
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let c = normal_cdf((y - pm) / pv.sqrt());
            (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / (n as f64).sqrt();
    assert!(ks < critical, "KS {ks} >= {critical} with n={n}");
}

#[test]
fn nonsymmetric_posterior_matches_schur_complement() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
    let mu2 = DVector::from_row_slice(&[1.0, -2.0]);
    let mu1 = DVector::from_row_slice(&[0.5, 0.1]);
    let s2 = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5]);
    let s1 = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.4]);
    let x = DVector::from_row_slice(&[0.9, -0.7]);

    // Joint (y, x) moments; condition with the Schur complement.
    let mx = &a * &mu2 + &mu1;
    let sxx = &a * &s2 * a.transpose() + &s1;
    let syx = &s2 * a.transpose();
    let sxx_inv = sxx.clone().try_inverse().unwrap();
    let mean = &mu2 + &syx * &sxx_inv * (&x - &mx);
    let cov = &s2 - &syx * &sxx_inv * syx.transpose();

    let prior = GaussianSpec::full(v(mu2.as_slice()), to_tensor(&s2)).unwrap();
    let k = AffineKernel::new(LinearMap::Matrix(to_tensor(&a)), v(mu1.as_slice()), Covariance::Full(to_tensor(&s1)));
    let post = gaussian_posterior(&v(x.as_slice()), &prior, &k).unwrap();
    for i in 0..2 {
        assert!((post.mean().data()[i] - mean[i]).abs() < 1e-12);
        for j in 0..2 {
            assert!((post.cov_matrix().at(i, j) - cov[(i, j)]).abs() < 1e-12);
        }
    }

    // The observation mean is A·μ₂ + μ₁ (not Aᵀ·μ₂ + μ₁): check by simulation.
    let l2 = s2.clone().cholesky().unwrap().l();
    let l1 = s1.clone().cholesky().unwrap().l();
    let mut rng = RngStream::new(99);
    let n = 200_000;
    let mut acc = DVector::zeros(2);
    for _ in 0..n {
        let y = &mu2 + &l2 * DVector::from_vec(rng.normal_vec(2));
        acc += &a * y + &mu1 + &l1 * DVector::from_vec(rng.normal_vec(2));
    }
    acc /= n as f64;
    let transposed = a.transpose() * &mu2 + &mu1;
    for i in 0..2 {
        let se = (sxx[(i, i)] / n as f64).sqrt();
        assert!((acc[i] - mx[i]).abs() <= 4.0 * se);
        assert!((acc[i] - transposed[i]).abs() > 10.0 * se);
    }
}

#[test]
fn ddpm_posterior_specialization() {
    let (alpha, ab_prev) = (0.9_f64, 0.9_f64);
    let ab = alpha * ab_prev;
    let (x0, xt) = (0.37, -0.52);
    let prior = GaussianSpec::isotropic(v(&[ab_prev.sqrt() * x0]), 1.0 - ab_prev).unwrap();
    let k = AffineKernel::new(LinearMap::Scalar(alpha.sqrt()), v(&[0.0]), Covariance::Isotropic(1.0 - alpha));
    let post = gaussian_posterior(&v(&[xt]), &prior, &k).unwrap();
    let mu = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xt + ab_prev.sqrt() * (1.0 - alpha) / (1.0 - ab) * x0;
    let bt = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - alpha);
    assert!((post.mean().data()[0] - mu).abs() < 1e-12);
    assert!((post.scalar_variance().unwrap() - bt).abs() < 1e-12);
}

#[test]
fn our_erfc_oracle_is_accurate() {
    assert!((quad_erfc(0.0) - 1.0).abs() < 1e-12);
    assert!((normal_cdf(1.0) - 0.8413447460685429).abs() < 1e-10);
}

fn spd_strategy(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |b| {
        let b = DMatrix::from_row_slice(n, n, &b);
        &b * b.transpose() + DMatrix::identity(n, n) * 0.1
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(
        s1 in spd_strategy(3), s2 in spd_strategy(3),
        m1 in prop::collection::vec(-2.0..2.0f64, 3), m2 in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let p = GaussianSpec::full(v(&m1), to_tensor(&s1)).unwrap();
        let q = GaussianSpec::full(v(&m2), to_tensor(&s2)).unwrap();
        prop_assert!(gaussian_kl(&p, &q).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&p, &p).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn chained_marginals_equal_one_combined_step(
        a1 in -2.0..2.0f64, a2 in -2.0..2.0f64, b1 in -1.0..1.0f64, b2 in -1.0..1.0f64,
        n1 in 0.01..2.0f64, n2 in 0.01..2.0f64, m in -1.0..1.0f64, s in 0.01..2.0f64,
    ) {
        let inner = GaussianSpec::isotropic(v(&[m, -m]), s).unwrap();
        let k1 = AffineKernel::new(LinearMap::Scalar(a1), v(&[b1, b1]), Covariance::Isotropic(n1));
        let k2 = AffineKernel::new(LinearMap::Scalar(a2), v(&[b2, b2]), Covariance::Isotropic(n2));
        let twice = gaussian_marginal(&gaussian_marginal(&inner, &k1).unwrap(), &k2).unwrap();
        let combined = AffineKernel::new(
            LinearMap::Scalar(a1 * a2), v(&[a2 * b1 + b2, a2 * b1 + b2]), Covariance::Isotropic(a2 * a2 * n1 + n2));
        let once = gaussian_marginal(&inner, &combined).unwrap();
        for (x, y) in twice.mean().data().iter().zip(once.mean().data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((twice.scalar_variance().unwrap() - once.scalar_variance().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn posterior_then_marginal_recovers_the_prior(
        s2 in spd_strategy(2), s1 in spd_strategy(2),
        a in prop::collection::vec(-1.5..1.5f64, 4), m in prop::collection::vec(-1.0..1.0f64, 2),
    ) {
        let prior = GaussianSpec::full(v(&m), to_tensor(&s2)).unwrap();
        let kernel = AffineKernel::new(
            LinearMap::Matrix(Tensor::matrix(2, 2, a).unwrap()), v(&[0.3, -0.3]), Covariance::Full(to_tensor(&s1)));
        let evidence = gaussian_marginal(&prior, &kernel).unwrap();
        let back = gaussian_posterior_kernel(&prior, &kernel).unwrap();
        let recovered = gaussian_marginal(&evidence, &back).unwrap();
        for (x, y) in recovered.mean().data().iter().zip(prior.mean().data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let diff = recovered.cov_matrix().sub(&prior.cov_matrix()).unwrap();
        prop_assert!(diff.max_abs() < 1e-9);
    }
}
