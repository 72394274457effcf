use difflab::schedule::*;
use proptest::prelude::*;

/// Double-double running product, an error-free oracle for `ᾱ`.
fn dd_product(factors: impl Iterator<Item = f64>) -> f64 {
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    for a in factors {
        let p = hi * a;
        let err = hi.mul_add(a, -p);
        let l = err + lo * a;
        hi = p + l;
        lo = l - (hi - p);
    }
    hi + lo
}

#[test]
fn linear_product_matches_extended_precision() {
    let s = linear_schedule(1000).unwrap();
    let exact = dd_product(s.alphas().iter().copied());
    let ab = s.alpha_bar(1000);
    assert!(ab > 0.0 && ab < 5e-5, "{ab}");
    assert!(((ab - exact) / exact).abs() <= 1e-12);
}

#[test]
fn linear_interpolates_between_the_endpoints() {
    let s = linear_schedule(11).unwrap();
    for t in 1..=11 {
        let want = 0.9999 - (t - 1) as f64 * (0.9999 - 0.98) / 10.0;
        assert!((s.alpha(t) - want).abs() <= 1e-15);
    }
}

#[test]
fn cosine_follows_the_analytic_curve_until_clipping() {
    let (steps, s) = (200, DEFAULT_COSINE_OFFSET);
    let sched = cosine_schedule(steps, s).unwrap();
    let f = |t: f64| (((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mut clipped = false;
    for t in 1..=steps {
        let analytic = f(t as f64) / f(0.0);
        let step = 1.0 - analytic / (f((t - 1) as f64) / f(0.0));
        if step > MAX_NOISE_STEP {
            clipped = true;
            assert_eq!(1.0 - sched.alpha(t), MAX_NOISE_STEP);
        }
        if !clipped {
            assert!(((sched.alpha_bar(t) - analytic) / analytic).abs() <= 1e-11, "t={t}");
        }
    }
    assert!(clipped);
}

#[test]
fn csv_dump_parses_back_exactly() {
    let s = cosine_schedule(40, 0.008).unwrap();
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    let mut r = csv::Reader::from_reader(&buf[..]);
    assert_eq!(r.headers().unwrap(), vec!["t", "alpha", "alpha_bar", "beta_tilde"]);
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.unwrap();
        let t: usize = rec[0].parse().unwrap();
        assert_eq!(t, i + 1);
        assert_eq!(rec[1].parse::<f64>().unwrap(), s.alpha(t));
        assert_eq!(rec[2].parse::<f64>().unwrap(), s.alpha_bar(t));
        assert_eq!(rec[3].parse::<f64>().unwrap(), s.beta_tilde(t));
        rows += 1;
    }
    assert_eq!(rows, 40);
}

#[test]
fn specs_rebuild_their_schedules() {
    for spec in [ScheduleSpec::Linear { steps: 30 }, ScheduleSpec::Cosine { steps: 30, offset: 0.02 }] {
        let s = spec.build().unwrap();
        assert_eq!(s.spec(), spec);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ScheduleSpec>(&json).unwrap(), spec);
    }
    assert!(ScheduleSpec::Linear { steps: 1 }.build().is_err());
}

fn check_invariants(s: &NoiseSchedule) -> Result<(), TestCaseError> {
    prop_assert_eq!(s.alpha_bar(0), 1.0);
    prop_assert_eq!(s.beta_tilde(1), 0.0);
    let mut prod = 1.0;
    for t in 1..=s.steps() {
        let a = s.alpha(t);
        prop_assert!(1.0 - a > 0.0 && 1.0 - a <= MAX_NOISE_STEP);
        prod *= a;
        prop_assert_eq!(prod, s.alpha_bar(t));
        prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0);
        if t >= 2 {
            let bt = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * (1.0 - a);
            prop_assert!((s.beta_tilde(t) - bt).abs() <= 1e-15);
            prop_assert!(s.beta_tilde(t) <= 1.0 - a);
        }
    }
    Ok(())
}

proptest! {
    #[test]
    fn schedule_invariants(steps in 2usize..1500, offset in 1e-4..0.5f64) {
        check_invariants(&linear_schedule(steps).unwrap())?;
        check_invariants(&cosine_schedule(steps, offset).unwrap())?;
    }

    #[test]
    fn strides_follow_the_floor_formula(steps in 2usize..5000, frac in 0.0..1.0f64) {
        let k = 2 + ((steps - 2) as f64 * frac) as usize;
        let plan = stride_steps(steps, k).unwrap();
        prop_assert_eq!(plan.len(), k);
        prop_assert_eq!(plan.step(0), 0);
        for i in 1..=k {
            prop_assert_eq!(plan.step(i), 1 + (i - 1) * (steps - 1) / (k - 1));
        }
        prop_assert!(plan.steps().windows(2).all(|w| w[0] < w[1]));
    }
}
