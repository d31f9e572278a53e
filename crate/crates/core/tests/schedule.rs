use flowdistill::clip::Clip;
use flowdistill::schedule::{add_noise, eps_to_x0, substitute_terminal_noise};
use flowdistill::NoiseSchedule;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use proptest::prelude::*;

fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Exact cumulative products of `1 − β_i` for betas spaced linearly between
/// two decimal endpoints given as fractions.
fn exact_alpha_bars(t: usize, start: (i64, i64), end: (i64, i64)) -> Vec<f64> {
    let b0 = ratio(start.0, start.1);
    let b1 = ratio(end.0, end.1);
    let step = (&b1 - &b0) / BigRational::from_integer(BigInt::from(t as i64 - 1));
    let one = BigRational::from_integer(BigInt::from(1));
    let mut acc = one.clone();
    (0..t)
        .map(|i| {
            let beta = &b0 + &step * BigRational::from_integer(BigInt::from(i as i64));
            acc = &acc * (&one - beta);
            acc.to_f64().unwrap()
        })
        .collect()
}

#[test]
fn linear_endpoints() {
    let s = NoiseSchedule::linear(1000, 0.00085, 0.012).unwrap();
    assert_eq!(s.betas()[0], 0.00085);
    assert_eq!(s.betas()[999], 0.012);
    assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
    assert!(s.betas().iter().all(|&b| 0.0 < b && b < 1.0));
    assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn first_alpha_bar() {
    let s = NoiseSchedule::linear(1000, 0.00085, 0.012).unwrap();
    assert!((s.alpha_bars()[0] - 0.99915).abs() <= f64::EPSILON);
}

#[test]
fn alpha_bars_match_exact_product() {
    for t in [1000, 1024] {
        let s = NoiseSchedule::linear(t, 0.00085, 0.012).unwrap();
        let exact = exact_alpha_bars(t, (85, 100_000), (12, 1000));
        for (i, (&got, &want)) in s.alpha_bars().iter().zip(&exact).enumerate() {
            let rel = (got - want).abs() / want;
            assert!(rel < 1e-12, "T={t} t={i}: {got} vs {want} (rel {rel:e})");
        }
    }
}

#[test]
fn add_noise_worked_example() {
    // T = 2 with β = 0.75 gives ᾱ_0 = 0.25.
    let s = NoiseSchedule::linear(2, 0.75, 0.75).unwrap();
    assert_eq!(s.alpha_bars(), &[0.25, 0.0625]);
    let u = Clip::from_fn(2, 3, |f, d| (f * 3 + d) as f64 * 0.5 - 1.0);
    let out = add_noise(&u.map(|v| 2.0 * v), &u, 0, &s).unwrap();
    let want = u.map(|v| v + 0.75f64.sqrt() * v);
    assert!(out.max_abs_diff(&want) < 1e-15);
}

#[test]
fn terminal_substitution_only_at_last_step() {
    let s = NoiseSchedule::linear(64, 0.00085, 0.012).unwrap();
    let x = Clip::from_fn(3, 2, |f, d| (f + d) as f64);
    let e = Clip::from_fn(3, 2, |f, d| -((f * d) as f64) - 0.5);
    assert_eq!(substitute_terminal_noise(&x, &e, 63, &s), e);
    assert_eq!(substitute_terminal_noise(&x, &e, 62, &s), x);
    assert_eq!(substitute_terminal_noise(&x, &e, 0, &s), x);
}

#[test]
fn eps_hat_zero_rescales() {
    let s = NoiseSchedule::linear(1024, 0.00085, 0.012).unwrap();
    let x = Clip::from_fn(2, 2, |f, d| 1.0 + f as f64 - d as f64);
    let got = eps_to_x0(&x, &Clip::zeros(2, 2), 300, &s).unwrap();
    let a = s.alpha_bar(300).sqrt();
    for (g, v) in got.data().iter().zip(x.data()) {
        assert!((g - v / a).abs() < 1e-14);
    }
}

proptest! {
    #[test]
    fn noise_round_trip(
        x0 in prop::collection::vec(-5.0f64..5.0, 6),
        eps in prop::collection::vec(-4.0f64..4.0, 6),
        t in 0i64..1024,
    ) {
        let s = NoiseSchedule::linear(1024, 0.00085, 0.012).unwrap();
        let x0 = Clip::new(3, 2, x0).unwrap();
        let eps = Clip::new(3, 2, eps).unwrap();
        let xt = add_noise(&x0, &eps, t, &s).unwrap();
        let back = eps_to_x0(&xt, &eps, t, &s).unwrap();
        prop_assert!(back.max_abs_diff(&x0) < 1e-10);
    }
}
