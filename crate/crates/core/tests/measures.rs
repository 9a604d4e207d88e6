use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use superrep::mc::ks_statistic;
use superrep::{
    calibrate_lambda0, check_doob_hedge, doob_quadratic_hedge, kusuoka_certificate,
    terminal_prices_under_q, ConstantVol, KusuokaOptions, MarketParams, PathPrefix, TimeRampVol,
};

fn market(n: usize) -> MarketParams {
    MarketParams {
        n_steps: n,
        ..MarketParams::default()
    }
}

#[test]
fn terminal_law_under_the_tilted_measure_is_close_to_normal() {
    let params = MarketParams { p0: 0.5, ..market(4096) };
    let n_paths = 20_000;
    for nu in [0.8, 1.2] {
        let samples = terminal_prices_under_q(&ConstantVol { nu }, &params, &KusuokaOptions::default(), n_paths, 11).unwrap();
        let normal = Normal::new(params.p0, nu).unwrap();
        let d = ks_statistic(&samples, |x| normal.cdf(x));
        // 1% critical value plus the largest atom of the lattice law.
        let atom = 2.0 * params.step_size() / (nu * (2.0 * std::f64::consts::PI).sqrt());
        let limit = 1.63 / (n_paths as f64).sqrt() + atom;
        assert!(d < limit, "nu={nu}: KS {d} >= {limit}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unclipped_certificates_are_exact_martingales(
        n in 1usize..=10,
        nu in 0.7..1.4f64,
        ramp in 0.0..0.3f64,
    ) {
        let params = market(n);
        let constant = kusuoka_certificate(&ConstantVol { nu }, &params, &KusuokaOptions::default()).unwrap();
        let ramped = kusuoka_certificate(&TimeRampVol { start: nu, end: nu + ramp }, &params, &KusuokaOptions::default()).unwrap();
        for cert in [constant, ramped] {
            prop_assert_eq!(cert.q_clips, 0);
            prop_assert!(cert.martingale_defect() <= 1e-12);
            let total: f64 = cert.path_probabilities().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(cert.cond_prob.iter().all(|q| *q > 0.0 && *q < 1.0));
        }
    }

    #[test]
    fn hedge_surplus_is_concave_quadratic_in_lambda(bits in any::<u64>(), eps in 0.1..0.5f64) {
        let params = market(64);
        let prefix = PathPrefix::from_bits(bits, 64);
        let s = |lambda: f64| {
            doob_quadratic_hedge(lambda, eps, &params, f64::INFINITY).unwrap().surplus(&prefix).unwrap()
        };
        let (a, b, c) = (s(0.01), s(0.02), s(0.03));
        // s(λ)/λ is affine in λ with nonpositive slope.
        let (u, v, w) = (a / 0.01, b / 0.02, c / 0.03);
        prop_assert!(((v - u) - (w - v)).abs() < 1e-8 * (1.0 + u.abs()));
        prop_assert!(v - u <= 1e-9);
    }
}

#[test]
fn calibrated_lambda_survives_smaller_values_and_fresh_paths() {
    let params = market(128);
    let candidates = [0.1, 0.03, 0.01, 0.005, 0.002];
    let lambda0 = calibrate_lambda0(0.3, &params, &candidates, 4000, 1).unwrap().expect("some candidate passes");
    let hedge = doob_quadratic_hedge(lambda0, 0.3, &params, lambda0).unwrap();
    assert!((hedge.capital - lambda0 * 37.0).abs() < 1e-15);
    assert_eq!(check_doob_hedge(&hedge, 4000, 1).unwrap().violations, 0);
    let half = doob_quadratic_hedge(0.5 * lambda0, 0.3, &params, lambda0).unwrap();
    assert_eq!(check_doob_hedge(&half, 4000, 1).unwrap().violations, 0);
    assert_eq!(check_doob_hedge(&hedge, 4000, 2).unwrap().violations, 0);
}
