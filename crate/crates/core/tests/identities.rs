use proptest::prelude::*;
use superrep::{
    identity_suite, liquidity_cost, spread_closed_form, terminal_wealth, terminal_wealth_gains_form,
    MarketParams, PathPrefix,
};

fn market() -> impl Strategy<Value = MarketParams> {
    (
        -3.0..3.0f64,
        0.2..2.5f64,
        0.2..5.0f64,
        0.01..=1.0f64,
        prop_oneof![Just(0.0), 0.0..0.4f64],
        -1.5..1.5f64,
        0.0..1.5f64,
    )
        .prop_map(|(p0, sigma, depth, resilience, perm_impact, x0, zeta0)| MarketParams {
            p0,
            sigma,
            n_steps: 64,
            depth,
            resilience,
            perm_impact,
            x0,
            zeta0,
            xi0: 0.0,
            frictionless: false,
        })
}

fn shocks(n: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], n)
}

/// Straightforward forward simulation of cash, spread and position.
fn simulate(positions: &[f64], shocks: &[i8], p: &MarketParams) -> f64 {
    let dp = p.sigma / (p.n_steps as f64).sqrt();
    let (mut price, mut x, mut zeta, mut cash) = (p.p0, p.x0, p.zeta0, p.xi0);
    for (xn, s) in positions.iter().zip(shocks) {
        let dx = xn - x;
        let exec = price + p.perm_impact * x + 0.5 * p.perm_impact * dx;
        cash -= exec * dx + (1.0 - p.resilience) * zeta * dx.abs() + dx * dx / (2.0 * p.depth);
        zeta = (1.0 - p.resilience) * zeta + dx.abs() / p.depth;
        x = *xn;
        price += dp * f64::from(*s);
    }
    cash
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn wealth_forms_agree_with_forward_simulation(
        p in market(),
        path in shocks(64),
        xs in prop::collection::vec(-3.0..3.0f64, 64),
        n in 1usize..=64,
    ) {
        let prefix = PathPrefix::new(path[..n].to_vec()).unwrap();
        let a = terminal_wealth(&xs[..n], &prefix, &p).unwrap();
        let b = terminal_wealth_gains_form(&xs[..n], &prefix, &p).unwrap();
        let c = simulate(&xs[..n], &path[..n], &p);
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        prop_assert!((a - c).abs() < 1e-9, "{a} vs {c}");
    }

    #[test]
    fn liquidity_cost_forms_agree(p in market(), trades in prop::collection::vec(-2.0..2.0f64, 1..64)) {
        let n = trades.len();
        let (direct, spread) = liquidity_cost(&trades, &p, n).unwrap();
        prop_assert!(direct >= 0.0);
        prop_assert!((direct - spread).abs() <= 1e-10 * direct.abs().max(spread.abs()).max(1e-300));
    }

    #[test]
    fn spread_closed_form_matches_recursion(p in market(), trades in prop::collection::vec(-2.0..2.0f64, 1..64)) {
        for n in 0..=trades.len() {
            let mut z = p.zeta0;
            for dx in &trades[..n] {
                z = (1.0 - p.resilience) * z + dx.abs() / p.depth;
            }
            let closed = spread_closed_form(&trades, &p, n).unwrap();
            prop_assert!((closed - z).abs() <= 1e-10 * z.abs().max(1e-300), "{closed} vs {z}");
        }
    }

    #[test]
    fn random_walk_square_identity(p in market(), path in shocks(64), l in 0usize..64, len in 1usize..=64) {
        let n = (l + len).min(64);
        prop_assume!(l < n);
        let prices = PathPrefix::new(path).unwrap().prices(&p);
        let lhs: f64 = (l + 1..=n).map(|m| prices[m - 1] * (prices[m] - prices[m - 1])).sum();
        let rhs = 0.5 * (prices[n].powi(2) - prices[l].powi(2) - p.sigma.powi(2) * (n - l) as f64 / 64.0);
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}

#[test]
fn library_battery_passes_on_a_thousand_instances() {
    let checks = identity_suite(1000, 2024).unwrap();
    assert_eq!(checks.len(), 5);
    for c in &checks {
        assert_eq!(c.instances, 1000);
        assert!(c.passed(), "{c:?}");
    }
}
