//! Randomized battery for the exact identities of the market dynamics.
//!
//! Each check draws independent market constants, paths and strategies from
//! a seeded stream and records the largest discrepancy it sees.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::market::{
    liquidity_cost, spread_closed_form, spread_step, terminal_wealth, terminal_wealth_gains_form,
    wealth_path, MarketParams, PathPrefix,
};
use crate::mc::{random_shocks, stream_rng};

/// Outcome of one identity over a batch of random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub instances: usize,
    /// Largest error observed, in the metric named by `relative`.
    pub max_error: f64,
    pub tolerance: f64,
    pub relative: bool,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// Absolute tolerance for sums accumulated over at most a few thousand steps.
pub const ABS_TOL: f64 = 1e-9;
/// Relative tolerance for purely algebraic rewrites.
pub const REL_TOL: f64 = 1e-10;

const MAX_STEPS: usize = 512;

fn random_params<R: Rng>(rng: &mut R) -> MarketParams {
    MarketParams {
        p0: rng.random_range(-5.0..5.0),
        sigma: rng.random_range(0.1..3.0),
        n_steps: rng.random_range(1..=MAX_STEPS),
        depth: rng.random_range(0.1..10.0),
        resilience: 1.0 - rng.random_range(0.0..1.0),
        perm_impact: if rng.random::<bool>() {
            rng.random_range(0.0..0.5)
        } else {
            0.0
        },
        x0: rng.random_range(-2.0..2.0),
        zeta0: rng.random_range(0.0..2.0),
        xi0: rng.random_range(-1.0..1.0),
        frictionless: false,
    }
}

fn random_positions<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut x: f64 = rng.random_range(-2.0..2.0);
    (0..n)
        .map(|_| {
            if rng.random_range(0.0..1.0) < 0.3 {
                x += rng.random_range(-1.0..1.0);
            }
            x
        })
        .collect()
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn run<F>(name: &'static str, n: usize, seed: u64, stream: u64, tol: f64, relative: bool, f: F) -> Result<IdentityCheck>
where
    F: Fn(&mut ChaCha8Rng) -> Result<f64>,
{
    let mut rng = stream_rng(seed, stream);
    let mut max_error: f64 = 0.0;
    for _ in 0..n {
        max_error = max_error.max(f(&mut rng)?);
    }
    Ok(IdentityCheck {
        name,
        instances: n,
        max_error,
        tolerance: tol,
        relative,
    })
}

/// Runs every identity on `n_instances` random instances.
pub fn identity_suite(n_instances: usize, seed: u64) -> Result<Vec<IdentityCheck>> {
    let wealth = run("wealth: summation vs iterated cash", n_instances, seed, 0, ABS_TOL, false, |rng| {
        let params = random_params(rng);
        let n = rng.random_range(1..=params.n_steps);
        let prefix = PathPrefix::new(random_shocks(rng, n))?;
        let xs = random_positions(rng, n);
        let summed = terminal_wealth(&xs, &prefix, &params)?;
        let iterated = wealth_path(&xs, &prefix, &params)?.last().map_or(params.xi0, |s| s.cash);
        Ok((summed - iterated).abs())
    })?;
    let gains = run("wealth: summation vs gains form", n_instances, seed, 1, ABS_TOL, false, |rng| {
        let params = random_params(rng);
        let n = rng.random_range(1..=params.n_steps);
        let prefix = PathPrefix::new(random_shocks(rng, n))?;
        let xs = random_positions(rng, n);
        let a = terminal_wealth(&xs, &prefix, &params)?;
        let b = terminal_wealth_gains_form(&xs, &prefix, &params)?;
        Ok((a - b).abs())
    })?;
    let kappa = run("liquidity cost: direct vs spread form", n_instances, seed, 2, REL_TOL, true, |rng| {
        let params = random_params(rng);
        let n = rng.random_range(1..=params.n_steps);
        let mut trades = random_positions(rng, n);
        trades.iter_mut().for_each(|t| *t -= 0.1);
        let (direct, spread) = liquidity_cost(&trades, &params, n)?;
        Ok(relative_gap(direct, spread))
    })?;
    let spread = run("spread: closed form vs recursion", n_instances, seed, 3, REL_TOL, true, |rng| {
        let params = random_params(rng);
        let n = rng.random_range(1..=params.n_steps);
        let trades = random_positions(rng, n);
        let iterated = trades
            .iter()
            .fold(params.zeta0, |z, dx| spread_step(z, *dx, &params));
        Ok(relative_gap(spread_closed_form(&trades, &params, n)?, iterated))
    })?;
    let square = run("random walk square identity", n_instances, seed, 4, ABS_TOL, false, |rng| {
        let params = random_params(rng);
        let n = rng.random_range(1..=params.n_steps);
        let l = rng.random_range(0..n);
        let prices = PathPrefix::new(random_shocks(rng, n))?.prices(&params);
        let lhs: f64 = (l + 1..=n)
            .map(|m| prices[m - 1] * (prices[m] - prices[m - 1]))
            .sum();
        let var = params.sigma * params.sigma * (n - l) as f64 / params.n_steps as f64;
        let rhs = 0.5 * (prices[n] * prices[n] - prices[l] * prices[l] - var);
        Ok((lhs - rhs).abs())
    })?;
    Ok(vec![wealth, gains, kappa, spread, square])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_battery_passes_and_is_seeded() {
        let a = identity_suite(50, 3).unwrap();
        assert!(a.iter().all(IdentityCheck::passed), "{a:?}");
        assert_eq!(a, identity_suite(50, 3).unwrap());
    }
}
