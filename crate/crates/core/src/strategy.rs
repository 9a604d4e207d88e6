//! Explicit hedging strategies on the binomial tree.
//!
//! A strategy is a predictable rule: the position `X_n` held over the n-th
//! shock may only depend on the first `n - 1` shocks. [`Strategy::position`]
//! receives exactly that prefix, so predictability holds by construction;
//! [`Strategy::positions`] is an O(N) forward pass that must agree with it.

use crate::error::{Error, Result};
use crate::market::{
    stopping_grid, terminal_wealth, walk_levels, MarketParams, PathPrefix, StopTracker,
};
use crate::mc::{random_shocks, sample_paths};
use crate::payoff::quadratic_claim;

pub trait Strategy: Sync {
    fn n_steps(&self) -> usize;

    /// Position `X_n` (`1 <= n <= N`) given the shocks `ξ_1, ..., ξ_{n-1}`.
    fn position(&self, n: usize, prefix: &[i8]) -> f64;

    /// Positions `X_1, ..., X_N` along a full path.
    fn positions(&self, shocks: &[i8]) -> Vec<f64> {
        (1..=self.n_steps())
            .map(|n| self.position(n, &shocks[..n - 1]))
            .collect()
    }
}

/// The strategy that never holds shares.
#[derive(Debug, Clone, Copy)]
pub struct Flat {
    pub n_steps: usize,
}

impl Strategy for Flat {
    fn n_steps(&self) -> usize {
        self.n_steps
    }

    fn position(&self, _n: usize, _prefix: &[i8]) -> f64 {
        0.0
    }
}

/// Super-hedge of the quadratic claim `λ Q^{N,ε}` built from running
/// extremes of the discretised price (pathwise Doob inequality), a
/// stop-anchored term and a live term; flat after the time cap.
#[derive(Debug, Clone)]
pub struct DoobHedge {
    params: MarketParams,
    epsilon: f64,
    pub lambda: f64,
    /// Initial capital `a = λ(1 + 36σ²)`.
    pub capital: f64,
    pub b: f64,
    pub d: f64,
    pub e: f64,
}

pub fn doob_quadratic_hedge(
    lambda: f64,
    epsilon: f64,
    params: &MarketParams,
    lambda_max: f64,
) -> Result<DoobHedge> {
    params.validate()?;
    if !(0.0..=lambda_max).contains(&lambda) {
        return Err(Error::OutOfRange(format!(
            "lambda {lambda} outside [0, {lambda_max}]"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::OutOfRange(format!("epsilon must be positive, got {epsilon}")));
    }
    if params.x0 != 0.0 || params.zeta0 != 0.0 {
        return Err(Error::OutOfRange(
            "the quadratic hedge starts from x0 = ζ0 = 0".into(),
        ));
    }
    Ok(DoobHedge {
        params: params.clone(),
        epsilon,
        lambda,
        capital: lambda * (1.0 + 36.0 * params.sigma * params.sigma),
        b: 8.0 * lambda,
        d: 4.0 * lambda,
        e: 36.0 * lambda,
    })
}

impl DoobHedge {
    fn positions_upto(&self, shocks: &[i8], upto: usize) -> Vec<f64> {
        let p = &self.params;
        let cap = p.cap_index();
        let walks = walk_levels(shocks);
        let mut tracker = StopTracker::new(p, self.epsilon);
        let (mut run_max, mut run_neg, mut anchor) = (0.0f64, 0.0f64, 0.0f64);
        let mut out = Vec::with_capacity(upto);
        for n in 1..=upto {
            let live = p.price(walks[n - 1]) - p.p0;
            if n >= 2 && tracker.observe(n - 1, walks[n - 1]) {
                run_max = run_max.max(live);
                run_neg = run_neg.max(-live);
                anchor = live;
            }
            out.push(if n > cap {
                0.0
            } else {
                -self.b * run_max + self.b * run_neg - self.d * anchor + self.e * live
            });
        }
        out
    }

    /// Terminal wealth from capital `a` minus `λ Q^{N,ε}` on one full path.
    pub fn surplus(&self, prefix: &PathPrefix) -> Result<f64> {
        let positions = self.positions(prefix.shocks());
        let funded = MarketParams {
            xi0: self.capital,
            ..self.params.clone()
        };
        let wealth = terminal_wealth(&positions, prefix, &funded)?;
        let grid = stopping_grid(prefix, self.epsilon, &self.params)?;
        Ok(wealth - self.lambda * quadratic_claim(prefix, &grid, &self.params))
    }
}

impl Strategy for DoobHedge {
    fn n_steps(&self) -> usize {
        self.params.n_steps
    }

    fn position(&self, n: usize, prefix: &[i8]) -> f64 {
        *self.positions_upto(&prefix[..n - 1], n).last().expect("n >= 1")
    }

    fn positions(&self, shocks: &[i8]) -> Vec<f64> {
        self.positions_upto(shocks, self.params.n_steps)
    }
}

/// Result of a pathwise check of the quadratic hedge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoobCheck {
    pub lambda: f64,
    pub violations: usize,
    pub paths: usize,
    pub min_surplus: f64,
}

/// Checks `ξ_N >= λ Q^{N,ε}` on `n_paths` sampled paths.
pub fn check_doob_hedge(hedge: &DoobHedge, n_paths: usize, seed: u64) -> Result<DoobCheck> {
    let n = hedge.params.n_steps;
    let surpluses = sample_paths(seed, n_paths, |rng| {
        let prefix = PathPrefix::new(random_shocks(rng, n)).expect("valid shocks");
        hedge.surplus(&prefix)
    });
    let mut violations = 0;
    let mut min_surplus = f64::INFINITY;
    for s in surpluses {
        let s = s?;
        min_surplus = min_surplus.min(s);
        if s < 0.0 {
            violations += 1;
        }
    }
    Ok(DoobCheck {
        lambda: hedge.lambda,
        violations,
        paths: n_paths,
        min_surplus,
    })
}

/// Largest candidate `λ` whose hedge shows no violation on `n_paths`
/// sampled paths; `None` if every candidate fails.
pub fn calibrate_lambda0(
    epsilon: f64,
    params: &MarketParams,
    candidates: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for lambda in sorted {
        let hedge = doob_quadratic_hedge(lambda, epsilon, params, f64::INFINITY)?;
        if check_doob_hedge(&hedge, n_paths, seed)?.violations == 0 {
            return Ok(Some(lambda));
        }
    }
    Ok(None)
}

/// Constrained affine strategy: over the k-th stop interval, ramp at
/// constant speed into `φ_k + ψ_k P_{τ_{k-1}}` during `⌈N^{1/3}⌉` steps, then
/// hold `φ_k + ψ_k P_{n-1}`; after the last coefficient pair or at the time
/// cap, liquidate over `⌈N^{1/3}⌉` steps and stay flat.
#[derive(Debug, Clone)]
pub struct AffineStrategy {
    params: MarketParams,
    epsilon: f64,
    phi: Vec<f64>,
    psi: Vec<f64>,
}

pub fn affine_constrained_strategy(
    phi: &[f64],
    psi: &[f64],
    epsilon: f64,
    params: &MarketParams,
) -> Result<AffineStrategy> {
    params.validate()?;
    if phi.len() != psi.len() {
        return Err(Error::LengthMismatch {
            what: "phi vs psi coefficients",
            expected: phi.len(),
            got: psi.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::OutOfRange(format!("epsilon must be positive, got {epsilon}")));
    }
    let bound = (params.n_steps as f64).ln();
    if let Some(bad) = phi.iter().chain(psi).find(|c| c.abs() > bound) {
        return Err(Error::OutOfRange(format!(
            "coefficient {bad} exceeds the bound log N = {bound}"
        )));
    }
    Ok(AffineStrategy {
        params: params.clone(),
        epsilon,
        phi: phi.to_vec(),
        psi: psi.to_vec(),
    })
}

impl AffineStrategy {
    fn positions_upto(&self, shocks: &[i8], upto: usize) -> Vec<f64> {
        let p = &self.params;
        let m = p.ramp_len() as f64;
        let walks = walk_levels(shocks);
        let mut tracker = StopTracker::new(p, self.epsilon);
        let mut k = 0usize;
        let mut start = 0usize;
        let mut ramp_from = p.x0;
        let mut liquidation: Option<(usize, f64)> = if tracker.capped() || self.phi.is_empty() {
            Some((0, p.x0))
        } else {
            None
        };
        let mut prev = p.x0;
        let mut out = Vec::with_capacity(upto);
        for n in 1..=upto {
            if liquidation.is_none() && n >= 2 && tracker.observe(n - 1, walks[n - 1]) {
                k += 1;
                start = n - 1;
                ramp_from = prev;
                if tracker.capped() || k >= self.phi.len() {
                    liquidation = Some((n - 1, prev));
                }
            }
            let x = match liquidation {
                Some((from, level)) => {
                    let j = (n - from) as f64;
                    if j >= m {
                        0.0
                    } else {
                        level * (1.0 - j / m)
                    }
                }
                None => {
                    let j = (n - start) as f64;
                    if j <= m {
                        let target = self.phi[k] + self.psi[k] * p.price(walks[start]);
                        ramp_from + (target - ramp_from) * j / m
                    } else {
                        self.phi[k] + self.psi[k] * p.price(walks[n - 1])
                    }
                }
            };
            out.push(x);
            prev = x;
        }
        out
    }
}

impl Strategy for AffineStrategy {
    fn n_steps(&self) -> usize {
        self.params.n_steps
    }

    fn position(&self, n: usize, prefix: &[i8]) -> f64 {
        *self.positions_upto(&prefix[..n - 1], n).last().expect("n >= 1")
    }

    fn positions(&self, shocks: &[i8]) -> Vec<f64> {
        self.positions_upto(shocks, self.params.n_steps)
    }
}

/// Sells the initial position at constant speed over `⌈N^{1/3}⌉` steps,
/// idles for as many steps while the spread recovers, then runs `inner` on
/// the remaining `N - 2⌈N^{1/3}⌉` steps of the time-shifted path.
#[derive(Debug, Clone)]
pub struct LiquidationPreamble<S> {
    inner: S,
    x0: f64,
    ramp: usize,
    n_steps: usize,
}

pub fn liquidation_preamble<S: Strategy>(
    inner: S,
    params: &MarketParams,
) -> Result<LiquidationPreamble<S>> {
    params.validate()?;
    let ramp = params.ramp_len();
    let n = params.n_steps;
    if 2 * ramp >= n {
        return Err(Error::OutOfRange(format!(
            "N = {n} too small for a liquidation preamble of 2 x {ramp} steps"
        )));
    }
    if inner.n_steps() != n - 2 * ramp {
        return Err(Error::LengthMismatch {
            what: "inner strategy horizon",
            expected: n - 2 * ramp,
            got: inner.n_steps(),
        });
    }
    Ok(LiquidationPreamble {
        inner,
        x0: params.x0,
        ramp,
        n_steps: n,
    })
}

impl<S> LiquidationPreamble<S> {
    /// Number of steps before `inner` takes over.
    pub fn offset(&self) -> usize {
        2 * self.ramp
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: Strategy> Strategy for LiquidationPreamble<S> {
    fn n_steps(&self) -> usize {
        self.n_steps
    }

    fn position(&self, n: usize, prefix: &[i8]) -> f64 {
        let m = self.ramp;
        if n <= m {
            self.x0 * (1.0 - n as f64 / m as f64)
        } else if n <= 2 * m {
            0.0
        } else {
            self.inner.position(n - 2 * m, &prefix[2 * m..n - 1])
        }
    }

    fn positions(&self, shocks: &[i8]) -> Vec<f64> {
        let m = self.ramp;
        let mut out: Vec<f64> = (1..=m)
            .map(|n| self.x0 * (1.0 - n as f64 / m as f64))
            .collect();
        out.extend(std::iter::repeat_n(0.0, m));
        out.extend(self.inner.positions(&shocks[2 * m..]));
        out
    }
}
