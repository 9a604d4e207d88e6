//! Exact discrete-time dynamics of the fundamental price, the half-spread,
//! the investor's cash position and the liquidity costs, together with the
//! space-time stopping grid used by the upper-bound constructions.
//!
//! Time runs over `{0, 1/N, ..., 1}`. Prices are always evaluated from the
//! integer random-walk level `S_n = ξ_1 + ... + ξ_n` as `p0 + (σ/√N) S_n` so
//! that every module sees bit-identical price levels.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// All model constants of the N-period market.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    /// Initial fundamental price `p0`.
    pub p0: f64,
    /// Volatility per unit time.
    pub sigma: f64,
    /// Number of trading periods `N`.
    pub n_steps: usize,
    /// Market depth `δ`.
    pub depth: f64,
    /// Resilience `r ∈ (0, 1]`.
    pub resilience: f64,
    /// Permanent impact `ι ≥ 0`.
    pub perm_impact: f64,
    /// Initial share position.
    pub x0: f64,
    /// Initial half-spread `ζ0 ≥ 0`.
    pub zeta0: f64,
    /// Initial cash.
    pub xi0: f64,
    /// When set, every trading-cost term is zero (the `δ = ∞` market).
    pub frictionless: bool,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            p0: 0.0,
            sigma: 1.0,
            n_steps: 8,
            depth: 1.0,
            resilience: 0.5,
            perm_impact: 0.0,
            x0: 0.0,
            zeta0: 0.0,
            xi0: 0.0,
            frictionless: false,
        }
    }
}

fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        name,
        reason: reason.into(),
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("p0", self.p0),
            ("sigma", self.sigma),
            ("depth", self.depth),
            ("resilience", self.resilience),
            ("perm_impact", self.perm_impact),
            ("x0", self.x0),
            ("zeta0", self.zeta0),
            ("xi0", self.xi0),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if self.sigma <= 0.0 {
            return Err(invalid("sigma", "must be positive"));
        }
        if self.n_steps == 0 {
            return Err(invalid("n_steps", "must be at least 1"));
        }
        if self.depth <= 0.0 {
            return Err(invalid("depth", "must be positive"));
        }
        if !(self.resilience > 0.0 && self.resilience <= 1.0) {
            return Err(invalid("resilience", "must lie in (0, 1]"));
        }
        if self.perm_impact < 0.0 {
            return Err(invalid("perm_impact", "must be nonnegative"));
        }
        if self.zeta0 < 0.0 {
            return Err(invalid("zeta0", "must be nonnegative"));
        }
        Ok(())
    }

    /// Price increment `σ/√N` of one shock.
    pub fn step_size(&self) -> f64 {
        self.sigma / (self.n_steps as f64).sqrt()
    }

    /// Fundamental price at random-walk level `walk`.
    pub fn price(&self, walk: i64) -> f64 {
        self.p0 + self.step_size() * walk as f64
    }

    /// Per-period spread decay factor `1 - r`.
    pub fn decay(&self) -> f64 {
        1.0 - self.resilience
    }

    /// `⌈N^{1/3}⌉`, the length of ramps and liquidation phases.
    pub fn ramp_len(&self) -> usize {
        ceil_cbrt(self.n_steps)
    }

    /// Step index of the time cap `1 - N^{-2/3}` on the grid (`[N(1 - N^{-2/3})]`).
    pub fn cap_index(&self) -> usize {
        self.n_steps - self.ramp_len().min(self.n_steps)
    }

    /// The time cap `1 - N^{-2/3}` itself.
    pub fn cap_time(&self) -> f64 {
        1.0 - (self.n_steps as f64).powf(-2.0 / 3.0)
    }

    /// The fully resilient market with depth `rδ/(2-r)` whose costs dominate
    /// the transient ones.
    pub fn temporary_equivalent(&self) -> MarketParams {
        let r = self.resilience;
        MarketParams {
            depth: r * self.depth / (2.0 - r),
            resilience: 1.0,
            ..self.clone()
        }
    }

    /// Same market with a different number of periods.
    pub fn with_steps(&self, n_steps: usize) -> MarketParams {
        MarketParams {
            n_steps,
            ..self.clone()
        }
    }
}

/// `⌈n^{1/3}⌉`, exact on perfect cubes.
pub fn ceil_cbrt(n: usize) -> usize {
    let c = (n as f64).cbrt();
    let r = c.round();
    if (c - r).abs() < 1e-9 {
        r as usize
    } else {
        c.ceil() as usize
    }
}

/// A finite sequence of ±1 shocks `ξ_1, ..., ξ_n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PathPrefix(Vec<i8>);

impl PathPrefix {
    pub fn new(shocks: Vec<i8>) -> Result<Self> {
        if let Some(&bad) = shocks.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::InvalidShock(bad));
        }
        Ok(Self(shocks))
    }

    /// Shocks from the bits of `bits`: bit `i` set means `ξ_{i+1} = +1`.
    pub fn from_bits(bits: u64, len: usize) -> Self {
        Self((0..len).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect())
    }

    pub fn shocks(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Random-walk levels `S_0 = 0, S_1, ..., S_n`.
    pub fn walks(&self) -> Vec<i64> {
        walk_levels(&self.0)
    }

    /// Fundamental prices `P_0, ..., P_n`.
    pub fn prices(&self, params: &MarketParams) -> Vec<f64> {
        self.walks().into_iter().map(|w| params.price(w)).collect()
    }
}

pub(crate) fn walk_levels(shocks: &[i8]) -> Vec<i64> {
    let mut out = Vec::with_capacity(shocks.len() + 1);
    let mut s = 0i64;
    out.push(0);
    for &x in shocks {
        s += x as i64;
        out.push(s);
    }
    out
}

/// Position, half-spread and cash after some period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortfolioState {
    pub position: f64,
    pub half_spread: f64,
    pub cash: f64,
}

impl PortfolioState {
    pub fn initial(params: &MarketParams) -> Self {
        Self {
            position: params.x0,
            half_spread: params.zeta0,
            cash: params.xi0,
        }
    }
}

/// Right-continuous step function on `[0, 1]`, constant after its last
/// breakpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SteppedPath {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl SteppedPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::LengthMismatch {
                what: "path times vs values",
                expected: times.len(),
                got: values.len(),
            });
        }
        if times.first() != Some(&0.0) {
            return Err(Error::OutOfRange("path must start at time 0".into()));
        }
        if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|&t| t > 1.0) {
            return Err(Error::OutOfRange(
                "path times must be nondecreasing in [0, 1]".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("path values must be finite".into()));
        }
        Ok(Self { times, values })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            times: vec![0.0],
            values: vec![value],
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn initial(&self) -> f64 {
        self.values[0]
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s <= t);
        self.values[idx.saturating_sub(1)]
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("nonempty path")
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `sup_t |p(t) - level|`.
    pub fn sup_deviation(&self, level: f64) -> f64 {
        self.values
            .iter()
            .map(|v| (v - level).abs())
            .fold(0.0, f64::max)
    }

    /// Exact `∫_0^1 p(t) dt`.
    pub fn integral(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.times.len() {
            let end = self.times.get(i + 1).copied().unwrap_or(1.0);
            total += self.values[i] * (end - self.times[i]);
        }
        total
    }

    /// Exact sup-norm distance between two step paths.
    pub fn sup_distance(&self, other: &SteppedPath) -> f64 {
        let mut d: f64 = 0.0;
        for &t in self.times.iter().chain(other.times.iter()) {
            d = d.max((self.value_at(t) - other.value_at(t)).abs());
        }
        d
    }

    /// Two-column CSV `time,value` for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,value\n");
        for (t, v) in self.times.iter().zip(&self.values) {
            let _ = writeln!(out, "{t},{v}");
        }
        out
    }
}

/// The scaled random walk `P^N` along a shock prefix.
pub fn fundamental_path(prefix: &PathPrefix, params: &MarketParams) -> Result<SteppedPath> {
    let n = params.n_steps;
    if prefix.len() > n {
        return Err(Error::LengthMismatch {
            what: "prefix longer than the horizon",
            expected: n,
            got: prefix.len(),
        });
    }
    let times = (0..=prefix.len()).map(|k| k as f64 / n as f64).collect();
    SteppedPath::new(times, prefix.prices(params))
}

/// One period of the half-spread recursion.
pub fn spread_step(zeta_prev: f64, trade: f64, params: &MarketParams) -> f64 {
    params.decay() * zeta_prev + trade.abs() / params.depth
}

/// Closed form of the half-spread after `n` trades.
pub fn spread_closed_form(trades: &[f64], params: &MarketParams, n: usize) -> Result<f64> {
    if n > trades.len() {
        return Err(Error::LengthMismatch {
            what: "step beyond trade sequence",
            expected: trades.len(),
            got: n,
        });
    }
    let q = params.decay();
    let carried = q.powi(n as i32) * params.zeta0;
    let impact: f64 = trades[..n]
        .iter()
        .enumerate()
        .map(|(i, dx)| q.powi((n - 1 - i) as i32) * dx.abs())
        .sum();
    Ok(carried + impact / params.depth)
}

/// One period of the cash dynamics: trade from the current position to
/// `x_new` at pre-trade fundamental price `p_prev`.
pub fn cash_step(
    state: PortfolioState,
    p_prev: f64,
    x_new: f64,
    params: &MarketParams,
) -> PortfolioState {
    let dx = x_new - state.position;
    let mid = p_prev + 0.5 * params.perm_impact * (x_new + state.position);
    let mut cash = state.cash - mid * dx;
    if !params.frictionless {
        cash -= (params.decay() * state.half_spread + dx.abs() / (2.0 * params.depth)) * dx.abs();
    }
    PortfolioState {
        position: x_new,
        half_spread: spread_step(state.half_spread, dx, params),
        cash,
    }
}

/// Liquidity costs after `n` trades in the two equivalent representations:
/// `(direct, spread)` where `direct` sums trade-by-trade costs and `spread`
/// is the quadratic form in the spread levels.
pub fn liquidity_cost(trades: &[f64], params: &MarketParams, n: usize) -> Result<(f64, f64)> {
    if n > trades.len() {
        return Err(Error::LengthMismatch {
            what: "step beyond trade sequence",
            expected: trades.len(),
            got: n,
        });
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let q = params.decay();
    let delta = params.depth;
    let mut zeta = params.zeta0;
    let mut direct = 0.0;
    let mut interior_sq = 0.0;
    for (m, dx) in trades[..n].iter().enumerate() {
        direct += q * zeta * dx.abs() + dx * dx / (2.0 * delta);
        zeta = spread_step(zeta, *dx, params);
        if m + 1 < n {
            interior_sq += zeta * zeta;
        }
    }
    let spread = 0.5
        * delta
        * (zeta * zeta + (1.0 - q * q) * interior_sq - q * q * params.zeta0 * params.zeta0);
    Ok((direct, spread))
}

fn check_positions(positions: &[f64], prefix: &PathPrefix, params: &MarketParams) -> Result<()> {
    if positions.len() != prefix.len() {
        return Err(Error::LengthMismatch {
            what: "positions vs path",
            expected: prefix.len(),
            got: positions.len(),
        });
    }
    if prefix.len() > params.n_steps {
        return Err(Error::LengthMismatch {
            what: "path longer than the horizon",
            expected: params.n_steps,
            got: prefix.len(),
        });
    }
    Ok(())
}

fn trades_of(positions: &[f64], x0: f64) -> Vec<f64> {
    let mut prev = x0;
    positions
        .iter()
        .map(|&x| {
            let d = x - prev;
            prev = x;
            d
        })
        .collect()
}

/// Cash after the last position in `positions` (`X_1, ..., X_n`) computed
/// from the summation identity
/// `ξ_n = ξ0 - Σ P_{m-1} ΔX_m - ι/2 (X_n² - x0²) - κ_n`.
pub fn terminal_wealth(positions: &[f64], prefix: &PathPrefix, params: &MarketParams) -> Result<f64> {
    check_positions(positions, prefix, params)?;
    let n = positions.len();
    let prices = prefix.prices(params);
    let trades = trades_of(positions, params.x0);
    let traded: f64 = trades.iter().zip(&prices).map(|(dx, p)| p * dx).sum();
    let x_n = positions.last().copied().unwrap_or(params.x0);
    let kappa = if params.frictionless {
        0.0
    } else {
        liquidity_cost(&trades, params, n)?.0
    };
    Ok(params.xi0 - traded - 0.5 * params.perm_impact * (x_n * x_n - params.x0 * params.x0) - kappa)
}

/// The gains-process form of the same identity:
/// `ξ_n = ξ0 + x0 P_0 - X_n P_n + Σ X_m ΔP_m - ι/2 (X_n² - x0²) - κ_n`.
pub fn terminal_wealth_gains_form(
    positions: &[f64],
    prefix: &PathPrefix,
    params: &MarketParams,
) -> Result<f64> {
    check_positions(positions, prefix, params)?;
    let n = positions.len();
    let prices = prefix.prices(params);
    let gains: f64 = positions
        .iter()
        .enumerate()
        .map(|(m, x)| x * (prices[m + 1] - prices[m]))
        .sum();
    let x_n = positions.last().copied().unwrap_or(params.x0);
    let kappa = if params.frictionless {
        0.0
    } else {
        liquidity_cost(&trades_of(positions, params.x0), params, n)?.0
    };
    Ok(params.xi0 + params.x0 * prices[0] - x_n * prices[n] + gains
        - 0.5 * params.perm_impact * (x_n * x_n - params.x0 * params.x0)
        - kappa)
}

/// Iterates [`cash_step`] along the path, returning the state after every
/// period (the initial state first).
pub fn wealth_path(
    positions: &[f64],
    prefix: &PathPrefix,
    params: &MarketParams,
) -> Result<Vec<PortfolioState>> {
    check_positions(positions, prefix, params)?;
    let prices = prefix.prices(params);
    let mut state = PortfolioState::initial(params);
    let mut out = Vec::with_capacity(positions.len() + 1);
    out.push(state);
    for (m, &x) in positions.iter().enumerate() {
        state = cash_step(state, prices[m], x, params);
        out.push(state);
    }
    Ok(out)
}

/// Space-time stopping times `τ_0 = 0 < τ_1 < ...` stored as step indices;
/// the last entry is always the cap index.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingGrid {
    indices: Vec<usize>,
    epsilon: f64,
    cap_index: usize,
    cap_time: f64,
    n_steps: usize,
}

impl StoppingGrid {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn cap_index(&self) -> usize {
        self.cap_index
    }

    pub fn cap_time(&self) -> f64 {
        self.cap_time
    }

    /// Step index of `τ_k`; indices past the last stop return the cap.
    pub fn stop(&self, k: usize) -> usize {
        self.indices[k.min(self.indices.len() - 1)]
    }

    pub fn time(&self, k: usize) -> f64 {
        self.stop(k) as f64 / self.n_steps as f64
    }

    /// Number of stops after `τ_0` (the last one being the cap).
    pub fn num_intervals(&self) -> usize {
        self.indices.len() - 1
    }

    /// Whether `τ_k` equals the cap.
    pub fn capped_by(&self, k: usize) -> bool {
        self.stop(k) == self.cap_index
    }
}

/// Online detector of the stopping times; fed with `(n, S_n)` for
/// `n = 1, 2, ...` in order.
#[derive(Debug, Clone)]
pub(crate) struct StopTracker {
    step: f64,
    epsilon: f64,
    eps_sq: f64,
    n_steps: f64,
    cap: usize,
    last_stop: usize,
    last_walk: i64,
    done: bool,
}

impl StopTracker {
    pub(crate) fn new(params: &MarketParams, epsilon: f64) -> Self {
        let cap = params.cap_index();
        Self {
            step: params.step_size(),
            epsilon,
            eps_sq: epsilon * epsilon,
            n_steps: params.n_steps as f64,
            cap,
            last_stop: 0,
            last_walk: 0,
            done: cap == 0,
        }
    }

    /// Returns `true` when step `n` is a new stop.
    pub(crate) fn observe(&mut self, n: usize, walk: i64) -> bool {
        if self.done || n <= self.last_stop {
            return false;
        }
        let hit = n == self.cap
            || self.step * (walk - self.last_walk).abs() as f64 >= self.epsilon
            || (n - self.last_stop) as f64 / self.n_steps >= self.eps_sq;
        if hit {
            self.last_stop = n;
            self.last_walk = walk;
            self.done = n == self.cap;
        }
        hit
    }

    pub(crate) fn capped(&self) -> bool {
        self.done
    }
}

/// Stopping grid of the path given by `prefix` (which must reach the cap).
pub fn stopping_grid(prefix: &PathPrefix, epsilon: f64, params: &MarketParams) -> Result<StoppingGrid> {
    if !(epsilon > 0.0) {
        return Err(Error::OutOfRange(format!("epsilon must be positive, got {epsilon}")));
    }
    let cap = params.cap_index();
    if prefix.len() < cap {
        return Err(Error::LengthMismatch {
            what: "path shorter than the time cap",
            expected: cap,
            got: prefix.len(),
        });
    }
    let walks = prefix.walks();
    let mut tracker = StopTracker::new(params, epsilon);
    let mut indices = vec![0];
    for (n, &w) in walks.iter().enumerate().take(cap + 1).skip(1) {
        if tracker.observe(n, w) {
            indices.push(n);
        }
    }
    Ok(StoppingGrid {
        indices,
        epsilon,
        cap_index: cap,
        cap_time: params.cap_time(),
        n_steps: params.n_steps,
    })
}

/// The discretised path `P^{N,ε}`: piecewise constant at the price of the
/// last stop, frozen at the cap price on the final segment.
pub fn discretize_path(prefix: &PathPrefix, grid: &StoppingGrid, params: &MarketParams) -> SteppedPath {
    let walks = prefix.walks();
    let times = grid
        .indices
        .iter()
        .map(|&i| i as f64 / params.n_steps as f64)
        .collect();
    let values = grid.indices.iter().map(|&i| params.price(walks[i])).collect();
    SteppedPath { times, values }
}
