//! Payoff functionals on step paths, the knock-out / quadratic claim pair
//! and an upper bound for the Skorohod distance.

use crate::error::{Error, Result};
use crate::market::{discretize_path, MarketParams, PathPrefix, SteppedPath, StoppingGrid};

/// Piecewise-linear payoff of the terminal price, extrapolated linearly
/// with the end slopes. A single point is a constant payoff.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalTable {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl TerminalTable {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidPayoff("terminal table needs at least one point".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidPayoff("duplicate abscissa in terminal table".into()));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite() || *y < 0.0) {
            return Err(Error::InvalidPayoff("table values must be finite and nonnegative".into()));
        }
        let table = Self {
            xs: points.iter().map(|p| p.0).collect(),
            ys: points.iter().map(|p| p.1).collect(),
        };
        let (left, right) = table.end_slopes();
        if left > 0.0 || right < 0.0 {
            return Err(Error::InvalidPayoff(
                "linear extrapolation would turn the payoff negative".into(),
            ));
        }
        Ok(table)
    }

    fn slope(&self, i: usize) -> f64 {
        (self.ys[i + 1] - self.ys[i]) / (self.xs[i + 1] - self.xs[i])
    }

    fn end_slopes(&self) -> (f64, f64) {
        let n = self.xs.len();
        if n == 1 {
            (0.0, 0.0)
        } else {
            (self.slope(0), self.slope(n - 2))
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n == 1 {
            return self.ys[0];
        }
        let seg = self.xs.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
        self.ys[seg] + self.slope(seg) * (x - self.xs[seg])
    }

    /// Largest absolute slope.
    pub fn lipschitz(&self) -> f64 {
        (0..self.xs.len().saturating_sub(1))
            .map(|i| self.slope(i).abs())
            .fold(0.0, f64::max)
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayoffKind {
    Call { strike: f64 },
    Put { strike: f64 },
    /// `sup_t p(t) - p(0)`, clipped at zero.
    LookbackMax,
    /// `(∫_0^1 p(t) dt - K)^+`.
    AsianMean { strike: f64 },
    CustomTerminal(TerminalTable),
}

/// A payoff functional together with its declared Lipschitz constant.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffSpec {
    pub kind: PayoffKind,
    pub lipschitz_l: f64,
}

impl PayoffSpec {
    pub fn call(strike: f64) -> Self {
        Self {
            kind: PayoffKind::Call { strike },
            lipschitz_l: 1.0,
        }
    }

    pub fn put(strike: f64) -> Self {
        Self {
            kind: PayoffKind::Put { strike },
            lipschitz_l: 1.0,
        }
    }

    pub fn lookback() -> Self {
        Self {
            kind: PayoffKind::LookbackMax,
            lipschitz_l: 1.0,
        }
    }

    pub fn asian(strike: f64) -> Self {
        Self {
            kind: PayoffKind::AsianMean { strike },
            lipschitz_l: 1.0,
        }
    }

    pub fn custom(table: TerminalTable) -> Self {
        let lipschitz_l = table.lipschitz();
        Self {
            kind: PayoffKind::CustomTerminal(table),
            lipschitz_l,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            PayoffKind::Call { .. } => "call",
            PayoffKind::Put { .. } => "put",
            PayoffKind::LookbackMax => "lookback_max",
            PayoffKind::AsianMean { .. } => "asian_mean",
            PayoffKind::CustomTerminal(_) => "custom_terminal",
        }
    }

    /// Whether the payoff depends on the terminal value only.
    pub fn is_terminal(&self) -> bool {
        matches!(
            self.kind,
            PayoffKind::Call { .. } | PayoffKind::Put { .. } | PayoffKind::CustomTerminal(_)
        )
    }

    /// Payoff as a function of the terminal price, for terminal payoffs.
    pub fn terminal_value(&self, x: f64) -> Option<f64> {
        match &self.kind {
            PayoffKind::Call { strike } => Some((x - strike).max(0.0)),
            PayoffKind::Put { strike } => Some((strike - x).max(0.0)),
            PayoffKind::CustomTerminal(t) => Some(t.eval(x)),
            PayoffKind::LookbackMax | PayoffKind::AsianMean { .. } => None,
        }
    }

    /// A constant `c(λ)` with `h(p) <= λ²(‖p - p0‖²_∞ + c)` for all paths
    /// started at `p0`. Uses `h(p) <= h(p0) + L ‖p - p0‖_∞` and the
    /// minimum of `λ²x² - Lx`.
    pub fn growth_c(&self, lambda: f64, p0: f64) -> f64 {
        let h0 = evaluate_payoff(self, &SteppedPath::constant(p0));
        let l = self.lipschitz_l;
        (h0 + l * l / (4.0 * lambda * lambda)) / (lambda * lambda)
    }
}

/// Evaluates the payoff on a step path defined on `[0, 1]`.
pub fn evaluate_payoff(spec: &PayoffSpec, path: &SteppedPath) -> f64 {
    match &spec.kind {
        PayoffKind::LookbackMax => (path.max() - path.initial()).max(0.0),
        PayoffKind::AsianMean { strike } => (path.integral() - strike).max(0.0),
        _ => spec
            .terminal_value(path.terminal())
            .expect("terminal payoff"),
    }
}

fn jump_times(p: &SteppedPath) -> Vec<f64> {
    let t = p.times();
    let v = p.values();
    (1..t.len())
        .filter(|&i| v[i] != v[i - 1] && t[i] > 0.0 && t[i] < 1.0)
        .map(|i| t[i])
        .collect()
}

/// `χ^{-1}` for the piecewise-linear time change through `(0,0)`, the
/// anchors `(s_i, u_i)` and `(1,1)`. Anchor images map back exactly.
fn inverse_time_change(anchors: &[(f64, f64)], u: f64) -> f64 {
    let mut prev = (0.0, 0.0);
    for &(s, a) in anchors.iter().chain(std::iter::once(&(1.0, 1.0))) {
        if u == a {
            return s;
        }
        if u < a {
            return prev.0 + (s - prev.0) * (u - prev.1) / (a - prev.1);
        }
        prev = (s, a);
    }
    1.0
}

fn time_change_cost(p: &SteppedPath, q: &SteppedPath, anchors: &[(f64, f64)]) -> f64 {
    let time_dev = anchors.iter().map(|(s, u)| (s - u).abs()).fold(0.0, f64::max);
    let times: Vec<f64> = q
        .times()
        .iter()
        .map(|&u| inverse_time_change(anchors, u))
        .collect();
    let warped = SteppedPath::new(times, q.values().to_vec()).expect("monotone time change");
    time_dev + p.sup_distance(&warped)
}

/// An upper bound for the Skorohod distance `d(p, q)`: the best of the
/// identity time change and piecewise-linear time changes aligning jump
/// times of `p` with jump times of `q`.
pub fn skorohod_distance_upper(p: &SteppedPath, q: &SteppedPath) -> f64 {
    let mut best = p.sup_distance(q);
    let jp = jump_times(p);
    let jq = jump_times(q);
    let mut candidates: Vec<Vec<(f64, f64)>> = Vec::new();
    if !jp.is_empty() && jp.len() == jq.len() {
        candidates.push(jp.iter().copied().zip(jq.iter().copied()).collect());
    }
    // Greedy monotone matching of every jump of p to the nearest unused jump of q.
    let mut greedy = Vec::new();
    let mut start = 0;
    for &s in &jp {
        let next = (start..jq.len()).min_by(|&a, &b| (jq[a] - s).abs().total_cmp(&(jq[b] - s).abs()));
        if let Some(j) = next {
            greedy.push((s, jq[j]));
            start = j + 1;
        }
    }
    if !greedy.is_empty() {
        candidates.push(greedy);
    }
    for anchors in candidates {
        let increasing = anchors.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1);
        if increasing {
            best = best.min(time_change_cost(p, q, &anchors));
        }
    }
    best
}

/// Knock-out claim `H^{N,ε,K}` and quadratic claim `Q^{N,ε}` on one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaimPair {
    pub knockout: f64,
    pub quadratic: f64,
    pub k_threshold: usize,
}

/// Threshold count `K(ε, λ) = [c(λ)/(ελ)²] + 1`.
pub fn knockout_threshold(spec: &PayoffSpec, epsilon: f64, lambda: f64, p0: f64) -> usize {
    let c = spec.growth_c(lambda, p0);
    (c / (epsilon * lambda).powi(2)).floor() as usize + 1
}

/// The quadratic claim `sup|P^{N,ε} - p0|² + Σ_k (ΔP_{τ_k}² + Δτ_k)`.
pub fn quadratic_claim(prefix: &PathPrefix, grid: &StoppingGrid, params: &MarketParams) -> f64 {
    let walks = prefix.walks();
    let n = params.n_steps as f64;
    let idx = grid.indices();
    let sup = idx
        .iter()
        .map(|&i| (params.price(walks[i]) - params.p0).abs())
        .fold(0.0, f64::max);
    let increments: f64 = idx
        .windows(2)
        .map(|w| {
            let dp = params.price(walks[w[1]]) - params.price(walks[w[0]]);
            dp * dp + (w[1] - w[0]) as f64 / n
        })
        .sum();
    sup * sup + increments
}

pub fn claims(
    spec: &PayoffSpec,
    prefix: &PathPrefix,
    grid: &StoppingGrid,
    params: &MarketParams,
    lambda: f64,
) -> Result<ClaimPair> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::OutOfRange(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    let k = knockout_threshold(spec, grid.epsilon(), lambda, params.p0);
    let knockout = if grid.capped_by(k) {
        evaluate_payoff(spec, &discretize_path(prefix, grid, params))
    } else {
        0.0
    };
    Ok(ClaimPair {
        knockout,
        quadratic: quadratic_claim(prefix, grid, params),
        k_threshold: k,
    })
}
