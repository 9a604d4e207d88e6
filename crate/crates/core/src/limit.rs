//! The high-resilience scaling limit: the volatility-control problem
//! `sup_ν E[h(P^ν) - c ∫ (ν_t² - σ²)² dt] - p0 x0 - ι/2 x0²` with
//! `c = rδ/(8σ²(2-r))`, solved by explicit finite differences for terminal
//! payoffs and estimated from below by Monte Carlo over feedback policies.

use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::market::{MarketParams, SteppedPath};
use crate::mc::{sample_paths, Estimate};
use crate::payoff::{evaluate_payoff, PayoffSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind {
    Call,
    Put,
}

/// Arithmetic Brownian motion (Bachelier) price of a vanilla option.
pub fn bachelier_reference(kind: OptionKind, p0: f64, strike: f64, sigma: f64, t: f64) -> Result<f64> {
    if !(sigma > 0.0 && t > 0.0) {
        return Err(Error::OutOfRange(format!(
            "Bachelier needs sigma > 0 and t > 0, got {sigma}, {t}"
        )));
    }
    let s = sigma * t.sqrt();
    let d = (p0 - strike) / s;
    let n = Normal::standard();
    let call = (p0 - strike) * n.cdf(d) + s * n.pdf(d);
    Ok(match kind {
        OptionKind::Call => call,
        OptionKind::Put => call - (p0 - strike),
    })
}

/// The control problem of the scaling limit.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitProblem {
    pub payoff: PayoffSpec,
    /// Multiplier of the payoff (1 for the limit itself).
    pub payoff_scale: f64,
    /// Penalty weight `c`.
    pub penalty_c: f64,
    /// Reference variance `σ²`.
    pub sigma_sq: f64,
    /// Cap on the controlled variance `ν²`.
    pub nu_sq_max: f64,
    pub p0: f64,
    pub horizon: f64,
    pub x0: f64,
    pub perm_impact: f64,
}

impl LimitProblem {
    /// The limit problem of a market: `c = rδ/(8σ²(2-r))`, `ν² <= 16σ²`.
    pub fn from_market(params: &MarketParams, payoff: &PayoffSpec) -> Result<Self> {
        params.validate()?;
        let r = params.resilience;
        let s2 = params.sigma * params.sigma;
        let problem = Self {
            payoff: payoff.clone(),
            payoff_scale: 1.0,
            penalty_c: r * params.depth / (8.0 * s2 * (2.0 - r)),
            sigma_sq: s2,
            nu_sq_max: 16.0 * s2,
            p0: params.p0,
            horizon: 1.0,
            x0: params.x0,
            perm_impact: params.perm_impact,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(Error::InvalidParam { name, reason });
        if !(self.penalty_c > 0.0) {
            return bad("penalty_c", format!("must be positive, got {}", self.penalty_c));
        }
        if !(self.sigma_sq > 0.0) {
            return bad("sigma_sq", format!("must be positive, got {}", self.sigma_sq));
        }
        if !(self.nu_sq_max >= self.sigma_sq) {
            return bad("nu_sq_max", format!("must be at least σ² = {}", self.sigma_sq));
        }
        if !(self.horizon > 0.0) {
            return bad("horizon", format!("must be positive, got {}", self.horizon));
        }
        if !(self.payoff_scale >= 0.0) {
            return bad("payoff_scale", format!("must be nonnegative, got {}", self.payoff_scale));
        }
        Ok(())
    }

    /// `p0 x0 + ι/2 x0²`.
    pub fn endowment(&self) -> f64 {
        self.p0 * self.x0 + 0.5 * self.perm_impact * self.x0 * self.x0
    }

    fn terminal(&self, p: f64) -> Result<f64> {
        self.payoff
            .terminal_value(p)
            .map(|v| self.payoff_scale * v)
            .ok_or_else(|| {
                Error::UnsupportedPayoff(format!(
                    "the HJB solver handles terminal payoffs only, got {}",
                    self.payoff.name()
                ))
            })
    }

    /// Optimal variance for curvature `v_pp`.
    pub fn optimal_variance(&self, v_pp: f64) -> f64 {
        (self.sigma_sq + v_pp / (4.0 * self.penalty_c)).clamp(0.0, self.nu_sq_max)
    }
}

/// Space-time grid of the explicit scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbGrid {
    pub p_min: f64,
    pub p_max: f64,
    pub n_space: usize,
    /// `None` picks the smallest step count meeting the CFL bound.
    pub n_time: Option<usize>,
    /// Cap-binding fraction above which the result is flagged.
    pub cap_tolerance: f64,
}

/// Largest admissible `ν²_max Δt / Δp²`.
pub const CFL_LIMIT: f64 = 0.5;

impl HjbGrid {
    /// `p0 ± 8σ√T` with `n_space` nodes.
    pub fn around(problem: &LimitProblem, n_space: usize) -> Self {
        let half = 8.0 * (problem.sigma_sq * problem.horizon).sqrt();
        Self {
            p_min: problem.p0 - half,
            p_max: problem.p0 + half,
            n_space,
            n_time: None,
            cap_tolerance: 0.05,
        }
    }
}

/// Optimal variance on a space grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSlice {
    pub time: f64,
    pub variance: Vec<f64>,
}

/// Snapshots of the optimal variance, used as a feedback policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    pub p_min: f64,
    pub dp: f64,
    /// Increasing in time.
    pub slices: Vec<ControlSlice>,
}

impl ControlField {
    /// Optimal variance at `(t, p)`: latest snapshot not after `t`, linear in `p`.
    pub fn variance(&self, t: f64, p: f64) -> f64 {
        let k = self.slices.partition_point(|s| s.time <= t).max(1) - 1;
        let v = &self.slices[k].variance;
        let u = ((p - self.p_min) / self.dp).clamp(0.0, (v.len() - 1) as f64);
        let i = (u.floor() as usize).min(v.len() - 2);
        let s = u - i as f64;
        v[i] * (1.0 - s) + v[i + 1] * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HjbResult {
    /// `V(0, p0)`.
    pub value: f64,
    /// `V(0, p0) - p0 x0 - ι/2 x0²`.
    pub net_value: f64,
    /// Fraction of space-time nodes where the variance cap binds.
    pub cap_fraction: f64,
    pub flagged: bool,
    pub n_space: usize,
    pub n_time: usize,
    pub dt: f64,
    pub dp: f64,
    pub control: Option<ControlField>,
}

fn interpolate(xs_min: f64, dx: f64, values: &[f64], x: f64) -> f64 {
    let u = ((x - xs_min) / dx).clamp(0.0, (values.len() - 1) as f64);
    let i = (u.floor() as usize).min(values.len() - 2);
    let s = u - i as f64;
    values[i] * (1.0 - s) + values[i + 1] * s
}

/// Backward explicit scheme for `V_t + sup_{a ∈ [0, a_max]} [½ a V_pp - c (a - σ²)²] = 0`
/// with zero curvature at both ends; optionally records `snapshots`
/// equally spaced slices of the optimal variance.
pub fn hjb_solve(problem: &LimitProblem, grid: &HjbGrid, snapshots: usize) -> Result<HjbResult> {
    problem.validate()?;
    if grid.n_space < 5 || !(grid.p_max > grid.p_min) {
        return Err(Error::InvalidParam {
            name: "hjb grid",
            reason: format!(
                "need at least 5 nodes on a nonempty interval, got {} on [{}, {}]",
                grid.n_space, grid.p_min, grid.p_max
            ),
        });
    }
    let m = grid.n_space;
    let dp = (grid.p_max - grid.p_min) / (m - 1) as f64;
    let t = problem.horizon;
    let min_steps = (t * problem.nu_sq_max / (CFL_LIMIT * dp * dp)).ceil() as usize;
    let n_time = grid.n_time.unwrap_or(min_steps.max(1));
    let dt = t / n_time as f64;
    let ratio = problem.nu_sq_max * dt / (dp * dp);
    if ratio > CFL_LIMIT * (1.0 + 1e-12) {
        return Err(Error::Stability(format!(
            "ν²_max Δt/Δp² = {ratio:.4} exceeds {CFL_LIMIT}; use at least {min_steps} time steps"
        )));
    }
    let ps: Vec<f64> = (0..m).map(|i| grid.p_min + dp * i as f64).collect();
    let mut v = ps.iter().map(|&p| problem.terminal(p)).collect::<Result<Vec<_>>>()?;
    let mut next = vec![0.0; m];
    let mut capped = 0usize;
    let c = problem.penalty_c;
    let every = if snapshots > 0 { (n_time / snapshots).max(1) } else { usize::MAX };
    let mut slices = Vec::new();
    for k in (0..n_time).rev() {
        let record = snapshots > 0 && k % every == 0;
        let mut slice = if record { vec![0.0; m] } else { Vec::new() };
        for i in 1..m - 1 {
            let vpp = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (dp * dp);
            let a = problem.optimal_variance(vpp);
            if a >= problem.nu_sq_max {
                capped += 1;
            }
            if record {
                slice[i] = a;
            }
            let d = a - problem.sigma_sq;
            next[i] = v[i] + dt * (0.5 * a * vpp - c * d * d);
        }
        next[0] = 2.0 * next[1] - next[2];
        next[m - 1] = 2.0 * next[m - 2] - next[m - 3];
        std::mem::swap(&mut v, &mut next);
        if record {
            slice[0] = slice[1];
            slice[m - 1] = slice[m - 2];
            slices.push(ControlSlice {
                time: k as f64 * dt,
                variance: slice,
            });
        }
    }
    slices.reverse();
    let value = interpolate(grid.p_min, dp, &v, problem.p0);
    let cap_fraction = capped as f64 / (n_time * (m - 2)) as f64;
    Ok(HjbResult {
        value,
        net_value: value - problem.endowment(),
        cap_fraction,
        flagged: cap_fraction > grid.cap_tolerance,
        n_space: m,
        n_time,
        dt,
        dp,
        control: (snapshots > 0).then(|| ControlField {
            p_min: grid.p_min,
            dp,
            slices,
        }),
    })
}

/// `V(0, p0)` of the limit problem.
pub fn hjb_value(problem: &LimitProblem, grid: &HjbGrid) -> Result<HjbResult> {
    hjb_solve(problem, grid, 0)
}

/// `F(z) = sup_M E[z1 h(M_1) - z2 ∫ (d⟨M⟩/dt - z3)² dt]` with `M_0 = p0`.
pub fn f_of_z(
    z: (f64, f64, f64),
    payoff: &PayoffSpec,
    p0: f64,
    n_space: usize,
) -> Result<HjbResult> {
    let (z1, z2, z3) = z;
    if !(z1 >= 0.0 && z2 > 0.0 && z3 > 0.0) {
        return Err(Error::OutOfRange(format!(
            "F(z) needs z1 >= 0 and z2, z3 > 0, got ({z1}, {z2}, {z3})"
        )));
    }
    let problem = LimitProblem {
        payoff: payoff.clone(),
        payoff_scale: z1,
        penalty_c: z2,
        sigma_sq: z3,
        nu_sq_max: 16.0 * z3,
        p0,
        horizon: 1.0,
        x0: 0.0,
        perm_impact: 0.0,
    };
    hjb_value(&problem, &HjbGrid::around(&problem, n_space))
}

/// Parameterised feedback policies for the variance `ν²(t, p; θ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyFamily {
    /// `ν ≡ θ`.
    ConstantVol(Vec<f64>),
    /// `ν²(t, p) = σ² + θ (a*(t, p) - σ²)` around an HJB optimal control field.
    HjbFeedback { field: ControlField, thetas: Vec<f64> },
}

impl PolicyFamily {
    fn thetas(&self) -> &[f64] {
        match self {
            Self::ConstantVol(t) => t,
            Self::HjbFeedback { thetas, .. } => thetas,
        }
    }

    fn variance(&self, theta: f64, t: f64, p: f64, problem: &LimitProblem) -> f64 {
        let a = match self {
            Self::ConstantVol(_) => theta * theta,
            Self::HjbFeedback { field, .. } => {
                problem.sigma_sq + theta * (field.variance(t, p) - problem.sigma_sq)
            }
        };
        a.clamp(0.0, problem.nu_sq_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Re-run the best θ with half the time step and report the change.
    pub step_halving: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 20_000,
            n_steps: 100,
            seed: 0,
            step_halving: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub best_theta: f64,
    /// Best estimate net of `p0 x0 + ι/2 x0²`.
    pub value: f64,
    pub std_error: f64,
    pub per_theta: Vec<(f64, Estimate)>,
    /// Best-θ estimate at half the time step minus the estimate itself.
    pub halving_change: Option<f64>,
}

fn policy_estimate(
    problem: &LimitProblem,
    family: &PolicyFamily,
    theta: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Estimate> {
    let dt = problem.horizon / n_steps as f64;
    let terminal_only = problem.payoff.is_terminal();
    let samples = sample_paths(seed, n_paths, |rng| -> Result<f64> {
        let mut p = problem.p0;
        let mut penalty = 0.0;
        let mut path = if terminal_only { Vec::new() } else { vec![p] };
        for k in 0..n_steps {
            let a = family.variance(theta, k as f64 * dt, p, problem);
            let d = a - problem.sigma_sq;
            penalty += problem.penalty_c * d * d * dt;
            let z: f64 = StandardNormal.sample(rng);
            p += (a * dt).sqrt() * z;
            if !terminal_only {
                path.push(p);
            }
        }
        let h = if terminal_only {
            problem.terminal(p)?
        } else {
            let times = (0..=n_steps).map(|k| k as f64 / n_steps as f64).collect();
            problem.payoff_scale * evaluate_payoff(&problem.payoff, &SteppedPath::new(times, path)?)
        };
        Ok(h - penalty)
    });
    let values = samples.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&values))
}

/// Best policy value over the family (common random numbers across θ);
/// a noisy lower estimate of the limit value.
pub fn limit_value_mc(problem: &LimitProblem, family: &PolicyFamily, config: &McConfig) -> Result<McResult> {
    problem.validate()?;
    if family.thetas().is_empty() || config.n_paths < 2 || config.n_steps == 0 {
        return Err(Error::InvalidParam {
            name: "mc",
            reason: "need a nonempty θ set, at least 2 paths and 1 step".into(),
        });
    }
    let mut per_theta = Vec::new();
    for &theta in family.thetas() {
        let e = policy_estimate(problem, family, theta, config.n_paths, config.n_steps, config.seed)?;
        per_theta.push((theta, e));
    }
    let (best_theta, best) = per_theta
        .iter()
        .copied()
        .fold((f64::NAN, None::<Estimate>), |acc, (t, e)| match acc.1 {
            Some(b) if b.mean >= e.mean => acc,
            _ => (t, Some(e)),
        });
    let best = best.expect("nonempty");
    let halving_change = if config.step_halving {
        let fine = policy_estimate(problem, family, best_theta, config.n_paths, 2 * config.n_steps, config.seed)?;
        Some(fine.mean - best.mean)
    } else {
        None
    };
    Ok(McResult {
        best_theta,
        value: best.mean - problem.endowment(),
        std_error: best.std_error,
        per_theta,
        halving_change,
    })
}
