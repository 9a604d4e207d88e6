//! Dual objectives and the Kusuoka consistent-price-system construction.
//!
//! Tree objects use heap indexing: the node reached after the shocks
//! encoded in the low `d` bits of `bits` (bit `i` set when shock `i + 1` is
//! up) lives at [`tree_index`]`(d, bits)`. Predictable quantities
//! `q_n, α_n` are stored at their decision node of depth `n - 1`, martingale
//! values `M_n` at depth `n`.

use std::fmt::Write as _;

use rand::Rng;

use crate::dp::tree_index;
use crate::error::{Error, Result};
use crate::market::{fundamental_path, MarketParams, PathPrefix};
use crate::mc::{pairwise_sum, sample_paths, Estimate};
use crate::payoff::{evaluate_payoff, PayoffSpec};

/// Largest horizon for which certificates are materialised on the full tree.
pub const TREE_MAX_STEPS: usize = 20;

/// The weights `μ_1, ..., μ_N` of the transient duality.
#[derive(Debug, Clone, PartialEq)]
pub struct MuWeights {
    /// `mu[n - 1] = μ_n`.
    pub mu: Vec<f64>,
}

pub fn mu_weights(params: &MarketParams) -> Result<MuWeights> {
    params.validate()?;
    if params.resilience >= 1.0 {
        return Err(Error::OutOfRange(
            "μ weights need r < 1; use the temporary-impact dual for r = 1".into(),
        ));
    }
    let q2 = params.decay() * params.decay();
    let n = params.n_steps;
    let mu = (1..=n)
        .map(|m| {
            if m < n {
                params.depth * (1.0 - q2) * q2.powi(m as i32)
            } else {
                params.depth * q2.powi(n as i32)
            }
        })
        .collect();
    Ok(MuWeights { mu })
}

/// A volatility profile `ν(t, path)` evaluated on the step path
/// `P_0, ..., P_k` observed up to time `t = k/N`.
pub trait VolProfile: Sync {
    fn nu(&self, t: f64, path: &[f64]) -> f64;

    /// Declared bounds `(ν_min, ν_max)` with `ν_min > 0`.
    fn bounds(&self) -> (f64, f64);

    /// Declared Lipschitz constant in `(t, ‖path‖_∞)`.
    fn lipschitz(&self) -> f64;

    fn label(&self) -> String;

    /// The constant `C` with `1/C <= ν <= C`.
    fn c_bound(&self) -> f64 {
        let (lo, hi) = self.bounds();
        hi.max(1.0 / lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantVol {
    pub nu: f64,
}

impl VolProfile for ConstantVol {
    fn nu(&self, _t: f64, _path: &[f64]) -> f64 {
        self.nu
    }

    fn bounds(&self) -> (f64, f64) {
        (self.nu, self.nu)
    }

    fn lipschitz(&self) -> f64 {
        0.0
    }

    fn label(&self) -> String {
        format!("constant({})", self.nu)
    }
}

/// Volatility moving linearly in time from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeRampVol {
    pub start: f64,
    pub end: f64,
}

impl VolProfile for TimeRampVol {
    fn nu(&self, t: f64, _path: &[f64]) -> f64 {
        self.start + (self.end - self.start) * t
    }

    fn bounds(&self) -> (f64, f64) {
        (self.start.min(self.end), self.start.max(self.end))
    }

    fn lipschitz(&self) -> f64 {
        (self.end - self.start).abs()
    }

    fn label(&self) -> String {
        format!("ramp({},{})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KusuokaOptions {
    /// Probabilities are clipped to `[q_min, 1 - q_min]`.
    pub q_min: f64,
    /// Smallest admissible `σ + α_n`, relative to `σ`.
    pub margin: f64,
    /// Overrides the profile's constant `C`.
    pub c_bound: Option<f64>,
    /// Horizons up to this size are evaluated exactly on the tree.
    pub exact_max_steps: usize,
    pub mc_paths: usize,
    pub seed: u64,
}

impl Default for KusuokaOptions {
    fn default() -> Self {
        Self {
            q_min: 1e-6,
            margin: 1e-3,
            c_bound: None,
            exact_max_steps: 12,
            mc_paths: 100_000,
            seed: 0,
        }
    }
}

/// A triple `(Q, M, α)` on the full tree.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub n_steps: usize,
    /// `cond_prob[tree_index(n-1, bits)] = Q[ξ_n = +1 | prefix]`.
    pub cond_prob: Vec<f64>,
    /// `alpha[tree_index(n-1, bits)] = α_n`.
    pub alpha: Vec<f64>,
    /// Anchor `α_0` of the increment clipping.
    pub alpha0: f64,
    /// `martingale[tree_index(n, bits)] = M_n`.
    pub martingale: Vec<f64>,
    pub m0: f64,
    pub c_bound: f64,
    /// Nodes where `α` was clipped to the level or increment bound.
    pub alpha_clips: usize,
    /// Nodes where `q` was clipped; such certificates are approximate.
    pub q_clips: usize,
}

impl DualCertificate {
    /// Certified certificates have exact martingales (no probability clipping).
    pub fn is_certified(&self) -> bool {
        self.q_clips == 0
    }

    /// `max |E_Q[M_n - M_{n-1} | node]|` over all decision nodes.
    pub fn martingale_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for d in 0..self.n_steps {
            for bits in 0..1u64 << d {
                let q = self.cond_prob[tree_index(d, bits)];
                let here = self.martingale[tree_index(d, bits)];
                let up = self.martingale[tree_index(d + 1, bits | (1 << d))];
                let down = self.martingale[tree_index(d + 1, bits)];
                worst = worst.max((q * up + (1.0 - q) * down - here).abs());
            }
        }
        worst
    }

    /// Probability of every full path, indexed by its bits.
    pub fn path_probabilities(&self) -> Vec<f64> {
        let n = self.n_steps;
        let mut probs = vec![1.0];
        for d in 0..n {
            let mut next = vec![0.0; 1 << (d + 1)];
            for (bits, &p) in probs.iter().enumerate() {
                let q = self.cond_prob[tree_index(d, bits as u64)];
                next[bits] = p * (1.0 - q);
                next[bits | (1 << d)] = p * q;
            }
            probs = next;
        }
        probs
    }

    /// `E_Q[f(path)]` over full paths.
    pub fn expectation(&self, f: impl Fn(u64) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .path_probabilities()
            .iter()
            .enumerate()
            .map(|(bits, p)| if *p == 0.0 { 0.0 } else { p * f(bits as u64) })
            .collect();
        pairwise_sum(&terms)
    }

    /// One row per decision node: depth, prefix as a `+`/`-` string, `q`, `α`
    /// and the martingale value at the node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth,prefix,q,alpha,m\n");
        for d in 0..self.n_steps {
            for bits in 0..1u64 << d {
                let prefix: String = (0..d)
                    .map(|i| if bits >> i & 1 == 1 { '+' } else { '-' })
                    .collect();
                let k = tree_index(d, bits);
                let _ = writeln!(
                    out,
                    "{d},{prefix},{},{},{}",
                    self.cond_prob[k], self.alpha[k], self.martingale[k]
                );
            }
        }
        out
    }
}

fn check_tree(n: usize) -> Result<()> {
    if n > TREE_MAX_STEPS {
        return Err(Error::TooLarge(format!(
            "tree certificates need N <= {TREE_MAX_STEPS}, got {n}"
        )));
    }
    Ok(())
}

fn check_sizes(n: usize, cond_prob: &[f64], martingale: &[f64]) -> Result<()> {
    if cond_prob.len() != (1 << n) - 1 {
        return Err(Error::LengthMismatch {
            what: "conditional probabilities",
            expected: (1 << n) - 1,
            got: cond_prob.len(),
        });
    }
    if martingale.len() != (1 << (n + 1)) - 1 {
        return Err(Error::LengthMismatch {
            what: "martingale values",
            expected: (1 << (n + 1)) - 1,
            got: martingale.len(),
        });
    }
    if let Some(q) = cond_prob.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::OutOfRange(format!("conditional probability {q} outside [0, 1]")));
    }
    Ok(())
}

fn payoff_of_bits(spec: &PayoffSpec, params: &MarketParams, bits: u64) -> f64 {
    let prefix = PathPrefix::from_bits(bits, params.n_steps);
    evaluate_payoff(spec, &fundamental_path(&prefix, params).expect("prefix fits the horizon"))
}

/// Feasibility of a transient dual triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Largest `|P_{n-1} - M_{n-1}| - bound_n` over the nodes (`<= 0` when feasible).
    pub max_violation: f64,
    pub violating_nodes: usize,
    pub martingale_defect: f64,
}

/// Transient dual objective
/// `E_Q[H] - ½ E_Q[Σ |α_n - ζ0|² μ_n] - M_0 x0 - ι/2 x0²`
/// together with the check of
/// `|P_{n-1} - M_{n-1}| <= E_Q[Σ_{m>=n} α_m μ_m | F_{n-1}] / (δ (1-r)^n)`.
pub fn dual_objective_transient(
    cert: &DualCertificate,
    spec: &PayoffSpec,
    params: &MarketParams,
) -> Result<(f64, FeasibilityReport)> {
    let n = params.n_steps;
    if cert.n_steps != n {
        return Err(Error::LengthMismatch {
            what: "certificate horizon",
            expected: n,
            got: cert.n_steps,
        });
    }
    check_tree(n)?;
    check_sizes(n, &cert.cond_prob, &cert.martingale)?;
    if cert.alpha.len() != cert.cond_prob.len() {
        return Err(Error::LengthMismatch {
            what: "dual spread process",
            expected: cert.cond_prob.len(),
            got: cert.alpha.len(),
        });
    }
    let mu = mu_weights(params)?.mu;
    let zeta0 = params.zeta0;
    let expected_h = cert.expectation(|bits| payoff_of_bits(spec, params, bits));
    let penalty = cert.expectation(|bits| {
        (1..=n)
            .map(|m| {
                let a = cert.alpha[tree_index(m - 1, bits)];
                (a - zeta0) * (a - zeta0) * mu[m - 1]
            })
            .sum()
    });
    let value = expected_h - 0.5 * penalty - cert.m0 * params.x0
        - 0.5 * params.perm_impact * params.x0 * params.x0;

    // Backward recursion for E_Q[Σ_{m>=d+1} α_m μ_m | node at depth d].
    let q = params.decay();
    let step = params.step_size();
    let mut future = vec![0.0; 1];
    let mut max_violation = f64::NEG_INFINITY;
    let mut violating = 0;
    let mut layers: Vec<Vec<f64>> = Vec::with_capacity(n);
    for d in (0..n).rev() {
        let layer: Vec<f64> = (0..1u64 << d)
            .map(|bits| {
                let k = tree_index(d, bits);
                let tail = if d + 1 == n {
                    0.0
                } else {
                    let p = cert.cond_prob[k];
                    p * future[(bits | (1 << d)) as usize] + (1.0 - p) * future[bits as usize]
                };
                cert.alpha[k] * mu[d] + tail
            })
            .collect();
        future = layer.clone();
        layers.push(layer);
    }
    layers.reverse();
    for (d, layer) in layers.iter().enumerate() {
        let scale = params.depth * q.powi(d as i32 + 1);
        for bits in 0..1u64 << d {
            let walk = (0..d).map(|i| if bits >> i & 1 == 1 { 1i64 } else { -1 }).sum::<i64>();
            let gap = (params.p0 + step * walk as f64 - cert.martingale[tree_index(d, bits)]).abs();
            let excess = gap - layer[bits as usize] / scale;
            max_violation = max_violation.max(excess);
            if excess > 1e-12 * (1.0 + gap) {
                violating += 1;
            }
        }
    }
    let martingale_defect = cert.martingale_defect();
    let report = FeasibilityReport {
        feasible: violating == 0 && martingale_defect <= 1e-12,
        max_violation,
        violating_nodes: violating,
        martingale_defect,
    };
    Ok((value, report))
}

/// Temporary-impact dual objective
/// `E_Q[H] - (δ/2) E_Q[Σ_{n=1}^N |P_{n-1} - M_{n-1}|²] - M_0 x0 - ι/2 x0²`.
/// The weight `δ/2` is the conjugate of the per-trade cost `ΔX²/(2δ)`.
pub fn dual_objective_temporary(
    cond_prob: &[f64],
    martingale: &[f64],
    spec: &PayoffSpec,
    params: &MarketParams,
) -> Result<f64> {
    params.validate()?;
    let n = params.n_steps;
    check_tree(n)?;
    check_sizes(n, cond_prob, martingale)?;
    let cert = DualCertificate {
        n_steps: n,
        cond_prob: cond_prob.to_vec(),
        alpha: vec![0.0; cond_prob.len()],
        alpha0: 0.0,
        martingale: martingale.to_vec(),
        m0: martingale[0],
        c_bound: 0.0,
        alpha_clips: 0,
        q_clips: 0,
    };
    let defect = cert.martingale_defect();
    if defect > 1e-10 {
        return Err(Error::NotMartingale(format!(
            "largest one-step drift {defect:.3e}"
        )));
    }
    let step = params.step_size();
    let expected_h = cert.expectation(|bits| payoff_of_bits(spec, params, bits));
    let distance = cert.expectation(|bits| {
        let mut walk = 0i64;
        let mut total = 0.0;
        for d in 0..n {
            let gap = params.p0 + step * walk as f64 - martingale[tree_index(d, bits)];
            total += gap * gap;
            walk += if bits >> d & 1 == 1 { 1 } else { -1 };
        }
        total
    });
    Ok(expected_h - 0.5 * params.depth * distance - cert.m0 * params.x0
        - 0.5 * params.perm_impact * params.x0 * params.x0)
}

/// State of the Kusuoka recursion along one path.
#[derive(Debug, Clone, Copy)]
struct TiltStep {
    alpha: f64,
    q: f64,
    alpha_clipped: bool,
    q_clipped: bool,
}

struct Tilt<'a, P: ?Sized> {
    profile: &'a P,
    sigma: f64,
    n: usize,
    c: f64,
    q_min: f64,
    margin: f64,
}

impl<P: VolProfile + ?Sized> Tilt<'_, P> {
    fn target(&self, m: usize, prices: &[f64]) -> f64 {
        let t = (m - 1) as f64 / self.n as f64;
        let nu = self.profile.nu(t, prices);
        (nu * nu - self.sigma * self.sigma) / (2.0 * self.sigma)
    }

    fn anchor(&self, p0: f64) -> f64 {
        self.target(1, &[p0]).clamp(-self.c, self.c)
    }

    /// `α_m` and `q_m` from `α_{m-1}`, the last shock `ξ_{m-1}` (0 for
    /// `m = 1`) and the prices `P_0, ..., P_{m-1}`.
    fn step(&self, m: usize, prices: &[f64], alpha_prev: f64, shock_prev: f64) -> Result<TiltStep> {
        let target = self.target(m, prices);
        let jump = self.c / (self.n as f64).sqrt();
        let alpha = target
            .clamp(alpha_prev - jump, alpha_prev + jump)
            .clamp(-self.c, self.c);
        if self.sigma + alpha <= self.margin * self.sigma {
            return Err(Error::Degenerate(format!(
                "σ + α = {} leaves no room for the martingale condition",
                self.sigma + alpha
            )));
        }
        let raw = 0.5 * (1.0 + alpha_prev * shock_prev / (self.sigma + alpha));
        let q = raw.clamp(self.q_min, 1.0 - self.q_min);
        Ok(TiltStep {
            alpha,
            q,
            alpha_clipped: alpha != target,
            q_clipped: q != raw,
        })
    }
}

fn make_tilt<'a, P: VolProfile + ?Sized>(
    profile: &'a P,
    params: &MarketParams,
    options: &KusuokaOptions,
) -> Result<Tilt<'a, P>> {
    params.validate()?;
    let c = options.c_bound.unwrap_or_else(|| profile.c_bound());
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParam {
            name: "c_bound",
            reason: format!("must be positive and finite, got {c}"),
        });
    }
    Ok(Tilt {
        profile,
        sigma: params.sigma,
        n: params.n_steps,
        c,
        q_min: options.q_min,
        margin: options.margin,
    })
}

/// The Kusuoka certificate on the full tree: `α_n` follows
/// `(ν² - σ²)/(2σ)` with `|α| <= C` and `|Δα| <= C/√N`, and
/// `q_n = ½(1 + α_{n-1} ξ_{n-1} / (σ + α_n))` makes
/// `M_n = P_n + α_n ξ_n / √N` a martingale with `M_0 = P_0`.
pub fn kusuoka_certificate<P: VolProfile + ?Sized>(
    profile: &P,
    params: &MarketParams,
    options: &KusuokaOptions,
) -> Result<DualCertificate> {
    let n = params.n_steps;
    check_tree(n)?;
    let tilt = make_tilt(profile, params, options)?;
    let step = params.step_size();
    let root_n = (n as f64).sqrt();
    let alpha0 = tilt.anchor(params.p0);
    let mut cond_prob = vec![0.0; (1 << n) - 1];
    let mut alpha = vec![0.0; (1 << n) - 1];
    let mut martingale = vec![0.0; (1 << (n + 1)) - 1];
    martingale[0] = params.p0;
    let (mut alpha_clips, mut q_clips) = (0, 0);
    let mut prices = Vec::with_capacity(n + 1);
    for d in 0..n {
        for bits in 0..1u64 << d {
            prices.clear();
            let mut walk = 0i64;
            prices.push(params.p0);
            for i in 0..d {
                walk += if bits >> i & 1 == 1 { 1 } else { -1 };
                prices.push(params.p0 + step * walk as f64);
            }
            let (alpha_prev, shock_prev) = if d == 0 {
                (alpha0, 0.0)
            } else {
                let parent = tree_index(d - 1, bits);
                (alpha[parent], if bits >> (d - 1) & 1 == 1 { 1.0 } else { -1.0 })
            };
            let s = tilt.step(d + 1, &prices, alpha_prev, shock_prev)?;
            let k = tree_index(d, bits);
            cond_prob[k] = s.q;
            alpha[k] = s.alpha;
            alpha_clips += usize::from(s.alpha_clipped);
            q_clips += usize::from(s.q_clipped);
            for (shock, child) in [(-1.0, bits), (1.0, bits | (1 << d))] {
                let p = params.p0 + step * (walk as f64 + shock);
                martingale[tree_index(d + 1, child)] = p + s.alpha * shock / root_n;
            }
        }
    }
    Ok(DualCertificate {
        n_steps: n,
        cond_prob,
        alpha,
        alpha0,
        martingale,
        m0: params.p0,
        c_bound: tilt.c,
        alpha_clips,
        q_clips,
    })
}

/// The transient dual triple induced by a Kusuoka certificate: the same
/// `(Q, M)` with the dual spread process chosen so that the feasibility
/// constraint binds for `n >= 2`.
pub fn kusuoka_dual_triple(cert: &DualCertificate, params: &MarketParams) -> Result<DualCertificate> {
    let n = params.n_steps;
    let mu = mu_weights(params)?.mu;
    let q = params.decay();
    let root_n = (n as f64).sqrt();
    let mut beta = vec![0.0; cert.alpha.len()];
    for d in 0..n {
        for bits in 0..1u64 << d {
            let k = tree_index(d, bits);
            let m = d + 1;
            // g_m = |α_{m-1}|/√N, g_1 = (1 - r) g_2.
            let next = cert.alpha[k].abs() / root_n;
            let here = if d == 0 {
                q * next
            } else {
                cert.alpha[tree_index(d - 1, bits)].abs() / root_n
            };
            let weight = params.depth * q.powi(m as i32);
            beta[k] = if m == n {
                weight * here / mu[m - 1]
            } else {
                weight * (here - q * next) / mu[m - 1]
            };
        }
    }
    Ok(DualCertificate {
        alpha: beta,
        ..cert.clone()
    })
}

/// Lower bound for `π^N` from a Kusuoka certificate at one horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KusuokaBound {
    pub n_steps: usize,
    /// `E_Q[h(P^N)]`.
    pub expected_payoff: f64,
    /// Bound with the penalty `δ/(2(1-(1-r)²)) E[(1/N) Σ_{m<N} (r|α_{m-1}| + C/√N)²]`
    /// and the boundary terms `δα_0²/(2N) + δE[α_{N-1}²]/(2N)`.
    pub bound: f64,
    /// Bound with the penalty `δ/(2(1-(1-r)²)) E[(1/N) Σ_{2<=m<N} (|α_{m-1}| - (1-r)|α_m|)²]`
    /// and the boundary term `δE[α_{N-1}²]/(2N)`.
    pub sharp_bound: f64,
    /// Monte Carlo standard error of both bounds (0 on the exact tree).
    pub std_error: f64,
    pub exact: bool,
    pub c_bound: f64,
    pub alpha_clips: usize,
    pub q_clips: usize,
}

impl KusuokaBound {
    /// A valid lower bound requires an exact martingale.
    pub fn certified(&self) -> bool {
        self.q_clips == 0
    }
}

/// Pathwise ingredients of the two bounds.
#[derive(Debug, Clone, Copy, Default)]
struct PathTerms {
    payoff: f64,
    loose: f64,
    sharp: f64,
}

/// `α_1, ..., α_N` along a path give the penalty sums (without the
/// `δ/(2(1-(1-r)²))` factor for the interior part).
fn path_terms(alphas: &[f64], alpha0: f64, c: f64, params: &MarketParams) -> (f64, f64) {
    let n = params.n_steps;
    let nf = n as f64;
    let r = params.resilience;
    let q = params.decay();
    let interior = params.depth / (2.0 * (1.0 - q * q));
    let a = |m: usize| if m == 0 { alpha0 } else { alphas[m - 1] };
    let mut loose = 0.0;
    let mut sharp = 0.0;
    for m in 1..n {
        let x = r * a(m - 1).abs() + c / nf.sqrt();
        loose += x * x / nf;
        if m >= 2 {
            let y = a(m - 1).abs() - q * a(m).abs();
            sharp += y * y / nf;
        }
    }
    let last = if n >= 2 { a(n - 1) * a(n - 1) / nf } else { 0.0 };
    let boundary = 0.5 * params.depth * last;
    (
        interior * loose + 0.5 * params.depth * alpha0 * alpha0 / nf + boundary,
        interior * sharp + boundary,
    )
}

fn bound_at<P: VolProfile + ?Sized>(
    profile: &P,
    spec: &PayoffSpec,
    params: &MarketParams,
    options: &KusuokaOptions,
) -> Result<KusuokaBound> {
    if params.frictionless {
        return Err(Error::InvalidParam {
            name: "frictionless",
            reason: "the dual penalty needs a finite depth".into(),
        });
    }
    let n = params.n_steps;
    let endowment = params.p0 * params.x0 + 0.5 * params.perm_impact * params.x0 * params.x0;
    let tilt = make_tilt(profile, params, options)?;
    if n <= options.exact_max_steps.min(TREE_MAX_STEPS) {
        let cert = kusuoka_certificate(profile, params, options)?;
        let terms = |bits: u64| -> PathTerms {
            let alphas: Vec<f64> = (0..n).map(|d| cert.alpha[tree_index(d, bits)]).collect();
            let (loose, sharp) = path_terms(&alphas, cert.alpha0, cert.c_bound, params);
            PathTerms {
                payoff: payoff_of_bits(spec, params, bits),
                loose,
                sharp,
            }
        };
        let eh = cert.expectation(|b| terms(b).payoff);
        let loose = cert.expectation(|b| terms(b).loose);
        let sharp = cert.expectation(|b| terms(b).sharp);
        return Ok(KusuokaBound {
            n_steps: n,
            expected_payoff: eh,
            bound: eh - loose - endowment,
            sharp_bound: eh - sharp - endowment,
            std_error: 0.0,
            exact: true,
            c_bound: cert.c_bound,
            alpha_clips: cert.alpha_clips,
            q_clips: cert.q_clips,
        });
    }
    let step = params.step_size();
    let alpha0 = tilt.anchor(params.p0);
    let samples = sample_paths(options.seed, options.mc_paths, |rng| -> Result<(PathTerms, usize, usize)> {
        let mut prices = Vec::with_capacity(n + 1);
        prices.push(params.p0);
        let mut shocks = Vec::with_capacity(n);
        let mut alphas = Vec::with_capacity(n);
        let (mut walk, mut alpha_prev, mut shock_prev) = (0i64, alpha0, 0.0);
        let (mut a_clips, mut q_clips) = (0, 0);
        for m in 1..=n {
            let s = tilt.step(m, &prices, alpha_prev, shock_prev)?;
            a_clips += usize::from(s.alpha_clipped);
            q_clips += usize::from(s.q_clipped);
            let shock: i8 = if rng.random::<f64>() < s.q { 1 } else { -1 };
            walk += shock as i64;
            prices.push(params.p0 + step * walk as f64);
            shocks.push(shock);
            alphas.push(s.alpha);
            alpha_prev = s.alpha;
            shock_prev = shock as f64;
        }
        let prefix = PathPrefix::new(shocks)?;
        let payoff = evaluate_payoff(spec, &fundamental_path(&prefix, params)?);
        let (loose, sharp) = path_terms(&alphas, alpha0, tilt.c, params);
        Ok((PathTerms { payoff, loose, sharp }, a_clips, q_clips))
    });
    let mut loose_values = Vec::with_capacity(samples.len());
    let mut sharp_values = Vec::with_capacity(samples.len());
    let mut payoffs = Vec::with_capacity(samples.len());
    let (mut alpha_clips, mut q_clips) = (0, 0);
    for s in samples {
        let (t, a, q) = s?;
        payoffs.push(t.payoff);
        loose_values.push(t.payoff - t.loose);
        sharp_values.push(t.payoff - t.sharp);
        alpha_clips += a;
        q_clips += q;
    }
    let loose = Estimate::from_samples(&loose_values);
    let sharp = Estimate::from_samples(&sharp_values);
    Ok(KusuokaBound {
        n_steps: n,
        expected_payoff: Estimate::from_samples(&payoffs).mean,
        bound: loose.mean - endowment,
        sharp_bound: sharp.mean - endowment,
        std_error: loose.std_error.max(sharp.std_error),
        exact: false,
        c_bound: tilt.c,
        alpha_clips,
        q_clips,
    })
}

/// Kusuoka lower bounds for `π^N` at every horizon in `n_list`; exact tree
/// expectations up to `options.exact_max_steps`, Monte Carlo beyond.
pub fn kusuoka_lower_bound<P: VolProfile + ?Sized>(
    profile: &P,
    spec: &PayoffSpec,
    params: &MarketParams,
    n_list: &[usize],
    options: &KusuokaOptions,
) -> Result<Vec<KusuokaBound>> {
    n_list
        .iter()
        .map(|&n| bound_at(profile, spec, &params.with_steps(n), options))
        .collect()
}

/// Samples of `P_1` under the Kusuoka measure (forward simulation).
pub fn terminal_prices_under_q<P: VolProfile + ?Sized>(
    profile: &P,
    params: &MarketParams,
    options: &KusuokaOptions,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = params.n_steps;
    let tilt = make_tilt(profile, params, options)?;
    let step = params.step_size();
    let alpha0 = tilt.anchor(params.p0);
    sample_paths(seed, n_paths, |rng| -> Result<f64> {
        let mut prices = Vec::with_capacity(n + 1);
        prices.push(params.p0);
        let (mut walk, mut alpha_prev, mut shock_prev) = (0i64, alpha0, 0.0);
        for m in 1..=n {
            let s = tilt.step(m, &prices, alpha_prev, shock_prev)?;
            let shock = if rng.random::<f64>() < s.q { 1 } else { -1 };
            walk += shock;
            prices.push(params.p0 + step * walk as f64);
            alpha_prev = s.alpha;
            shock_prev = shock as f64;
        }
        Ok(*prices.last().expect("nonempty"))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::brute_force_cost;

    fn params(n: usize) -> MarketParams {
        MarketParams {
            n_steps: n,
            ..MarketParams::default()
        }
    }

    #[test]
    fn mu_examples() {
        let p = MarketParams {
            n_steps: 2,
            depth: 2.0,
            resilience: 0.5,
            ..MarketParams::default()
        };
        let mu = mu_weights(&p).unwrap().mu;
        assert!((mu[0] - 0.375).abs() < 1e-15);
        assert!((mu[1] - 0.125).abs() < 1e-15);
        let tiny = MarketParams {
            resilience: 1e-12,
            n_steps: 5,
            ..p.clone()
        };
        let mu = mu_weights(&tiny).unwrap().mu;
        assert!(mu[..4].iter().all(|m| m.abs() < 1e-10));
        assert!((mu[4] - 2.0).abs() < 1e-9);
        assert!(mu_weights(&MarketParams { resilience: 1.0, ..p }).is_err());
    }

    #[test]
    fn flat_profile_gives_uniform_measure() {
        let p = params(6);
        let cert = kusuoka_certificate(&ConstantVol { nu: 1.0 }, &p, &KusuokaOptions::default()).unwrap();
        assert!(cert.cond_prob.iter().all(|&q| q == 0.5));
        assert!(cert.alpha.iter().all(|&a| a == 0.0));
        assert!(cert.martingale_defect() < 1e-15);
        assert!(cert.is_certified());
    }

    #[test]
    fn constant_tilt_probabilities() {
        let p = params(5);
        let a = 0.3;
        let nu = (1.0f64 + 2.0 * a).sqrt();
        let cert = kusuoka_certificate(&ConstantVol { nu }, &p, &KusuokaOptions::default()).unwrap();
        for d in 0..5 {
            for bits in 0..1u64 << d {
                let k = tree_index(d, bits);
                assert!((cert.alpha[k] - a).abs() < 1e-12);
                let expected = if d == 0 {
                    0.5
                } else {
                    let xi = if bits >> (d - 1) & 1 == 1 { 1.0 } else { -1.0 };
                    0.5 * (1.0 + a * xi / (1.0 + a))
                };
                assert!((cert.cond_prob[k] - expected).abs() < 1e-12);
            }
        }
        assert!(cert.martingale_defect() < 1e-14);
        assert!(cert.to_csv().lines().count() == 1 + 31);
    }

    #[test]
    fn uniform_dual_with_flat_spread_process() {
        let p = MarketParams {
            n_steps: 4,
            zeta0: 0.2,
            x0: 0.5,
            perm_impact: 0.1,
            p0: 1.0,
            ..MarketParams::default()
        };
        let spec = PayoffSpec::call(1.0);
        let cert = kusuoka_certificate(&ConstantVol { nu: 1.0 }, &p, &KusuokaOptions::default()).unwrap();
        let flat = DualCertificate {
            alpha: vec![p.zeta0; cert.alpha.len()],
            ..cert.clone()
        };
        let (value, report) = dual_objective_transient(&flat, &spec, &p).unwrap();
        let eh = cert.expectation(|b| payoff_of_bits(&spec, &p, b));
        assert!((value - (eh - p.p0 * p.x0 - 0.05 * 0.25)).abs() < 1e-12);
        assert!(report.feasible, "{report:?}");
    }

    #[test]
    fn kusuoka_triple_is_feasible_and_reproduces_sharp_bound() {
        let p = params(8);
        let spec = PayoffSpec::call(0.0);
        for nu in [0.8, 1.2] {
            let profile = ConstantVol { nu };
            let cert = kusuoka_certificate(&profile, &p, &KusuokaOptions::default()).unwrap();
            let triple = kusuoka_dual_triple(&cert, &p).unwrap();
            let (value, report) = dual_objective_transient(&triple, &spec, &p).unwrap();
            assert!(report.feasible, "{report:?}");
            assert!(report.max_violation.abs() < 1e-12);
            let bound = kusuoka_lower_bound(&profile, &spec, &p, &[8], &KusuokaOptions::default()).unwrap()[0];
            assert!((bound.sharp_bound - value).abs() < 1e-12, "{} vs {value}", bound.sharp_bound);
            assert!(bound.bound <= bound.sharp_bound);
        }
    }

    #[test]
    fn zero_payoff_dual_is_nonpositive() {
        let p = params(3);
        let zero = PayoffSpec::custom(crate::payoff::TerminalTable::new(vec![(0.0, 0.0)]).unwrap());
        let cert = kusuoka_certificate(&ConstantVol { nu: 1.3 }, &p, &KusuokaOptions::default()).unwrap();
        let (v, _) = dual_objective_transient(&kusuoka_dual_triple(&cert, &p).unwrap(), &zero, &p).unwrap();
        assert!(v <= 0.0);
        let v = dual_objective_temporary(&cert.cond_prob, &cert.martingale, &zero, &MarketParams { resilience: 1.0, ..p }).unwrap();
        assert!(v <= 0.0);
    }

    #[test]
    fn temporary_dual_weak_duality_two_periods() {
        let p = MarketParams {
            n_steps: 2,
            sigma: 2f64.sqrt(),
            depth: 4.0,
            resilience: 1.0,
            ..MarketParams::default()
        };
        let spec = PayoffSpec::call(0.0);
        let grid: Vec<f64> = (0..401).map(|i| -2.0 + 0.01 * i as f64).collect();
        let primal = brute_force_cost(&p, &spec, &grid).unwrap();
        assert!((primal - 1.25).abs() < 1e-9, "{primal}");
        // Search over (Q, M): last step pushed to the up move, first step q,
        // martingale pinned by M_1 values.
        let mut best = f64::NEG_INFINITY;
        for qi in 1..20 {
            let q = qi as f64 / 20.0;
            for ui in 0..=20 {
                for di in 0..=20 {
                    let mu = 1.0 - ui as f64 / 10.0;
                    let md = -1.0 + di as f64 / 10.0;
                    let m0 = q * mu + (1.0 - q) * md;
                    let cond = vec![q, 1.0 - 1e-9, 1.0 - 1e-9];
                    let mart = vec![m0, md, mu, md, mu, md, mu];
                    let v = dual_objective_temporary(&cond, &mart, &spec, &p).unwrap();
                    best = best.max(v);
                }
            }
        }
        assert!(best <= primal + 1e-9, "{best} vs {primal}");
        assert!(best > primal - 0.05, "{best} vs {primal}");

        let bad = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(dual_objective_temporary(&[0.5, 0.5, 0.5], &bad, &spec, &p).is_err());
    }

    #[test]
    fn increment_clipping_holds() {
        let p = params(10);
        let profile = TimeRampVol { start: 0.5, end: 1.8 };
        let cert = kusuoka_certificate(&profile, &p, &KusuokaOptions::default()).unwrap();
        let c = cert.c_bound;
        let jump = c / (10f64).sqrt();
        for d in 0..10 {
            for bits in 0..1u64 << d {
                let a = cert.alpha[tree_index(d, bits)];
                assert!(a.abs() <= c);
                let prev = if d == 0 { cert.alpha0 } else { cert.alpha[tree_index(d - 1, bits)] };
                assert!((a - prev).abs() <= jump + 1e-15);
            }
        }
        if cert.is_certified() {
            assert!(cert.martingale_defect() < 1e-13);
        }
    }

    #[test]
    fn flat_profile_bound_approaches_expected_payoff() {
        let spec = PayoffSpec::call(0.0);
        let p = params(4);
        let b = kusuoka_lower_bound(&ConstantVol { nu: 1.0 }, &spec, &p, &[4, 12], &KusuokaOptions::default()).unwrap();
        for x in &b {
            let c = x.c_bound;
            let nf = x.n_steps as f64;
            let penalty = p.depth / (2.0 * (1.0 - 0.25)) * (nf - 1.0) / nf * c * c / nf;
            assert!((x.expected_payoff - x.bound - penalty).abs() < 1e-12);
            assert_eq!(x.sharp_bound, x.expected_payoff);
        }
        assert!(b[1].expected_payoff - b[1].bound < b[0].expected_payoff - b[0].bound);
    }
}
