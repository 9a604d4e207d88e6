//! Minimax dynamic programming for the super-replication cost and a
//! brute-force oracle for tiny trees.
//!
//! The value `C_n(node, X, ζ)` is the least cash needed at time `n` in
//! lattice node `node` holding `X` shares with half-spread `ζ` so that some
//! continuation ends flat with terminal cash above the payoff on every path:
//!
//! `C_n = min_{X'} [P_n (X' - X) + ι/2 (X'² - X²) + ((1-r)ζ + |X'-X|/(2δ))|X'-X|
//!         + max_± C_{n+1}(child, X', (1-r)ζ + |X'-X|/δ)]`
//!
//! with `X_N = 0` forced. The last trading step is evaluated in closed form,
//! intermediate steps are tabulated on a position × spread grid and the root
//! is evaluated at the exact initial state.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::{
    fundamental_path, spread_step, terminal_wealth, MarketParams, PathPrefix,
};
use crate::mc::{random_shocks, sample_paths};
use crate::payoff::{evaluate_payoff, PayoffKind, PayoffSpec};
use crate::strategy::Strategy;

/// Largest horizon of the full binary tree mode.
pub const FULL_TREE_MAX_STEPS: usize = 16;
/// Largest number of strategy-path evaluations the brute-force oracle accepts.
pub const BRUTE_FORCE_BUDGET: u128 = 50_000_000;

/// State augmentation of the price lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LatticeMode {
    /// Recombining walk; payoffs of the terminal price only.
    Terminal,
    /// Walk plus its running maximum (lookback payoffs).
    RunningMax,
    /// Walk plus the running sum of past levels (average-price payoffs).
    RunningSum,
    /// Every path prefix is its own node (any payoff, `N <= 16`).
    FullTree,
}

impl LatticeMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Terminal => "terminal",
            Self::RunningMax => "running_max",
            Self::RunningSum => "running_sum",
            Self::FullTree => "full_tree",
        }
    }

    /// The cheapest mode in which `spec` is Markov.
    pub fn for_payoff(spec: &PayoffSpec) -> Self {
        match spec.kind {
            PayoffKind::LookbackMax => Self::RunningMax,
            PayoffKind::AsianMean { .. } => Self::RunningSum,
            _ => Self::Terminal,
        }
    }
}

/// Discretisation of the controls and of the spread state.
#[derive(Debug, Clone, PartialEq)]
pub struct DpGrids {
    /// Points of the uniform position grid on `[-X_max, X_max]` (odd, so 0 is a node).
    pub nx: usize,
    /// Points of the spread grid; `None` picks 1 when the spread carries no
    /// memory (`r = 1` or frictionless) and 33 otherwise.
    pub nz: Option<usize>,
    /// Position bound; `None` uses `4 max(L, |x0|, 1/4)`.
    pub x_max: Option<f64>,
    /// Spread bound; `None` uses the largest spread reachable with positions in the grid.
    pub zeta_max: Option<f64>,
    /// Refine the grid argmin by golden-section search on the interpolated value.
    pub refine: bool,
    /// Lattice augmentation; `None` picks [`LatticeMode::for_payoff`].
    pub mode: Option<LatticeMode>,
    /// Paths simulated by the super-replication certificate when `N > 16`
    /// (smaller horizons are checked exhaustively); 0 skips the certificate.
    pub certify_paths: usize,
    pub certify_seed: u64,
    /// Certificate shortfall above `slack_tolerance · max(1, |cost|)` marks the result invalid.
    pub slack_tolerance: f64,
}

impl Default for DpGrids {
    fn default() -> Self {
        Self {
            nx: 81,
            nz: None,
            x_max: None,
            zeta_max: None,
            refine: true,
            mode: None,
            certify_paths: 100_000,
            certify_seed: 0,
            slack_tolerance: 1e-2,
        }
    }
}

impl DpGrids {
    /// Position bound used for `params` and `spec`.
    pub fn resolved_x_max(&self, params: &MarketParams, spec: &PayoffSpec) -> f64 {
        self.x_max
            .unwrap_or_else(|| 4.0 * spec.lipschitz_l.max(params.x0.abs()).max(0.25))
    }

    /// The position grid for `params` and `spec`.
    pub fn position_grid(&self, params: &MarketParams, spec: &PayoffSpec) -> Vec<f64> {
        let x_max = self.resolved_x_max(params, spec);
        let nx = self.nx.max(1);
        if nx == 1 {
            return vec![0.0];
        }
        let half = (nx - 1) / 2;
        (0..nx)
            .map(|j| x_max * (j as f64 - half as f64) / half as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct NodeKey {
    walk: i32,
    aux: i64,
}

#[derive(Debug, Clone)]
struct Lattice {
    keys: Vec<Vec<NodeKey>>,
    /// `children[d][i] = [down, up]` indices at depth `d + 1`.
    children: Vec<Vec<[u32; 2]>>,
    payoff: Vec<f64>,
}

fn advance(mode: LatticeMode, key: NodeKey, shock: i8, depth: usize) -> NodeKey {
    let walk = key.walk + shock as i32;
    let aux = match mode {
        LatticeMode::Terminal => 0,
        LatticeMode::RunningMax => key.aux.max(walk as i64),
        LatticeMode::RunningSum => key.aux + key.walk as i64,
        LatticeMode::FullTree => key.aux | (i64::from(shock == 1) << depth),
    };
    NodeKey { walk, aux }
}

fn node_payoff(
    mode: LatticeMode,
    key: NodeKey,
    spec: &PayoffSpec,
    params: &MarketParams,
) -> Result<f64> {
    let n = params.n_steps;
    let step = params.step_size();
    match (mode, &spec.kind) {
        (LatticeMode::FullTree, _) => {
            let prefix = PathPrefix::from_bits(key.aux as u64, n);
            Ok(evaluate_payoff(spec, &fundamental_path(&prefix, params)?))
        }
        (_, _) if spec.is_terminal() => {
            Ok(spec
                .terminal_value(params.price(key.walk as i64))
                .expect("terminal payoff"))
        }
        (LatticeMode::RunningMax, PayoffKind::LookbackMax) => Ok(step * key.aux as f64),
        (LatticeMode::RunningSum, PayoffKind::AsianMean { strike }) => {
            Ok((params.p0 + step * key.aux as f64 / n as f64 - strike).max(0.0))
        }
        _ => Err(Error::UnsupportedPayoff(format!(
            "payoff {} is not Markov on the {} lattice",
            spec.name(),
            mode.name()
        ))),
    }
}

impl Lattice {
    fn build(mode: LatticeMode, spec: &PayoffSpec, params: &MarketParams) -> Result<Self> {
        let n = params.n_steps;
        if mode == LatticeMode::FullTree && n > FULL_TREE_MAX_STEPS {
            return Err(Error::TooLarge(format!(
                "full tree mode needs N <= {FULL_TREE_MAX_STEPS}, got {n}"
            )));
        }
        let mut keys = vec![vec![NodeKey { walk: 0, aux: 0 }]];
        let mut children = Vec::with_capacity(n);
        for d in 0..n {
            let mut index: HashMap<NodeKey, u32> = HashMap::new();
            let mut next = Vec::new();
            let mut links = Vec::with_capacity(keys[d].len());
            for &key in &keys[d] {
                let mut pair = [0u32; 2];
                for (slot, shock) in [-1i8, 1].into_iter().enumerate() {
                    let child = advance(mode, key, shock, d);
                    pair[slot] = *index.entry(child).or_insert_with(|| {
                        next.push(child);
                        (next.len() - 1) as u32
                    });
                }
                links.push(pair);
            }
            children.push(links);
            keys.push(next);
        }
        let payoff = keys[n]
            .iter()
            .map(|&k| node_payoff(mode, k, spec, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            keys,
            children,
            payoff,
        })
    }

    fn node_count(&self) -> usize {
        self.keys.iter().map(Vec::len).sum()
    }
}

/// A control decision at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control {
    pub position: f64,
    pub value: f64,
    /// The grid argmin sat on the edge of the position grid.
    pub boundary: bool,
}

/// The tabulated value function; controls are recomputed at the exact
/// state by re-running the one-step minimisation.
#[derive(Debug, Clone)]
pub struct DpPolicy {
    params: MarketParams,
    payoff: PayoffSpec,
    mode: LatticeMode,
    xs: Vec<f64>,
    zs: Vec<f64>,
    x_max: f64,
    zeta_max: f64,
    refine: bool,
    lattice: Lattice,
    /// `tables[d]` holds `C_d` on `node × position × spread` for `1 <= d <= N-2`.
    tables: Vec<Vec<f64>>,
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..48 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

impl DpPolicy {
    pub fn params(&self) -> &MarketParams {
        &self.params
    }

    pub fn payoff(&self) -> &PayoffSpec {
        &self.payoff
    }

    pub fn mode(&self) -> LatticeMode {
        self.mode
    }

    pub fn position_grid(&self) -> &[f64] {
        &self.xs
    }

    pub fn spread_grid(&self) -> &[f64] {
        &self.zs
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    fn node_price(&self, depth: usize, node: usize) -> f64 {
        self.params.price(self.lattice.keys[depth][node].walk as i64)
    }

    fn trade_cost(&self, price: f64, x: f64, x_new: f64, zeta: f64) -> f64 {
        let dx = x_new - x;
        let mut cost = price * dx + 0.5 * self.params.perm_impact * (x_new * x_new - x * x);
        if !self.params.frictionless {
            cost += (self.params.decay() * zeta + dx.abs() / (2.0 * self.params.depth)) * dx.abs();
        }
        cost
    }

    /// `C_{N-1}`: liquidate everything, then face the worse terminal payoff.
    fn last_value(&self, node: usize, x: f64, zeta: f64) -> f64 {
        let d = self.params.n_steps - 1;
        let [down, up] = self.lattice.children[d][node];
        let worst = self.lattice.payoff[down as usize].max(self.lattice.payoff[up as usize]);
        self.trade_cost(self.node_price(d, node), x, 0.0, zeta) + worst
    }

    fn zeta_weight(&self, zeta: f64) -> (usize, f64) {
        let nz = self.zs.len();
        if nz == 1 {
            return (0, 0.0);
        }
        let u = (zeta.max(0.0) / self.zeta_max).sqrt() * (nz - 1) as f64;
        let i = (u.floor() as usize).min(nz - 2);
        let t = (zeta.max(0.0) - self.zs[i]) / (self.zs[i + 1] - self.zs[i]);
        (i, t)
    }

    fn table_value(&self, depth: usize, node: usize, ix: usize, (iz, t): (usize, f64)) -> f64 {
        let nz = self.zs.len();
        let base = (node * self.xs.len() + ix) * nz;
        let table = &self.tables[depth];
        if nz == 1 {
            table[base]
        } else {
            table[base + iz] * (1.0 - t) + table[base + iz + 1] * t
        }
    }

    /// `C_depth` at grid position `ix`.
    fn value_on_grid(&self, depth: usize, node: usize, ix: usize, zeta: f64) -> f64 {
        if depth + 1 == self.params.n_steps {
            self.last_value(node, self.xs[ix], zeta)
        } else {
            self.table_value(depth, node, ix, self.zeta_weight(zeta))
        }
    }

    /// `C_depth` at an arbitrary position (linear in the position between grid nodes).
    fn value_at(&self, depth: usize, node: usize, x: f64, zeta: f64) -> f64 {
        if depth + 1 == self.params.n_steps {
            return self.last_value(node, x, zeta);
        }
        let nx = self.xs.len();
        if nx == 1 {
            return self.table_value(depth, node, 0, self.zeta_weight(zeta));
        }
        let h = self.xs[1] - self.xs[0];
        let u = ((x - self.xs[0]) / h).clamp(0.0, (nx - 1) as f64);
        let ix = (u.floor() as usize).min(nx - 2);
        let s = (x - self.xs[ix]) / h;
        let w = self.zeta_weight(zeta);
        self.table_value(depth, node, ix, w) * (1.0 - s) + self.table_value(depth, node, ix + 1, w) * s
    }

    fn objective(&self, depth: usize, node: usize, x: f64, zeta: f64, x_new: f64) -> f64 {
        let [down, up] = self.lattice.children[depth][node];
        let z = spread_step(zeta, x_new - x, &self.params);
        self.trade_cost(self.node_price(depth, node), x, x_new, zeta)
            + self
                .value_at(depth + 1, down as usize, x_new, z)
                .max(self.value_at(depth + 1, up as usize, x_new, z))
    }

    fn objective_on_grid(&self, depth: usize, node: usize, x: f64, zeta: f64, ix: usize) -> f64 {
        let [down, up] = self.lattice.children[depth][node];
        let x_new = self.xs[ix];
        let z = spread_step(zeta, x_new - x, &self.params);
        self.trade_cost(self.node_price(depth, node), x, x_new, zeta)
            + self
                .value_on_grid(depth + 1, down as usize, ix, z)
                .max(self.value_on_grid(depth + 1, up as usize, ix, z))
    }

    /// Optimal next position at depth `depth`, lattice node `node`, from
    /// position `x` and half-spread `zeta`. Among controls within rounding of
    /// the minimum the smallest `|X'|` wins.
    pub fn control(&self, depth: usize, node: usize, x: f64, zeta: f64) -> Control {
        if depth + 1 == self.params.n_steps {
            return Control {
                position: 0.0,
                value: self.last_value(node, x, zeta),
                boundary: false,
            };
        }
        let values: Vec<f64> = (0..self.xs.len())
            .map(|ix| self.objective_on_grid(depth, node, x, zeta, ix))
            .collect();
        let best = values.iter().copied().fold(f64::INFINITY, f64::min);
        let tol = 1e-12 * (1.0 + best.abs());
        let mut arg = 0;
        for (ix, &v) in values.iter().enumerate() {
            if v <= best + tol && (values[arg] > best + tol || self.xs[ix].abs() < self.xs[arg].abs()) {
                arg = ix;
            }
        }
        let nx = self.xs.len();
        let mut out = Control {
            position: self.xs[arg],
            value: values[arg],
            boundary: nx > 1 && (arg == 0 || arg == nx - 1),
        };
        if self.refine && nx >= 3 {
            let lo = self.xs[arg.saturating_sub(1)];
            let hi = self.xs[(arg + 1).min(nx - 1)];
            let (xr, vr) = golden_section(|xn| self.objective(depth, node, x, zeta, xn), lo, hi);
            if vr < out.value - tol {
                out.position = xr;
                out.value = vr;
            }
        }
        out
    }

    /// Positions of the policy along a full path, and whether any decision
    /// hit the edge of the position grid.
    pub fn trace(&self, shocks: &[i8]) -> (Vec<f64>, bool) {
        let n = self.params.n_steps;
        let mut node = 0usize;
        let mut x = self.params.x0;
        let mut zeta = self.params.zeta0;
        let mut boundary = false;
        let mut out = Vec::with_capacity(n);
        for (d, &shock) in shocks.iter().enumerate().take(n) {
            let c = self.control(d, node, x, zeta);
            boundary |= c.boundary;
            zeta = spread_step(zeta, c.position - x, &self.params);
            x = c.position;
            out.push(x);
            node = self.lattice.children[d][node][usize::from(shock == 1)] as usize;
        }
        (out, boundary)
    }

    fn positions_upto(&self, shocks: &[i8], upto: usize) -> Vec<f64> {
        let mut padded = shocks[..upto - 1].to_vec();
        padded.push(1);
        let mut xs = self.trace(&padded).0;
        xs.truncate(upto);
        xs
    }

    /// Simulates the policy from initial cash `cash` on `n_paths` paths
    /// (every path when `N <= 16`) and reports the worst shortfall
    /// `H - ξ_N`.
    pub fn certify(&self, cash: f64, n_paths: usize, seed: u64) -> Result<Certificate> {
        let n = self.params.n_steps;
        let funded = MarketParams {
            xi0: cash,
            ..self.params.clone()
        };
        let check = |prefix: PathPrefix| -> Result<(f64, bool)> {
            let (xs, boundary) = self.trace(prefix.shocks());
            let wealth = terminal_wealth(&xs, &prefix, &funded)?;
            let h = evaluate_payoff(&self.payoff, &fundamental_path(&prefix, &self.params)?);
            Ok((h - wealth, boundary))
        };
        let exhaustive = n <= FULL_TREE_MAX_STEPS;
        let outcomes: Vec<Result<(f64, bool)>> = if exhaustive {
            (0..1u64 << n)
                .into_par_iter()
                .map(|bits| check(PathPrefix::from_bits(bits, n)))
                .collect()
        } else {
            sample_paths(seed, n_paths, |rng| {
                check(PathPrefix::new(random_shocks(rng, n)).expect("valid shocks"))
            })
        };
        let mut cert = Certificate {
            paths: outcomes.len(),
            exhaustive,
            max_shortfall: f64::NEG_INFINITY,
            boundary_paths: 0,
        };
        for o in outcomes {
            let (shortfall, boundary) = o?;
            cert.max_shortfall = cert.max_shortfall.max(shortfall);
            cert.boundary_paths += usize::from(boundary);
        }
        Ok(cert)
    }
}

impl Strategy for DpPolicy {
    fn n_steps(&self) -> usize {
        self.params.n_steps
    }

    fn position(&self, n: usize, prefix: &[i8]) -> f64 {
        *self.positions_upto(prefix, n).last().expect("n >= 1")
    }

    fn positions(&self, shocks: &[i8]) -> Vec<f64> {
        self.trace(shocks).0
    }
}

/// Outcome of forward-simulating a policy against the payoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub paths: usize,
    pub exhaustive: bool,
    /// `max (H - ξ_N)` over the checked paths; `<= 0` means super-replication.
    pub max_shortfall: f64,
    /// Paths on which some decision sat on the edge of the position grid.
    pub boundary_paths: usize,
}

impl Certificate {
    /// Extra cash needed on top of the computed cost.
    pub fn slack(&self) -> f64 {
        self.max_shortfall.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationReport {
    pub mode: LatticeMode,
    pub nx: usize,
    pub nz: usize,
    pub x_max: f64,
    pub zeta_max: f64,
    pub lattice_nodes: usize,
    pub certificate: Option<Certificate>,
    /// Boundary hit or certificate shortfall above tolerance.
    pub valid: bool,
    pub warnings: Vec<String>,
}

impl DiscretizationReport {
    /// Certificate shortfall, or 0 when no certificate was run.
    pub fn slack(&self) -> f64 {
        self.certificate.map_or(0.0, |c| c.slack())
    }
}

#[derive(Debug, Clone)]
pub struct PriceResult {
    pub cost: f64,
    pub report: DiscretizationReport,
    pub policy: DpPolicy,
}

impl PriceResult {
    pub fn slack(&self) -> f64 {
        self.report.slack()
    }
}

/// The super-replication cost `π^N` of `spec` by backward induction.
pub fn superreplication_cost(
    params: &MarketParams,
    spec: &PayoffSpec,
    grids: &DpGrids,
) -> Result<PriceResult> {
    params.validate()?;
    if grids.nx % 2 == 0 {
        return Err(Error::InvalidParam {
            name: "nx",
            reason: format!("position grid needs an odd number of points to contain 0, got {}", grids.nx),
        });
    }
    let n = params.n_steps;
    let mode = grids.mode.unwrap_or_else(|| LatticeMode::for_payoff(spec));
    let xs = grids.position_grid(params, spec);
    let x_max = grids.resolved_x_max(params, spec);
    if !(x_max > 0.0) {
        return Err(Error::InvalidParam {
            name: "x_max",
            reason: format!("must be positive, got {x_max}"),
        });
    }
    let memoryless = params.frictionless || params.resilience == 1.0;
    let nz = if memoryless {
        1
    } else {
        grids.nz.unwrap_or(33)
    };
    if nz < 2 && !memoryless {
        return Err(Error::InvalidParam {
            name: "nz",
            reason: "the spread carries memory for r < 1; need at least 2 spread nodes".into(),
        });
    }
    let zeta_max = grids.zeta_max.unwrap_or_else(|| {
        if memoryless {
            0.0
        } else {
            params.zeta0 + (2.0 * x_max).max(x_max + params.x0.abs()) / (params.depth * params.resilience)
        }
    });
    let zs: Vec<f64> = if nz == 1 {
        vec![0.0]
    } else {
        (0..nz)
            .map(|i| zeta_max * (i as f64 / (nz - 1) as f64).powi(2))
            .collect()
    };
    let lattice = Lattice::build(mode, spec, params)?;
    let mut policy = DpPolicy {
        params: params.clone(),
        payoff: spec.clone(),
        mode,
        xs,
        zs,
        x_max,
        zeta_max,
        refine: grids.refine,
        tables: vec![Vec::new(); n],
        lattice,
    };
    for d in (1..n.saturating_sub(1)).rev() {
        let this = &policy;
        let per_node: Vec<Vec<f64>> = (0..this.lattice.keys[d].len())
            .into_par_iter()
            .map(|node| {
                let mut out = Vec::with_capacity(this.xs.len() * this.zs.len());
                for &x in &this.xs {
                    for &z in &this.zs {
                        out.push(this.control(d, node, x, z).value);
                    }
                }
                out
            })
            .collect();
        policy.tables[d] = per_node.concat();
    }
    let root = policy.control(0, 0, params.x0, params.zeta0);
    let cost = root.value;
    if !cost.is_finite() {
        return Err(Error::Degenerate(format!("non-finite cost {cost}")));
    }
    let mut warnings = Vec::new();
    let certificate = if grids.certify_paths > 0 {
        Some(policy.certify(cost, grids.certify_paths, grids.certify_seed)?)
    } else {
        None
    };
    if root.boundary {
        warnings.push("root decision on the edge of the position grid".to_string());
    }
    if let Some(c) = certificate {
        if c.boundary_paths > 0 {
            warnings.push(format!(
                "{} simulated paths used the edge of the position grid",
                c.boundary_paths
            ));
        }
        if c.slack() > grids.slack_tolerance * cost.abs().max(1.0) {
            warnings.push(format!(
                "certificate shortfall {:.3e} exceeds tolerance; refine the grids",
                c.slack()
            ));
        }
    }
    let report = DiscretizationReport {
        mode,
        nx: policy.xs.len(),
        nz: policy.zs.len(),
        x_max,
        zeta_max,
        lattice_nodes: policy.lattice.node_count(),
        certificate,
        valid: warnings.is_empty(),
        warnings,
    };
    Ok(PriceResult {
        cost,
        report,
        policy,
    })
}

/// Heap index of the decision taken after the shocks encoded in the low
/// `depth` bits of `bits` (bit `i` set when shock `i + 1` is up).
pub fn tree_index(depth: usize, bits: u64) -> usize {
    (1usize << depth) - 1 + (bits & ((1u64 << depth) - 1)) as usize
}

/// Exhaustive minimum over all predictable strategies whose positions
/// `X_1, ..., X_{N-1}` take values in `control_grid` (with `X_N = 0`) of the
/// worst case over paths of `H - ξ_N + ξ0`.
pub fn brute_force_cost(
    params: &MarketParams,
    spec: &PayoffSpec,
    control_grid: &[f64],
) -> Result<f64> {
    params.validate()?;
    let n = params.n_steps;
    if n > 4 {
        return Err(Error::TooLarge(format!("brute force needs N <= 4, got {n}")));
    }
    if control_grid.is_empty() {
        return Err(Error::InvalidParam {
            name: "control_grid",
            reason: "empty".into(),
        });
    }
    let slots = (1usize << (n - 1)) - 1;
    let k = control_grid.len() as u128;
    let strategies = k
        .checked_pow(slots as u32)
        .filter(|s| s.saturating_mul(1 << n) <= BRUTE_FORCE_BUDGET)
        .ok_or_else(|| {
            Error::TooLarge(format!(
                "{} grid points over {slots} decision nodes exceed the brute-force budget",
                control_grid.len()
            ))
        })? as u64;
    let unfunded = MarketParams {
        xi0: 0.0,
        ..params.clone()
    };
    let paths: Vec<(PathPrefix, f64)> = (0..1u64 << n)
        .map(|bits| {
            let prefix = PathPrefix::from_bits(bits, n);
            let h = evaluate_payoff(spec, &fundamental_path(&prefix, params)?);
            Ok((prefix, h))
        })
        .collect::<Result<_>>()?;
    let worst = |s: u64| -> Result<f64> {
        let mut choice = Vec::with_capacity(slots);
        let mut rest = s;
        for _ in 0..slots {
            choice.push(control_grid[(rest % k as u64) as usize]);
            rest /= k as u64;
        }
        let mut worst = f64::NEG_INFINITY;
        for (bits, (prefix, h)) in paths.iter().enumerate() {
            let xs: Vec<f64> = (1..=n)
                .map(|m| {
                    if m == n {
                        0.0
                    } else {
                        choice[tree_index(m - 1, bits as u64)]
                    }
                })
                .collect();
            let wealth = terminal_wealth(&xs, prefix, &unfunded)?;
            worst = worst.max(h - wealth);
        }
        Ok(worst)
    };
    let best = (0..strategies)
        .into_par_iter()
        .map(worst)
        .try_reduce(|| f64::INFINITY, |a, b| Ok(a.min(b)))?;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payoff::TerminalTable;

    fn exact_grids(nx: usize) -> DpGrids {
        DpGrids {
            nx,
            nz: Some(201),
            refine: false,
            ..DpGrids::default()
        }
    }

    fn abs_payoff() -> PayoffSpec {
        PayoffSpec::custom(TerminalTable::new(vec![(-1.0, 1.0), (0.0, 0.0), (1.0, 1.0)]).unwrap())
    }

    #[test]
    fn one_period_has_no_admissible_trade() {
        let params = MarketParams {
            n_steps: 1,
            ..MarketParams::default()
        };
        let r = superreplication_cost(&params, &abs_payoff(), &DpGrids::default()).unwrap();
        assert!((r.cost - 1.0).abs() < 1e-15);
        assert_eq!(r.report.slack(), 0.0);
        let b = brute_force_cost(&params, &abs_payoff(), &[0.0]).unwrap();
        assert!((b - 1.0).abs() < 1e-15);
    }

    /// Backward induction with `q = 1/2` over the hedgeable periods; the
    /// last shock meets a zero position and is taken in the worst case.
    fn crr_flat_last(spec: &PayoffSpec, params: &MarketParams) -> f64 {
        let n = params.n_steps;
        let mut values: Vec<f64> = (0..1u64 << n)
            .map(|bits| {
                let prefix = PathPrefix::from_bits(bits, n);
                evaluate_payoff(spec, &fundamental_path(&prefix, params).unwrap())
            })
            .collect();
        for d in (0..n).rev() {
            values = (0..1usize << d)
                .map(|b| {
                    let (down, up) = (values[b], values[b | (1 << d)]);
                    if d + 1 == n {
                        down.max(up)
                    } else {
                        0.5 * (down + up)
                    }
                })
                .collect();
        }
        values[0]
    }

    #[test]
    fn frictionless_two_period_call() {
        let params = MarketParams {
            n_steps: 2,
            sigma: 2f64.sqrt(),
            frictionless: true,
            ..MarketParams::default()
        };
        let spec = PayoffSpec::call(0.0);
        assert!((crr_flat_last(&spec, &params) - 1.0).abs() < 1e-15);
        let r = superreplication_cost(&params, &spec, &DpGrids::default()).unwrap();
        assert!((r.cost - 1.0).abs() < 1e-9, "{}", r.cost);
        assert!(r.report.valid, "{:?}", r.report);
        let grid = DpGrids::default().position_grid(&params, &spec);
        let b = brute_force_cost(&params, &spec, &grid).unwrap();
        assert!((b - 1.0).abs() < 1e-9, "{b}");
    }

    #[test]
    fn frictionless_matches_crr_on_longer_trees() {
        for spec in [PayoffSpec::call(0.1), PayoffSpec::put(-0.2), PayoffSpec::lookback()] {
            let params = MarketParams {
                n_steps: 8,
                p0: 0.0,
                frictionless: true,
                ..MarketParams::default()
            };
            let r = superreplication_cost(&params, &spec, &DpGrids::default()).unwrap();
            let oracle = crr_flat_last(&spec, &params);
            assert!((r.cost - oracle).abs() < 1e-6, "{}: {} vs {oracle}", spec.name(), r.cost);
        }
    }

    #[test]
    fn finite_depth_two_period_call_matches_oracle() {
        let params = MarketParams {
            n_steps: 2,
            sigma: 2f64.sqrt(),
            ..MarketParams::default()
        };
        let spec = PayoffSpec::call(0.0);
        let grids = exact_grids(41);
        let r = superreplication_cost(&params, &spec, &grids).unwrap();
        assert!((1.0..=2.0).contains(&r.cost), "{}", r.cost);
        let b = brute_force_cost(&params, &spec, &grids.position_grid(&params, &spec)).unwrap();
        assert!((r.cost - b).abs() < 1e-9, "{} vs {b}", r.cost);
        assert!(r.report.slack() < 1e-12);
    }

    #[test]
    fn three_period_oracle_with_transient_spread() {
        let params = MarketParams {
            n_steps: 3,
            depth: 0.5,
            resilience: 0.5,
            perm_impact: 0.1,
            ..MarketParams::default()
        };
        let spec = PayoffSpec::put(0.1);
        let grids = DpGrids {
            x_max: Some(2.0),
            ..exact_grids(21)
        };
        let r = superreplication_cost(&params, &spec, &grids).unwrap();
        let b = brute_force_cost(&params, &spec, &grids.position_grid(&params, &spec)).unwrap();
        assert!((r.cost - b).abs() < 1e-3, "{} vs {b}", r.cost);
    }

    #[test]
    fn zero_payoff_costs_nothing() {
        let zero = PayoffSpec::custom(TerminalTable::new(vec![(0.0, 0.0)]).unwrap());
        let params = MarketParams {
            n_steps: 3,
            ..MarketParams::default()
        };
        let b = brute_force_cost(&params, &zero, &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(b, 0.0);
        let r = superreplication_cost(&params, &zero, &DpGrids::default()).unwrap();
        assert!(r.cost.abs() < 1e-12);
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let params = MarketParams {
            n_steps: 5,
            ..MarketParams::default()
        };
        assert!(brute_force_cost(&params, &PayoffSpec::call(0.0), &[0.0]).is_err());
        let params = params.with_steps(4);
        let grid: Vec<f64> = (0..41).map(|i| i as f64).collect();
        assert!(brute_force_cost(&params, &PayoffSpec::call(0.0), &grid).is_err());
    }

    #[test]
    fn augmented_lattices_match_full_tree() {
        let params = MarketParams {
            n_steps: 6,
            resilience: 0.6,
            ..MarketParams::default()
        };
        for spec in [PayoffSpec::lookback(), PayoffSpec::asian(0.1), PayoffSpec::call(0.2)] {
            let grids = DpGrids {
                nx: 21,
                nz: Some(9),
                certify_paths: 0,
                ..DpGrids::default()
            };
            let fast = superreplication_cost(&params, &spec, &grids).unwrap();
            let full = superreplication_cost(
                &params,
                &spec,
                &DpGrids {
                    mode: Some(LatticeMode::FullTree),
                    ..grids
                },
            )
            .unwrap();
            assert!((fast.cost - full.cost).abs() < 1e-10, "{}: {} vs {}", spec.name(), fast.cost, full.cost);
            assert!(fast.report.lattice_nodes < full.report.lattice_nodes);
        }
        let bad = DpGrids {
            mode: Some(LatticeMode::Terminal),
            ..DpGrids::default()
        };
        assert!(superreplication_cost(&params, &PayoffSpec::lookback(), &bad).is_err());
        let too_long = DpGrids {
            mode: Some(LatticeMode::FullTree),
            ..DpGrids::default()
        };
        assert!(superreplication_cost(&params.with_steps(17), &PayoffSpec::call(0.0), &too_long).is_err());
    }

    #[test]
    fn policy_is_predictable_and_certified() {
        let params = MarketParams {
            n_steps: 8,
            ..MarketParams::default()
        };
        let r = superreplication_cost(&params, &PayoffSpec::call(0.0), &DpGrids::default()).unwrap();
        let cert = r.report.certificate.unwrap();
        assert!(cert.exhaustive);
        assert_eq!(cert.paths, 256);
        assert!(cert.slack() < 1e-2 * r.cost.max(1.0), "{cert:?}");
        let shocks = [1i8, -1, -1, 1, 1, 1, -1, 1];
        let xs = r.policy.positions(&shocks);
        assert_eq!(xs[7], 0.0);
        for n in 1..=8 {
            assert_eq!(r.policy.position(n, &shocks[..n - 1]), xs[n - 1]);
        }
    }

    #[test]
    fn refinement_stays_within_one_cell() {
        let params = MarketParams {
            n_steps: 4,
            ..MarketParams::default()
        };
        let spec = PayoffSpec::call(0.0);
        let coarse = superreplication_cost(&params, &spec, &DpGrids { refine: false, ..DpGrids::default() }).unwrap();
        let fine = superreplication_cost(&params, &spec, &DpGrids::default()).unwrap();
        let h = coarse.policy.position_grid()[1] - coarse.policy.position_grid()[0];
        for bits in 0..8u64 {
            let shocks = PathPrefix::from_bits(bits, 4);
            let a = coarse.policy.positions(shocks.shocks());
            let b = fine.policy.positions(shocks.shocks());
            assert!((a[0] - b[0]).abs() <= h + 1e-12);
        }
        assert!(fine.cost <= coarse.cost + 1e-12);
    }
}
