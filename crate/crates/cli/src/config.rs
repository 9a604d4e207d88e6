//! Experiment configuration: a sectioned TOML file with every key checked.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use superrep::{
    DpGrids, HjbGrid, KusuokaOptions, LatticeMode, LimitProblem, MarketParams, McConfig, PayoffSpec,
    TerminalTable,
};

use crate::error::{CliError, Result};

/// What an experiment computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PrimalDp,
    DualBound,
    LimitHjb,
    LimitMc,
    ConvergenceStudy,
    IdentitySuite,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::PrimalDp => "primal_dp",
            Self::DualBound => "dual_bound",
            Self::LimitHjb => "limit_hjb",
            Self::LimitMc => "limit_mc",
            Self::ConvergenceStudy => "convergence_study",
            Self::IdentitySuite => "identity_suite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketSection {
    pub p0: f64,
    pub sigma: f64,
    pub depth: f64,
    pub resilience: f64,
    pub perm_impact: f64,
    pub x0: f64,
    pub zeta0: f64,
    pub xi0: f64,
    pub frictionless: bool,
}

impl Default for MarketSection {
    fn default() -> Self {
        let m = MarketParams::default();
        Self {
            p0: m.p0,
            sigma: m.sigma,
            depth: m.depth,
            resilience: m.resilience,
            perm_impact: m.perm_impact,
            x0: m.x0,
            zeta0: m.zeta0,
            xi0: m.xi0,
            frictionless: m.frictionless,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffName {
    Call,
    Put,
    LookbackMax,
    AsianMean,
    CustomTerminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PayoffSection {
    pub kind: PayoffName,
    pub strike: f64,
    /// Overrides the declared Lipschitz constant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    /// `[x, h(x)]` knots of a piecewise-linear terminal payoff.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 2]>>,
}

impl Default for PayoffSection {
    fn default() -> Self {
        Self {
            kind: PayoffName::Call,
            strike: 0.0,
            lipschitz: None,
            points: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    /// Study identifier; defaults to a prefix of the config digest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub n_list: Vec<usize>,
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            mode: None,
            id: None,
            n_list: vec![8],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeName {
    Terminal,
    RunningMax,
    RunningSum,
    FullTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSection {
    pub nx: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nz: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta_max: Option<f64>,
    pub refine: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeName>,
    pub certify_paths: usize,
    pub slack_tolerance: f64,
}

impl Default for DpSection {
    fn default() -> Self {
        let g = DpGrids::default();
        Self {
            nx: g.nx,
            nz: g.nz,
            x_max: g.x_max,
            zeta_max: g.zeta_max,
            refine: g.refine,
            lattice: None,
            certify_paths: g.certify_paths,
            slack_tolerance: g.slack_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualSection {
    /// Constant volatilities of the certificates, in units of `sigma`.
    pub nu_over_sigma: Vec<f64>,
    pub exact_max_steps: usize,
    pub mc_paths: usize,
    pub q_min: f64,
}

impl Default for DualSection {
    fn default() -> Self {
        let o = KusuokaOptions::default();
        Self {
            nu_over_sigma: vec![0.8, 1.0, 1.2],
            exact_max_steps: o.exact_max_steps,
            mc_paths: o.mc_paths,
            q_min: o.q_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitSection {
    pub n_space: usize,
    /// Variance cap in units of `sigma^2`.
    pub nu_sq_max_over_sigma_sq: f64,
    pub cap_tolerance: f64,
    /// Write the optimal-variance surface next to the results store.
    pub surface: bool,
}

impl Default for LimitSection {
    fn default() -> Self {
        Self {
            n_space: 401,
            nu_sq_max_over_sigma_sq: 16.0,
            cap_tolerance: 0.05,
            surface: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    ConstantVol,
    HjbFeedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub paths: usize,
    pub steps: usize,
    pub policy: PolicyName,
    /// Constant volatilities (in units of `sigma`) or feedback blend weights.
    pub thetas: Vec<f64>,
    pub step_halving: bool,
}

impl Default for McSection {
    fn default() -> Self {
        let c = McConfig::default();
        Self {
            paths: c.n_paths,
            steps: c.n_steps,
            policy: PolicyName::ConstantVol,
            thetas: vec![0.8, 1.0, 1.2, 1.4, 1.6],
            step_halving: c.step_halving,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub instances: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { instances: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub results_file: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            results_file: "results.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub market: MarketSection,
    pub payoff: PayoffSection,
    pub experiment: ExperimentSection,
    pub dp: DpSection,
    pub dual: DualSection,
    pub limit: LimitSection,
    pub mc: McSection,
    pub verify: VerifySection,
    pub output: OutputSection,
}

fn config_error(key: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {reason}"))
}

impl ExperimentConfig {
    /// Parses and validates; errors name the line or the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.market_params(1).validate().map_err(|e| match e {
            superrep::Error::InvalidParam { name, reason } => config_error(&format!("market.{name}"), reason),
            other => config_error("market", other),
        })?;
        self.payoff_spec()?;
        if self.experiment.n_list.is_empty() {
            return Err(config_error("experiment.n_list", "must list at least one horizon"));
        }
        if let Some(n) = self.experiment.n_list.iter().find(|&&n| n == 0) {
            return Err(config_error("experiment.n_list", format!("horizons must be positive, got {n}")));
        }
        if self.dp.nx < 3 || self.dp.nx % 2 == 0 {
            return Err(config_error("dp.nx", "must be odd and at least 3"));
        }
        if self.dp.nz == Some(0) {
            return Err(config_error("dp.nz", "must be positive"));
        }
        if self.dual.nu_over_sigma.iter().any(|v| !(*v > 0.0)) {
            return Err(config_error("dual.nu_over_sigma", "entries must be positive"));
        }
        if !(self.dual.q_min > 0.0 && self.dual.q_min < 0.5) {
            return Err(config_error("dual.q_min", "must lie in (0, 0.5)"));
        }
        if self.limit.n_space < 5 {
            return Err(config_error("limit.n_space", "must be at least 5"));
        }
        if !(self.limit.nu_sq_max_over_sigma_sq >= 1.0) {
            return Err(config_error("limit.nu_sq_max_over_sigma_sq", "must be at least 1"));
        }
        if self.mc.paths == 0 || self.mc.steps == 0 {
            return Err(config_error("mc", "paths and steps must be positive"));
        }
        if self.mc.thetas.is_empty() {
            return Err(config_error("mc.thetas", "must not be empty"));
        }
        if self.verify.instances == 0 {
            return Err(config_error("verify.instances", "must be positive"));
        }
        if self.output.results_file.is_empty() {
            return Err(config_error("output.results_file", "must not be empty"));
        }
        Ok(())
    }

    pub fn market_params(&self, n_steps: usize) -> MarketParams {
        let m = &self.market;
        MarketParams {
            p0: m.p0,
            sigma: m.sigma,
            n_steps,
            depth: m.depth,
            resilience: m.resilience,
            perm_impact: m.perm_impact,
            x0: m.x0,
            zeta0: m.zeta0,
            xi0: m.xi0,
            frictionless: m.frictionless,
        }
    }

    pub fn payoff_spec(&self) -> Result<PayoffSpec> {
        let p = &self.payoff;
        let mut spec = match p.kind {
            PayoffName::Call => PayoffSpec::call(p.strike),
            PayoffName::Put => PayoffSpec::put(p.strike),
            PayoffName::LookbackMax => PayoffSpec::lookback(),
            PayoffName::AsianMean => PayoffSpec::asian(p.strike),
            PayoffName::CustomTerminal => {
                let points = p
                    .points
                    .as_ref()
                    .ok_or_else(|| config_error("payoff.points", "required for custom_terminal"))?;
                let table = TerminalTable::new(points.iter().map(|[x, y]| (*x, *y)).collect())
                    .map_err(|e| config_error("payoff.points", e))?;
                PayoffSpec::custom(table)
            }
        };
        if p.points.is_some() && p.kind != PayoffName::CustomTerminal {
            return Err(config_error("payoff.points", "only valid for custom_terminal"));
        }
        if let Some(l) = p.lipschitz {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(config_error("payoff.lipschitz", "must be finite and nonnegative"));
            }
            spec.lipschitz_l = l;
        }
        Ok(spec)
    }

    pub fn dp_grids(&self, seed: u64) -> DpGrids {
        let d = &self.dp;
        DpGrids {
            nx: d.nx,
            nz: d.nz,
            x_max: d.x_max,
            zeta_max: d.zeta_max,
            refine: d.refine,
            mode: d.lattice.map(|l| match l {
                LatticeName::Terminal => LatticeMode::Terminal,
                LatticeName::RunningMax => LatticeMode::RunningMax,
                LatticeName::RunningSum => LatticeMode::RunningSum,
                LatticeName::FullTree => LatticeMode::FullTree,
            }),
            certify_paths: d.certify_paths,
            certify_seed: seed,
            slack_tolerance: d.slack_tolerance,
        }
    }

    pub fn kusuoka_options(&self, seed: u64) -> KusuokaOptions {
        KusuokaOptions {
            q_min: self.dual.q_min,
            exact_max_steps: self.dual.exact_max_steps,
            mc_paths: self.dual.mc_paths,
            seed,
            ..KusuokaOptions::default()
        }
    }

    pub fn limit_problem(&self) -> Result<LimitProblem> {
        let mut problem = LimitProblem::from_market(&self.market_params(1), &self.payoff_spec()?)?;
        problem.nu_sq_max = self.limit.nu_sq_max_over_sigma_sq * problem.sigma_sq;
        Ok(problem)
    }

    pub fn hjb_grid(&self, problem: &LimitProblem) -> HjbGrid {
        HjbGrid {
            cap_tolerance: self.limit.cap_tolerance,
            ..HjbGrid::around(problem, self.limit.n_space)
        }
    }

    pub fn mc_config(&self, seed: u64) -> McConfig {
        McConfig {
            n_paths: self.mc.paths,
            n_steps: self.mc.steps,
            seed,
            step_halving: self.mc.step_halving,
        }
    }

    /// Hex SHA-256 of the canonical TOML form for `mode`, excluding the
    /// output location.
    pub fn digest(&self, mode: Mode) -> String {
        let canonical = Self {
            experiment: ExperimentSection {
                mode: Some(mode),
                ..self.experiment.clone()
            },
            output: OutputSection::default(),
            ..self.clone()
        };
        let text = toml::to_string(&canonical).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn results_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.results_file)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.market_params(8), MarketParams::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::parse("[market]\nsigma = 1.0\nvolatility = 2.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("volatility") && msg.contains("line 3"), "{msg}");
        let err = ExperimentConfig::parse("[markets]\n").unwrap_err();
        assert!(err.to_string().contains("markets"));
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let err = ExperimentConfig::parse("[market]\nresilience = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("market.resilience"), "{err}");
        let err = ExperimentConfig::parse("[dp]\nnx = 40\n").unwrap_err();
        assert!(err.to_string().contains("dp.nx"));
        let err = ExperimentConfig::parse("[payoff]\nkind = \"custom_terminal\"\n").unwrap_err();
        assert!(err.to_string().contains("payoff.points"));
    }

    #[test]
    fn digest_ignores_output_and_tracks_content() {
        let a = ExperimentConfig::parse("[output]\ndir = \"a\"\n").unwrap();
        let b = ExperimentConfig::parse("[output]\ndir = \"b\"\n").unwrap();
        let c = ExperimentConfig::parse("[experiment]\nseed = 1\n").unwrap();
        assert_eq!(a.digest(Mode::PrimalDp), b.digest(Mode::PrimalDp));
        assert_ne!(a.digest(Mode::PrimalDp), a.digest(Mode::DualBound));
        assert_ne!(a.digest(Mode::PrimalDp), c.digest(Mode::PrimalDp));
        assert_eq!(a.digest(Mode::PrimalDp).len(), 64);
    }

    #[test]
    fn custom_payoff_table() {
        let c = ExperimentConfig::parse(
            "[payoff]\nkind = \"custom_terminal\"\npoints = [[-1.0, 0.0], [0.0, 0.0], [1.0, 2.0]]\n",
        )
        .unwrap();
        let spec = c.payoff_spec().unwrap();
        assert_eq!(spec.terminal_value(0.5), Some(1.0));
    }
}
