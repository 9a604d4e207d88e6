//! Super-replication of (path-dependent) options in a binomial market with
//! transient price impact.
//!
//! The crate is organised by concern:
//!
//! * [`market`] exact discrete dynamics of price, spread, cash and liquidity
//!   costs, plus the space-time stopping grid used by the hedging constructions.
//! * [`payoff`] payoff functionals on step paths and the knock-out / quadratic
//!   claim pair.
//! * [`dp`] minimax dynamic programming for the super-replication cost and an
//!   exhaustive brute-force oracle for tiny trees.
//! * [`strategy`] explicit hedging strategies (pathwise Doob hedge, constrained
//!   affine strategies, liquidation preamble).
//! * [`duality`] dual objectives and the Kusuoka consistent-price-system
//!   construction yielding certified lower bounds.
//! * [`limit`] the high-resilience scaling-limit control problem: an explicit
//!   HJB solver, the Bachelier reference and a policy-search Monte Carlo
//!   estimator.
//! * [`verify`] a seeded randomized battery for the exact market identities.

pub mod dp;
pub mod duality;
pub mod error;
pub mod limit;
pub mod market;
pub mod mc;
pub mod payoff;
pub mod strategy;
pub mod verify;

pub use dp::{
    brute_force_cost, superreplication_cost, tree_index, Certificate, DiscretizationReport,
    DpGrids, DpPolicy, LatticeMode, PriceResult,
};
pub use duality::{
    dual_objective_temporary, dual_objective_transient, kusuoka_certificate, kusuoka_dual_triple,
    kusuoka_lower_bound, mu_weights, terminal_prices_under_q, ConstantVol, DualCertificate,
    FeasibilityReport, KusuokaBound, KusuokaOptions, MuWeights, TimeRampVol, VolProfile,
};
pub use error::{Error, Result};
pub use limit::{
    bachelier_reference, f_of_z, hjb_solve, hjb_value, limit_value_mc, ControlField, HjbGrid,
    HjbResult, LimitProblem, McConfig, McResult, OptionKind, PolicyFamily,
};
pub use market::{
    cash_step, discretize_path, fundamental_path, liquidity_cost, spread_closed_form,
    spread_step, stopping_grid, terminal_wealth, terminal_wealth_gains_form, wealth_path,
    MarketParams, PathPrefix, PortfolioState, SteppedPath, StoppingGrid,
};
pub use payoff::{
    claims, evaluate_payoff, quadratic_claim, skorohod_distance_upper, ClaimPair, PayoffKind,
    PayoffSpec, TerminalTable,
};
pub use strategy::{
    affine_constrained_strategy, calibrate_lambda0, check_doob_hedge, doob_quadratic_hedge,
    liquidation_preamble, AffineStrategy, DoobCheck, DoobHedge, Flat, LiquidationPreamble,
    Strategy,
};
pub use verify::{identity_suite, IdentityCheck};
