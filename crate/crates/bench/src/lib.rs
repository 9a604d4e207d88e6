//! Shared fixtures for the solver benchmarks.

use superrep::{DpGrids, MarketParams, PayoffSpec};

/// The reference market: `σ = 1`, `δ = 1`, `r = 0.5`, flat start.
pub fn reference_market(n_steps: usize) -> MarketParams {
    MarketParams {
        n_steps,
        sigma: 1.0,
        depth: 1.0,
        resilience: 0.5,
        ..MarketParams::default()
    }
}

pub fn atm_call() -> PayoffSpec {
    PayoffSpec::call(0.0)
}

/// Default grids without the forward-simulation certificate, so that the
/// timing covers the backward induction alone.
pub fn uncertified_grids() -> DpGrids {
    DpGrids {
        certify_paths: 0,
        ..DpGrids::default()
    }
}
