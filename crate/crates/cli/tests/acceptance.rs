//! Acceptance suite: each criterion prints one PASS/FAIL line with its
//! measured quantities; the process fails if any criterion fails.

use std::time::{Duration, Instant};

use superrep::{
    bachelier_reference, brute_force_cost, calibrate_lambda0, check_doob_hedge, doob_quadratic_hedge,
    evaluate_payoff, fundamental_path, hjb_solve, identity_suite, kusuoka_certificate, kusuoka_lower_bound,
    superreplication_cost, ConstantVol, DpGrids, HjbGrid, KusuokaOptions, LimitProblem, MarketParams,
    OptionKind, PathPrefix, PayoffSpec, TimeRampVol,
};
use superrep_cli::{run_experiment, ExperimentConfig, Mode, RunOptions};

type Outcome = Result<String, String>;

/// Fair-coin backward induction over the hedgeable periods with a
/// worst-case final period (the position entering it is flat).
fn crr_oracle(spec: &PayoffSpec, params: &MarketParams) -> f64 {
    let n = params.n_steps;
    let mut v: Vec<f64> = (0..1u64 << n)
        .map(|bits| evaluate_payoff(spec, &fundamental_path(&PathPrefix::from_bits(bits, n), params).unwrap()))
        .collect();
    for d in (0..n).rev() {
        v = (0..1usize << d)
            .map(|b| {
                let (lo, hi) = (v[b], v[b | (1 << d)]);
                if d + 1 == n {
                    lo.max(hi)
                } else {
                    0.5 * (lo + hi)
                }
            })
            .collect();
    }
    v[0]
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn identities() -> Outcome {
    let checks = identity_suite(1000, 20_240_601).map_err(err)?;
    let worst = checks
        .iter()
        .map(|c| format!("{}: {:.1e}/{:.0e}", c.name, c.max_error, c.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(checks.iter().all(|c| c.passed() && c.instances == 1000), worst)
}

fn frictionless() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for n in [2, 8] {
        for spec in [PayoffSpec::call(0.0), PayoffSpec::put(0.0), PayoffSpec::lookback()] {
            let params = MarketParams {
                n_steps: n,
                frictionless: true,
                perm_impact: 0.0,
                x0: 0.0,
                ..MarketParams::default()
            };
            let r = superreplication_cost(&params, &spec, &DpGrids::default()).map_err(err)?;
            let gap = (r.cost - crr_oracle(&spec, &params)).abs();
            worst = worst.max(gap);
            ok &= gap <= 1e-3 + r.slack();
        }
    }
    ensure(ok, format!("max |DP - CRR| = {worst:.2e} over call/put/lookback, N in {{2, 8}}"))
}

fn oracle_equivalence() -> Outcome {
    // (N, δ, r, ι)
    let cases = [
        (2, 0.5, 0.5, 0.0),
        (3, 2.0, 0.5, 0.0),
        (3, 0.5, 1.0, 0.1),
        (2, 2.0, 1.0, 0.1),
        (3, 0.5, 0.5, 0.1),
        (3, 2.0, 1.0, 0.0),
    ];
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (n, depth, resilience, perm_impact) in cases {
        let params = MarketParams {
            n_steps: n,
            depth,
            resilience,
            perm_impact,
            ..MarketParams::default()
        };
        let spec = PayoffSpec::call(0.0);
        // Both sides search the same position grid.
        let grids = DpGrids {
            nx: 21,
            refine: false,
            ..DpGrids::default()
        };
        let dp = superreplication_cost(&params, &spec, &grids).map_err(err)?;
        let brute = brute_force_cost(&params, &spec, &grids.position_grid(&params, &spec)).map_err(err)?;
        let gap = (dp.cost - brute).abs();
        worst = worst.max(gap);
        ok &= gap <= dp.slack().max(1e-3);
    }
    ensure(ok, format!("max |DP - brute force| = {worst:.2e} on 6 instances"))
}

fn domination() -> Outcome {
    let grids = DpGrids {
        nz: Some(65),
        ..DpGrids::default()
    };
    let spec = PayoffSpec::call(0.0);
    let mut margins = Vec::new();
    let mut ok = true;
    for r in [0.3, 0.7] {
        for depth in [0.5, 2.0] {
            let params = MarketParams {
                n_steps: 6,
                depth,
                resilience: r,
                ..MarketParams::default()
            };
            let transient = superreplication_cost(&params, &spec, &grids).map_err(err)?;
            let temporary = superreplication_cost(&params.temporary_equivalent(), &spec, &grids).map_err(err)?;
            let margin = temporary.cost + temporary.slack() + transient.slack() - transient.cost;
            ok &= margin >= 0.0;
            margins.push(format!("{:.4}", margin));
        }
    }
    ensure(ok, format!("temporary - transient (+slack) = [{}]", margins.join(", ")))
}

fn weak_duality() -> Outcome {
    let spec = PayoffSpec::call(0.0);
    let mut ok = true;
    let mut tightest = f64::INFINITY;
    for n in [8, 12] {
        let params = MarketParams {
            n_steps: n,
            ..MarketParams::default()
        };
        let primal = superreplication_cost(&params, &spec, &DpGrids::default()).map_err(err)?;
        for factor in [0.8, 1.0, 1.2] {
            let profile = ConstantVol { nu: factor * params.sigma };
            let b = &kusuoka_lower_bound(&profile, &spec, &params, &[n], &KusuokaOptions::default()).map_err(err)?[0];
            ok &= b.exact && b.certified();
            let margin = primal.cost + primal.slack() - b.bound.max(b.sharp_bound);
            tightest = tightest.min(margin);
            ok &= margin >= 0.0;
        }
    }
    ensure(ok, format!("min (primal + slack - bound) = {tightest:.4} over N in {{8, 12}}, 3 volatilities"))
}

fn martingale_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut certificates = 0;
    for n in 1..=12 {
        let params = MarketParams {
            n_steps: n,
            ..MarketParams::default()
        };
        let options = KusuokaOptions::default();
        let mut certs = Vec::new();
        for nu in [0.8, 1.0, 1.2] {
            certs.push(kusuoka_certificate(&ConstantVol { nu }, &params, &options).map_err(err)?);
        }
        certs.push(kusuoka_certificate(&TimeRampVol { start: 0.9, end: 1.3 }, &params, &options).map_err(err)?);
        for c in certs.iter().filter(|c| c.q_clips == 0) {
            worst = worst.max(c.martingale_defect());
            certificates += 1;
        }
    }
    ensure(
        certificates == 48 && worst <= 1e-12,
        format!("{certificates} unclipped certificates, max |E_Q[dM | node]| = {worst:.1e}"),
    )
}

fn hjb_bachelier() -> Outcome {
    let target = 0.398_942;
    let exact = bachelier_reference(OptionKind::Call, 0.0, 0.0, 1.0, 1.0).map_err(err)?;
    let mut problem = LimitProblem::from_market(&MarketParams::default(), &PayoffSpec::call(0.0)).map_err(err)?;
    problem.penalty_c = 1e6;
    let coarse = hjb_solve(&problem, &HjbGrid::around(&problem, 201), 0).map_err(err)?;
    let fine_grid = HjbGrid {
        n_time: Some(4 * coarse.n_time),
        ..HjbGrid::around(&problem, 401)
    };
    let fine = hjb_solve(&problem, &fine_grid, 0).map_err(err)?;
    let rel = ((fine.value - target) / target).abs();
    let change = ((fine.value - coarse.value) / fine.value).abs();
    ensure(
        rel < 5e-3 && change < 2e-3 && (exact - target).abs() < 1e-6,
        format!(
            "V = {:.6} (rel err {rel:.1e} vs {target}), refinement change {change:.1e}",
            fine.value
        ),
    )
}

fn doob_certificate() -> Outcome {
    let params = MarketParams {
        n_steps: 256,
        sigma: 1.0,
        depth: 1.0,
        resilience: 0.5,
        ..MarketParams::default()
    };
    let epsilon = 0.3;
    let candidates = [0.1, 0.05, 0.03, 0.02, 0.01, 0.0075, 0.005, 0.003, 0.002, 0.001];
    let lambda0 = calibrate_lambda0(epsilon, &params, &candidates, 20_000, 101)
        .map_err(err)?
        .ok_or("no candidate survives calibration")?;
    let hedge = doob_quadratic_hedge(lambda0, epsilon, &params, lambda0).map_err(err)?;
    let check = check_doob_hedge(&hedge, 100_000, 202).map_err(err)?;
    let capital_exact = hedge.capital == lambda0 * (1.0 + 36.0 * params.sigma * params.sigma);
    ensure(
        check.violations == 0 && check.paths == 100_000 && capital_exact,
        format!(
            "lambda0 = {lambda0}, capital = {}, violations {}/{} on fresh paths, min surplus {:.4}",
            hedge.capital, check.violations, check.paths, check.min_surplus
        ),
    )
}

fn study_config(n_list: &[usize], id: &str, certify_paths: usize) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.market.sigma = 1.0;
    config.market.depth = 1.0;
    config.market.resilience = 0.5;
    config.experiment.n_list = n_list.to_vec();
    config.experiment.id = Some(id.to_string());
    config.dp.certify_paths = certify_paths;
    config
}

fn convergence_trend() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let options = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let outcome = run_experiment(&study_config(&[8, 16, 32], "acceptance", 20_000), Mode::ConvergenceStudy, &options)
        .map_err(err)?;
    let table = outcome.table.ok_or("no table")?;
    let rows = &table.rows;
    let below = rows.iter().all(|r| r.lower_bound.is_some_and(|lb| lb < r.primal));
    let shrinks = rows.last().unwrap().gap < rows[0].gap;
    let summary = rows
        .iter()
        .map(|r| {
            format!(
                "N={}: pi={:.4} lb={:.4} gap={:.4}",
                r.n,
                r.primal,
                r.lower_bound.unwrap_or(f64::NAN),
                r.gap
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    ensure(
        below && shrinks && !outcome.rows.is_empty() && !outcome.rows.iter().any(|r| r.status != superrep_cli::Status::Ok),
        format!("limit {:.4}; {summary}", rows[0].limit),
    )
}

fn reproducibility() -> Outcome {
    let config = study_config(&[4, 8], "repro", 2_000);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let options = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            seed: Some(7),
            no_cache: true,
        };
        runs.push(run_experiment(&config, Mode::ConvergenceStudy, &options).map_err(err)?);
        // A cached replay from the same store must agree as well.
        let cached = run_experiment(&config, Mode::ConvergenceStudy, &RunOptions { no_cache: false, ..options })
            .map_err(err)?;
        runs.push(cached);
    }
    let first = &runs[0].rows;
    let identical = runs.iter().all(|r| {
        r.rows.len() == first.len()
            && r.rows.iter().zip(first).all(|(a, b)| {
                a.same_result(b) && a.value.to_bits() == b.value.to_bits() && a.std_error.to_bits() == b.std_error.to_bits()
            })
    });
    ensure(
        identical && runs[1].from_cache && !runs[2].from_cache,
        format!("{} rows identical across 2 fresh and 2 cached runs", first.len()),
    )
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("algebraic identity suite", Duration::from_secs(30), identities),
        ("frictionless reduction", Duration::from_secs(60), frictionless),
        ("oracle equivalence", Duration::from_secs(120), oracle_equivalence),
        ("cost domination", Duration::from_secs(300), domination),
        ("weak duality", Duration::from_secs(300), weak_duality),
        ("martingale exactness", Duration::from_secs(60), martingale_exactness),
        ("HJB vs Bachelier", Duration::from_secs(60), hjb_bachelier),
        ("Doob hedge certificate", Duration::from_secs(300), doob_certificate),
        ("convergence trend", Duration::from_secs(1800), convergence_trend),
        ("reproducibility", Duration::from_secs(60), reproducibility),
    ];
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = run();
        let elapsed = started.elapsed();
        let in_time = elapsed <= *budget;
        let (tag, detail) = match (&outcome, in_time) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d} [over the {}s budget]", budget.as_secs())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failures += 1;
        }
        println!("[{tag}] {:>2}. {name} ({:.1}s): {detail}", i + 1, elapsed.as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
