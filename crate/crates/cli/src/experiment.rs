//! Dispatch of configured experiments to the solvers, with result caching.

use std::time::Instant;

use superrep::{
    hjb_solve, identity_suite, kusuoka_lower_bound, limit_value_mc, superreplication_cost,
    ConstantVol, ControlField, PolicyFamily,
};

use crate::config::{ExperimentConfig, Mode, PolicyName};
use crate::error::Result;
use crate::results::{ResultRow, ResultStore, Status};
use crate::table::{convergence_table, ConvergenceTable};

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub no_cache: bool,
    pub out_dir: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: Mode,
    pub config_digest: String,
    pub study_id: String,
    pub rows: Vec<ResultRow>,
    pub from_cache: bool,
    /// Present for convergence studies.
    pub table: Option<ConvergenceTable>,
}

impl RunOutcome {
    pub fn flagged(&self) -> bool {
        self.rows.iter().any(|r| r.status == Status::Warn)
    }

    /// 0 when every row is clean, 2 when some numerical flag was raised.
    pub fn exit_code(&self) -> i32 {
        if self.flagged() {
            2
        } else {
            0
        }
    }
}

fn apply_overrides(mut config: ExperimentConfig, options: &RunOptions) -> ExperimentConfig {
    if let Some(seed) = options.seed {
        config.experiment.seed = seed;
    }
    if let Some(dir) = &options.out_dir {
        config.output.dir = dir.clone();
    }
    config
}

/// Runs `mode` for `config` with `options` applied, appending fresh rows to
/// the results store or serving them from it.
pub fn run_experiment(config: &ExperimentConfig, mode: Mode, options: &RunOptions) -> Result<RunOutcome> {
    let config = &apply_overrides(config.clone(), options);
    let digest = config.digest(mode);
    let study_id = config
        .experiment
        .id
        .clone()
        .unwrap_or_else(|| digest[..12].to_string());
    let store = ResultStore::open(&config.results_path())?;
    let cached: Vec<ResultRow> = if options.no_cache {
        Vec::new()
    } else {
        let mut rows: Vec<ResultRow> = store.read()?.into_iter().filter(|r| r.config_digest == digest).collect();
        // Keep the most recent copy of each instance.
        let mut seen = std::collections::HashSet::new();
        rows.reverse();
        rows.retain(|r| seen.insert(r.instance_hash.clone()));
        rows.reverse();
        rows
    };
    let from_cache = !cached.is_empty();
    let rows = if from_cache {
        cached
    } else {
        let mut ctx = Context {
            config,
            mode,
            digest: &digest,
            study_id: &study_id,
            rows: Vec::new(),
        };
        ctx.dispatch()?;
        store.append(&ctx.rows)?;
        ctx.rows
    };
    let table = if mode == Mode::ConvergenceStudy {
        let table = convergence_table(&rows, &study_id)?;
        table.write(&config.output.dir)?;
        Some(table)
    } else {
        None
    };
    Ok(RunOutcome {
        mode,
        config_digest: digest,
        study_id,
        rows,
        from_cache,
        table,
    })
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    mode: Mode,
    digest: &'a str,
    study_id: &'a str,
    rows: Vec<ResultRow>,
}

struct Measured {
    value: f64,
    std_error: f64,
    slack: f64,
    warn: bool,
    note: String,
}

impl Context<'_> {
    fn seed(&self) -> u64 {
        self.config.experiment.seed
    }

    fn push(&mut self, quantity: &str, label: String, n: Option<usize>, started: Instant, m: Measured) {
        self.rows.push(ResultRow {
            instance_hash: ResultRow::instance_hash_of(self.digest, quantity, &label, n),
            config_digest: self.digest.to_string(),
            study_id: self.study_id.to_string(),
            mode: self.mode.name().to_string(),
            quantity: quantity.to_string(),
            label,
            n,
            value: m.value,
            std_error: m.std_error,
            slack: m.slack,
            status: if m.warn { Status::Warn } else { Status::Ok },
            note: m.note,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    fn dispatch(&mut self) -> Result<()> {
        match self.mode {
            Mode::PrimalDp => self.primal(),
            Mode::DualBound => self.dual(),
            Mode::LimitHjb => self.limit_hjb().map(|_| ()),
            Mode::LimitMc => self.limit_mc(false),
            Mode::ConvergenceStudy => {
                self.primal()?;
                self.dual()?;
                if self.config.payoff_spec()?.is_terminal() {
                    self.limit_hjb().map(|_| ())
                } else {
                    // Path-dependent claims only admit policy lower estimates.
                    self.limit_mc(true)
                }
            }
            Mode::IdentitySuite => self.identities(),
        }
    }

    fn primal(&mut self) -> Result<()> {
        let spec = self.config.payoff_spec()?;
        let grids = self.config.dp_grids(self.seed());
        for &n in &self.config.experiment.n_list {
            let started = Instant::now();
            let r = superreplication_cost(&self.config.market_params(n), &spec, &grids)?;
            let note = format!(
                "lattice={} nodes={} nx={} nz={}{}",
                r.report.mode.name(),
                r.report.lattice_nodes,
                r.report.nx,
                r.report.nz,
                r.report.warnings.iter().map(|w| format!("; {w}")).collect::<String>()
            );
            self.push(
                "pi_n",
                String::new(),
                Some(n),
                started,
                Measured {
                    value: r.cost,
                    std_error: 0.0,
                    slack: r.slack(),
                    warn: !r.report.valid,
                    note,
                },
            );
        }
        Ok(())
    }

    fn dual(&mut self) -> Result<()> {
        let spec = self.config.payoff_spec()?;
        let params = self.config.market_params(1);
        let options = self.config.kusuoka_options(self.seed());
        for &factor in &self.config.dual.nu_over_sigma {
            let profile = ConstantVol { nu: factor * params.sigma };
            for &n in &self.config.experiment.n_list {
                let started = Instant::now();
                let b = &kusuoka_lower_bound(&profile, &spec, &params, &[n], &options)?[0];
                let warn = !b.certified();
                let note = format!(
                    "{} alpha_clips={} q_clips={}",
                    if b.exact { "exact" } else { "monte_carlo" },
                    b.alpha_clips,
                    b.q_clips
                );
                let label = format!("nu={factor}sigma");
                for (quantity, value) in [("kusuoka_bound", b.bound), ("kusuoka_sharp", b.sharp_bound)] {
                    self.push(
                        quantity,
                        label.clone(),
                        Some(n),
                        started,
                        Measured {
                            value,
                            std_error: b.std_error,
                            slack: 0.0,
                            warn,
                            note: note.clone(),
                        },
                    );
                }
            }
        }
        Ok(())
    }

    fn limit_hjb(&mut self) -> Result<Option<ControlField>> {
        let problem = self.config.limit_problem()?;
        let grid = self.config.hjb_grid(&problem);
        let started = Instant::now();
        let snapshots = if self.config.limit.surface || self.config.mc.policy == PolicyName::HjbFeedback {
            50
        } else {
            0
        };
        let r = hjb_solve(&problem, &grid, snapshots)?;
        let note = format!(
            "c={} cap_fraction={:.3e} n_space={} n_time={}",
            problem.penalty_c, r.cap_fraction, r.n_space, r.n_time
        );
        self.push(
            "limit_hjb",
            String::new(),
            None,
            started,
            Measured {
                value: r.net_value,
                std_error: 0.0,
                slack: 0.0,
                warn: r.flagged,
                note,
            },
        );
        if self.config.limit.surface {
            if let Some(field) = &r.control {
                self.write_surface(field)?;
            }
        }
        Ok(r.control)
    }

    fn write_surface(&self, field: &ControlField) -> Result<()> {
        let path = self
            .config
            .output
            .dir
            .join(format!("surface_{}.csv", &self.digest[..12]));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "p", "variance"])?;
        for slice in &field.slices {
            for (i, v) in slice.variance.iter().enumerate() {
                let p = field.p_min + field.dp * i as f64;
                w.write_record([slice.time.to_string(), p.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn limit_mc(&mut self, force_constant: bool) -> Result<()> {
        let problem = self.config.limit_problem()?;
        let sigma = self.config.market.sigma;
        let family = if force_constant || self.config.mc.policy == PolicyName::ConstantVol {
            PolicyFamily::ConstantVol(self.config.mc.thetas.iter().map(|t| t * sigma).collect())
        } else {
            let grid = self.config.hjb_grid(&problem);
            let field = hjb_solve(&problem, &grid, 50)?
                .control
                .expect("snapshots were requested");
            PolicyFamily::HjbFeedback {
                field,
                thetas: self.config.mc.thetas.clone(),
            }
        };
        let started = Instant::now();
        let r = limit_value_mc(&problem, &family, &self.config.mc_config(self.seed()))?;
        let note = format!(
            "lower estimate; best_theta={} halving_change={}",
            r.best_theta,
            r.halving_change.map_or("-".to_string(), |h| format!("{h:.3e}"))
        );
        self.push(
            "limit_mc",
            String::new(),
            None,
            started,
            Measured {
                value: r.value,
                std_error: r.std_error,
                slack: 0.0,
                warn: false,
                note,
            },
        );
        Ok(())
    }

    fn identities(&mut self) -> Result<()> {
        let started = Instant::now();
        for check in identity_suite(self.config.verify.instances, self.seed())? {
            let note = format!(
                "instances={} tolerance={:e} {}",
                check.instances,
                check.tolerance,
                if check.relative { "relative" } else { "absolute" }
            );
            self.push(
                "identity",
                check.name.to_string(),
                None,
                started,
                Measured {
                    value: check.max_error,
                    std_error: 0.0,
                    slack: 0.0,
                    warn: !check.passed(),
                    note,
                },
            );
        }
        Ok(())
    }
}
