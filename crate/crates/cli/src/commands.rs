use std::path::PathBuf;

use pairlim_core::curve::{uniform_grid, LimitCurve};
use pairlim_core::limits::{
    clt_diffusion, critical_equilibrium, critical_ode, crn_fixed_point, h_infinity,
    limit_profile, overloaded_equilibrium, overloaded_ode, profile_at, solve_h,
};
use pairlim_core::pipelines::{self as pl, DEFAULT_SEED};
use pairlim_core::queues::{BirthDeathSpec, QueueKind};
use pairlim_core::ssa::{replicate, SimConfig, StopRule};
use pairlim_core::verify::{convergence_table, VerdictReport, VerifyError};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, RegimeSection};
use crate::output::{real, Output, Stamp, VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn verify_err(e: VerifyError) -> CliError {
    match e {
        VerifyError::InvalidSetup(m) => CliError::Usage(m),
        VerifyError::Model(m) => CliError::Config(ConfigError::Model(m)),
        e => runtime(e),
    }
}

/// Everything a command needs besides its own arguments.
pub struct Context {
    pub config: ExperimentConfig,
    /// Whether a config file was given; verify falls back to the acceptance
    /// settings otherwise.
    pub from_file: bool,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Context {
    fn output(&self) -> Result<Output, CliError> {
        let stamp = Stamp {
            config_hash: self.config.hash(),
            seed: self.config.seed,
        };
        Output::new(&self.out, stamp).map_err(runtime)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    tool: String,
    command: String,
    config_sha256: String,
    seed: u64,
    replications: usize,
    regime: String,
    timescale: String,
    n: u64,
    streams: Vec<String>,
    events: Vec<u64>,
    files: Vec<String>,
}

pub fn simulate(ctx: &Context) -> Result<i32, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let n = cfg.single_n()?;
    let model = cfg.model(n)?;
    let init = cfg.initial_state(&model)?;
    let ts = cfg.timescale();
    let sim = SimConfig::new(cfg.horizon, ts, uniform_grid(cfg.horizon, cfg.grid_points), cfg.seed);
    sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let stop = cfg.stop_level.map_or(StopRule::None, StopRule::TauA);
    let trajs = replicate(&model, &init, &sim, stop, cfg.replications).map_err(runtime)?;

    let mut out = ctx.output()?;
    let nt = model.num_types();
    let mut columns = vec!["time".to_string()];
    columns.extend((1..=nt).map(|j| format!("f_{j}")));
    columns.push("z".into());
    for (i, t) in trajs.iter().enumerate() {
        let mut extra = vec![
            format!("replicate {i} stream {},{i}", cfg.seed),
            format!("regime {} timescale {:?} n {n}", cfg.regime.name(), ts).to_lowercase(),
        ];
        if let Some((_, at)) = t.stopped_at {
            extra.push(format!("stopped at {}", real(at)));
        }
        let rows = t.samples.iter().map(|s| {
            let mut row = vec![real(s.time)];
            row.extend(s.state.f.iter().map(u64::to_string));
            row.push(s.state.z.to_string());
            row
        });
        out.csv(&format!("traj_{i:04}.csv"), &extra, &columns, rows)
            .map_err(runtime)?;
    }
    out.toml("config.toml", cfg).map_err(runtime)?;
    let manifest = Manifest {
        tool: format!("pairlim {VERSION}"),
        command: "simulate".into(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        replications: cfg.replications,
        regime: cfg.regime.name().into(),
        timescale: format!("{ts:?}").to_lowercase(),
        n,
        streams: (0..trajs.len()).map(|i| format!("{},{i}", cfg.seed)).collect(),
        events: trajs.iter().map(|t| t.event_count).collect(),
        files: out.file_names(),
    };
    out.toml("manifest.toml", &manifest).map_err(runtime)?;
    ctx.say(format!(
        "simulated {} replicate(s) of N = {n}, {} events in total",
        trajs.len(),
        manifest.events.iter().sum::<u64>()
    ));
    Ok(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LimitKind {
    H,
    Profile,
    Overloaded,
    Critical,
    Clt,
    Equilibria,
}

fn curve_rows(curve: &LimitCurve) -> Vec<Vec<String>> {
    curve
        .grid
        .iter()
        .zip(&curve.values)
        .map(|(t, v)| std::iter::once(real(*t)).chain(v.iter().map(|x| real(*x))).collect())
        .collect()
}

fn columns(first: &[&str], prefix: &str, j: usize) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain((1..=j).map(|k| format!("{prefix}_{k}")))
        .collect()
}

pub fn limit(ctx: &Context, which: LimitKind) -> Result<i32, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    if which == LimitKind::Equilibria {
        return equilibria(ctx);
    }
    let p = cfg.params()?;
    let nt = p.num_types();
    let grid = uniform_grid(cfg.horizon, cfg.grid_points);
    let f0 = cfg.initial_fractions()?;
    let mut out = ctx.output()?;
    let lim = |e: pairlim_core::limits::LimitError| runtime(e);
    match which {
        LimitKind::H | LimitKind::Profile => {
            if cfg.regime != RegimeSection::Dynamic {
                return Err(CliError::Usage("the mass curve needs the dynamic regime".into()));
            }
            let h = solve_h(&p, f0.iter().sum(), &grid).map_err(lim)?;
            if which == LimitKind::H {
                out.csv("limit_h.csv", &[], &columns(&["time", "H"], "", 0), curve_rows(&h))
            } else {
                let prof = limit_profile(&p, &h).map_err(lim)?;
                let rows = curve_rows(&prof)
                    .into_iter()
                    .zip(&h.values)
                    .map(|(mut row, hv)| {
                        row.insert(1, real(hv[0]));
                        row
                    });
                out.csv("limit_profile.csv", &[], &columns(&["time", "H"], "f", nt), rows)
            }
        }
        LimitKind::Overloaded => {
            let RegimeSection::Overloaded { r } = cfg.regime else {
                return Err(CliError::Usage("the overloaded limit needs regime overloaded".into()));
            };
            let c = overloaded_ode(&p, r, &f0, &grid).map_err(lim)?;
            out.csv("limit_overloaded.csv", &[], &columns(&["time"], "f", nt), curve_rows(&c))
        }
        LimitKind::Critical | LimitKind::Clt => {
            if cfg.regime != RegimeSection::Critical {
                return Err(CliError::Usage("this limit needs regime critical".into()));
            }
            let c = critical_ode(&p, &f0, &grid).map_err(lim)?;
            if which == LimitKind::Critical {
                out.csv("limit_critical.csv", &[], &columns(&["time"], "fbar", nt), curve_rows(&c))
            } else {
                let path = clt_diffusion(&p, &c, &vec![0.0; nt], &grid, cfg.seed).map_err(lim)?;
                let curve = LimitCurve::new(path.grid, path.values);
                out.csv(
                    "limit_clt.csv",
                    &[format!("diffusion stream {},0", cfg.seed)],
                    &columns(&["time"], "x", nt),
                    curve_rows(&curve),
                )
            }
        }
        LimitKind::Equilibria => unreachable!(),
    }
    .map_err(runtime)?;
    ctx.say(format!("wrote {}", out.file_names().join(", ")));
    Ok(0)
}

#[derive(Serialize)]
struct Equilibria {
    h_infinity: f64,
    profile_at_h_infinity: Vec<f64>,
    critical: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    overloaded: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    crn: Option<Crn>,
}

#[derive(Serialize)]
struct Crn {
    n: u64,
    free_particles: Vec<f64>,
    paired_particles: Vec<f64>,
    free_agents: f64,
}

pub fn equilibria(ctx: &Context) -> Result<i32, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let p = cfg.params()?;
    let h_inf = h_infinity(&p).map_err(runtime)?;
    let overloaded = match cfg.regime {
        RegimeSection::Overloaded { r } => Some(overloaded_equilibrium(&p, r).map_err(runtime)?),
        _ => None,
    };
    let crn = match (cfg.regime, cfg.n) {
        (RegimeSection::Dynamic, Some(n)) => {
            let fp = crn_fixed_point(&cfg.model(n)?).map_err(runtime)?;
            Some(Crn {
                n,
                free_particles: fp.u,
                paired_particles: fp.v,
                free_agents: fp.w,
            })
        }
        _ => None,
    };
    let eq = Equilibria {
        h_infinity: h_inf,
        profile_at_h_infinity: profile_at(&p.rhos(), &p.c, p.rho0()),
        critical: critical_equilibrium(&p),
        overloaded,
        crn,
    };
    let mut out = ctx.output()?;
    out.toml("equilibria.toml", &eq).map_err(runtime)?;
    ctx.say(format!("H_inf = {}", real(h_inf)));
    Ok(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    Stationary,
    DetailedBalance,
    GlobalBalance,
    HEquilibrium,
    CriticalEquilibrium,
    QueuesMm1,
    QueuesMminf,
    MassLln,
    Collapse,
    Occupation,
    DriftBalance,
    CriticalLln,
    Clt,
    OverloadedLln,
    DominanceLemcl1,
    DominanceLem1op,
    CouplingPropcoup,
    FastAgents,
}

impl Claim {
    /// Dependency order: exact laws and solvers before the Monte Carlo checks
    /// that rely on them.
    pub const ALL: [Claim; 18] = [
        Claim::Stationary,
        Claim::DetailedBalance,
        Claim::GlobalBalance,
        Claim::HEquilibrium,
        Claim::CriticalEquilibrium,
        Claim::QueuesMm1,
        Claim::QueuesMminf,
        Claim::MassLln,
        Claim::Collapse,
        Claim::Occupation,
        Claim::DriftBalance,
        Claim::CriticalLln,
        Claim::Clt,
        Claim::OverloadedLln,
        Claim::DominanceLemcl1,
        Claim::DominanceLem1op,
        Claim::CouplingPropcoup,
        Claim::FastAgents,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Claim::Stationary => "stationary",
            Claim::DetailedBalance => "detailed-balance",
            Claim::GlobalBalance => "global-balance",
            Claim::HEquilibrium => "h-equilibrium",
            Claim::CriticalEquilibrium => "critical-equilibrium",
            Claim::QueuesMm1 => "queues-mm1",
            Claim::QueuesMminf => "queues-mminf",
            Claim::MassLln => "mass-lln",
            Claim::Collapse => "collapse",
            Claim::Occupation => "occupation",
            Claim::DriftBalance => "drift-balance",
            Claim::CriticalLln => "critical-lln",
            Claim::Clt => "clt",
            Claim::OverloadedLln => "overloaded-lln",
            Claim::DominanceLemcl1 => "dominance-lemcl1",
            Claim::DominanceLem1op => "dominance-lem1op",
            Claim::CouplingPropcoup => "coupling-propcoup",
            Claim::FastAgents => "fast-agents",
        }
    }

    pub fn parse(s: &str) -> Option<Claim> {
        Claim::ALL.into_iter().find(|c| c.name() == s)
    }
}

fn require_regime(cfg: &ExperimentConfig, want: &str) -> Result<(), CliError> {
    if cfg.regime.name() == want {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "this claim needs regime {want}, config has {}",
            cfg.regime.name()
        )))
    }
}

fn dynamic_setup(cfg: &ExperimentConfig, n: u64) -> Result<pl::DynamicSetup, CliError> {
    require_regime(cfg, "dynamic")?;
    Ok(pl::DynamicSetup {
        params: cfg.params()?,
        n,
        f0: cfg.initial_fractions()?,
        z0: cfg.z0(),
        horizon: cfg.horizon,
        grid_points: cfg.grid_points,
        windows: cfg.windows,
        replications: cfg.replications,
        seed: cfg.seed,
    })
}

fn critical_setup(cfg: &ExperimentConfig, n: u64) -> Result<pl::CriticalSetup, CliError> {
    require_regime(cfg, "critical")?;
    Ok(pl::CriticalSetup {
        params: cfg.params()?,
        n,
        f0bar: cfg.initial_fractions()?,
        horizon: cfg.horizon,
        grid_points: cfg.grid_points,
        replications: cfg.replications,
        seed: cfg.seed,
    })
}

fn queue_setup(cfg: &ExperimentConfig, kind: QueueKind) -> Result<pl::QueueSetup, CliError> {
    let q = cfg
        .queue
        .as_ref()
        .ok_or_else(|| CliError::Usage("queue claims need a [queue] section".into()))?;
    let spec = BirthDeathSpec::new(kind, q.gamma, q.mu, q.init)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(pl::QueueSetup {
        spec,
        level: q.level,
        replications: cfg.replications,
        seed: cfg.seed,
    })
}

fn dominance_setup(cfg: &ExperimentConfig, n: u64, raw_per_unit: f64) -> Result<pl::DominanceSetup, CliError> {
    Ok(pl::DominanceSetup {
        params: cfg.params()?,
        n,
        f0: cfg.initial_fractions()?,
        paths: cfg.replications,
        horizon: cfg.horizon * raw_per_unit,
        seed: cfg.seed,
    })
}

/// Runs one claim with the acceptance settings.
fn run_default(claim: Claim, dynamic: &mut Option<pl::DynamicRun>) -> Result<VerdictReport, VerifyError> {
    let mut shared = |f: fn(&pl::DynamicRun) -> Result<VerdictReport, VerifyError>| {
        if dynamic.is_none() {
            *dynamic = Some(pl::run_dynamic(&pl::DynamicSetup::acceptance())?);
        }
        f(dynamic.as_ref().unwrap())
    };
    match claim {
        Claim::Stationary => pl::stationary_exactness(&pl::StationarySetup::acceptance()),
        Claim::DetailedBalance => pl::detailed_balance(&pl::enumerable_critical_models(DEFAULT_SEED)),
        Claim::GlobalBalance => pl::global_balance(&pl::global_balance_instance(), 20),
        Claim::HEquilibrium => pl::h_equilibrium(&pl::canonical_params()),
        Claim::CriticalEquilibrium => {
            pl::critical_equilibrium_check(&pl::canonical_params(), &[0.5, 0.3])
        }
        Claim::QueuesMm1 => pl::queue_hitting("queues-mm1", &pl::QueueSetup::mm1()),
        Claim::QueuesMminf => pl::queue_hitting("queues-mminf", &pl::QueueSetup::mminf()),
        Claim::MassLln => shared(pl::mass_lln),
        Claim::Collapse => shared(pl::collapse_pinned),
        Claim::Occupation => shared(pl::occupation),
        Claim::DriftBalance => shared(pl::drift_balance),
        Claim::CriticalLln => pl::critical_lln(&pl::CriticalSetup::acceptance()),
        Claim::Clt => pl::clt_marginal_test(&pl::CriticalSetup::clt()),
        Claim::OverloadedLln => pl::overloaded_lln(&pl::OverloadedSetup::acceptance()),
        Claim::DominanceLemcl1 => pl::dominance_lemcl1(&pl::DominanceSetup::lemcl1(), 0.4),
        Claim::DominanceLem1op => pl::dominance_lem1op(&pl::DominanceSetup::lem1op(), 0.1),
        Claim::CouplingPropcoup => pl::coupling_propcoup(&pl::DominanceSetup::propcoup()),
        Claim::FastAgents => pl::fast_agents(&pl::FastAgentSetup::acceptance()),
    }
}

/// Runs one claim on the instance described by the config.
fn run_configured(claim: Claim, cfg: &ExperimentConfig) -> Result<VerdictReport, CliError> {
    cfg.validate()?;
    let v = verify_err;
    let n = || cfg.single_n();
    let report = match claim {
        Claim::Stationary => {
            require_regime(cfg, "critical")?;
            pl::stationary_exactness(&pl::StationarySetup {
                params: cfg.params()?,
                n: n()?,
                events: cfg.events.unwrap_or(1_000_000),
                seed: cfg.seed,
            })
        }
        Claim::DetailedBalance => {
            require_regime(cfg, "critical")?;
            pl::detailed_balance(&[cfg.model(n()?)?])
        }
        Claim::GlobalBalance => {
            require_regime(cfg, "dynamic")?;
            pl::global_balance(&cfg.model(n()?)?, cfg.z_cap.unwrap_or(20))
        }
        Claim::HEquilibrium => pl::h_equilibrium(&cfg.params()?),
        Claim::CriticalEquilibrium => {
            pl::critical_equilibrium_check(&cfg.params()?, &cfg.initial_fractions()?)
        }
        Claim::QueuesMm1 => pl::queue_hitting("queues-mm1", &queue_setup(cfg, QueueKind::MM1)?),
        Claim::QueuesMminf => {
            pl::queue_hitting("queues-mminf", &queue_setup(cfg, QueueKind::MMInf)?)
        }
        Claim::MassLln | Claim::Collapse | Claim::Occupation | Claim::DriftBalance => {
            let run = pl::run_dynamic(&dynamic_setup(cfg, n()?)?).map_err(v)?;
            match claim {
                Claim::MassLln => pl::mass_lln(&run),
                Claim::Collapse => pl::collapse(&run),
                Claim::Occupation => pl::occupation(&run),
                _ => pl::drift_balance(&run),
            }
        }
        Claim::CriticalLln => pl::critical_lln(&critical_setup(cfg, n()?)?),
        Claim::Clt => pl::clt_marginal_test(&critical_setup(cfg, n()?)?),
        Claim::OverloadedLln => {
            let RegimeSection::Overloaded { r } = cfg.regime else {
                return Err(CliError::Usage("this claim needs regime overloaded".into()));
            };
            pl::overloaded_lln(&pl::OverloadedSetup {
                params: cfg.params()?,
                r,
                n: n()?,
                f0: cfg.initial_fractions()?,
                horizon: cfg.horizon,
                grid_points: cfg.grid_points,
                replications: cfg.replications,
                seed: cfg.seed,
            })
        }
        Claim::DominanceLemcl1 => {
            let RegimeSection::Overloaded { r } = cfg.regime else {
                return Err(CliError::Usage("this claim needs regime overloaded".into()));
            };
            pl::dominance_lemcl1(&dominance_setup(cfg, n()?, 1.0)?, r)
        }
        Claim::DominanceLem1op => {
            require_regime(cfg, "dynamic")?;
            let n = n()?;
            pl::dominance_lem1op(&dominance_setup(cfg, n, n as f64)?, cfg.stop_level.unwrap_or(0.1))
        }
        Claim::CouplingPropcoup => {
            require_regime(cfg, "critical")?;
            let n = n()?;
            pl::coupling_propcoup(&dominance_setup(cfg, n, 1.0 / (n as f64).sqrt())?)
        }
        Claim::FastAgents => {
            require_regime(cfg, "dynamic")?;
            pl::fast_agents(&pl::FastAgentSetup {
                params: cfg.params()?,
                ns: cfg.n_values()?,
                f0: cfg.initial_fractions()?,
                z0: cfg.z0(),
                horizon: cfg.horizon,
                stop_level: cfg.stop_level.unwrap_or(0.1),
                replications: cfg.replications,
                seed: cfg.seed,
            })
        }
    };
    report.map_err(v)
}

pub fn verify(ctx: &Context, claim: &str) -> Result<i32, CliError> {
    let claims: Vec<Claim> = if claim == "all" {
        Claim::ALL.to_vec()
    } else {
        vec![Claim::parse(claim).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown claim `{claim}`; expected all or one of: {}",
                Claim::ALL.map(|c| c.name()).join(", ")
            ))
        })?]
    };
    if ctx.from_file && claim == "all" {
        return Err(CliError::Usage(
            "`all` runs the fixed acceptance settings and takes no config".into(),
        ));
    }
    let mut out = ctx.output()?;
    let mut shared = None;
    let mut failed = 0;
    for c in claims {
        let report = if ctx.from_file {
            run_configured(c, &ctx.config)?
        } else {
            run_default(c, &mut shared).map_err(verify_err)?
        };
        ctx.say(report.line());
        if !report.pass {
            failed += 1;
        }
        out.json(&format!("verdict_{}.json", c.name()), &report)
            .map_err(runtime)?;
    }
    Ok(if failed == 0 { 0 } else { 4 })
}

pub fn sweep(ctx: &Context, claim: &str) -> Result<i32, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let ns = cfg.n_list.clone().ok_or_else(|| CliError::Usage("sweep needs `n_list`".into()))?;
    let claim = Claim::parse(claim)
        .filter(|c| {
            matches!(
                c,
                Claim::MassLln | Claim::Collapse | Claim::Occupation | Claim::CriticalLln
            )
        })
        .ok_or_else(|| {
            CliError::Usage(format!(
                "sweep supports mass-lln, collapse, occupation and critical-lln, not `{claim}`"
            ))
        })?;
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for (i, &n) in ns.iter().enumerate() {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(i as u64);
        c.n = Some(n);
        c.n_list = None;
        seeds.push(c.seed);
        let r = run_configured(claim, &c)?;
        let stat = match claim {
            Claim::MassLln | Claim::CriticalLln => r.details["median_sup_distance"],
            _ => r.observed,
        };
        rows.push((n, stat));
    }
    let table = convergence_table(claim.name(), &rows).with_runs(cfg.replications, seeds);
    let mut out = ctx.output()?;
    out.csv(
        &format!("sweep_{}.csv", claim.name()),
        &[format!("claim {}", claim.name())],
        &["n".into(), "statistic".into()],
        rows.iter().map(|(n, s)| vec![n.to_string(), real(*s)]),
    )
    .map_err(runtime)?;
    out.json(&format!("verdict_sweep_{}.json", claim.name()), &table)
        .map_err(runtime)?;
    ctx.say(table.line());
    Ok(if table.pass { 0 } else { 4 })
}

/// Machine-readable error record.
pub fn error_record(e: &CliError) -> String {
    serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    })
    .to_string()
}
