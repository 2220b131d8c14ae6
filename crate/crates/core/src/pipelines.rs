//! End-to-end checks: each function builds its instance, runs simulations
//! and limit solvers, and returns a [`VerdictReport`]. The `acceptance()`
//! constructors hold the desk-scale settings of the acceptance suite.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{
    couple_coordinates, couple_with_queue, coupling_experiment, lem1op_queue, lemcl1_queue,
    propcoup_bound,
};
use crate::curve::{uniform_grid, LimitCurve};
use crate::limits::{
    clt_terminal_samples, clt_variance, critical_drift, critical_equilibrium, critical_ode,
    h_infinity, overloaded_equilibrium, overloaded_ode, phi, solve_h,
};
use crate::model::{build_finite, FiniteModel, ModelParams, RegimeRequest, State};
use crate::queues::{scaled_hitting_law, BirthDeathSpec};
use crate::rng::stream_rng;
use crate::ssa::{
    empirical_occupation, equal_windows, occupancy_law, replicate, scaled_free_mass,
    scaled_free_profile, state_occupancy, EmpiricalOccupation, SimConfig, StopRule, Timescale,
    Trajectory,
};
use crate::stationary::{check_detailed_balance, enumerate_z, global_balance_residual};
use crate::verify::{
    collapse_test, convergence_table, drift_balance_test, exponential_fit, ks_two_sample,
    ks_two_sample_critical, occupation_vs_poisson, path_sup_distance, quantile, tv_distance,
    VerdictReport, VerifyError,
};

pub const DEFAULT_SEED: u64 = 20_240_917;

/// `c = (0.5, 0.5)`, `lambda = (1, 2)`, `eta = (1, 1)`, `beta = 1`, `delta = 2`.
pub fn canonical_params() -> ModelParams {
    ModelParams::new(vec![0.5, 0.5], vec![1.0, 2.0], vec![1.0, 1.0], 1.0, 2.0)
        .expect("canonical parameters are valid")
}

fn fraction_passing(distances: &[f64], tol: f64) -> f64 {
    distances.iter().filter(|&&d| d <= tol).count() as f64 / distances.len() as f64
}

fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

// ---------------------------------------------------------------------------
// Dynamic regime

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicSetup {
    pub params: ModelParams,
    pub n: u64,
    pub f0: Vec<f64>,
    pub z0: u64,
    pub horizon: f64,
    pub grid_points: usize,
    pub windows: usize,
    pub replications: usize,
    pub seed: u64,
}

impl DynamicSetup {
    /// Starts off the collapse curve and below the equilibrium mass.
    pub fn acceptance() -> Self {
        Self {
            params: canonical_params(),
            n: 2000,
            f0: vec![0.05, 0.30],
            z0: 0,
            horizon: 3.0,
            grid_points: 301,
            windows: 20,
            replications: 20,
            seed: DEFAULT_SEED,
        }
    }

    pub fn burn_in(&self) -> f64 {
        0.1 * self.horizon
    }
}

/// One batch of dynamic replicas with the matching mass curve.
#[derive(Debug, Clone)]
pub struct DynamicRun {
    pub setup: DynamicSetup,
    pub model: FiniteModel,
    pub trajs: Vec<Trajectory>,
    /// `H` on the sample grid, started at the realized initial mass.
    pub h: LimitCurve,
    pub occupation: EmpiricalOccupation,
}

pub fn run_dynamic(setup: &DynamicSetup) -> Result<DynamicRun, VerifyError> {
    let model = build_finite(setup.params.clone(), setup.n, RegimeRequest::Dynamic)?;
    let init = model.state_from_fractions(&setup.f0, setup.z0)?;
    let grid = uniform_grid(setup.horizon, setup.grid_points);
    let windows = equal_windows(setup.horizon, setup.windows);
    let cfg = SimConfig::new(setup.horizon, Timescale::Scaled, grid.clone(), setup.seed)
        .with_occupation_windows(windows.clone());
    let trajs = replicate(&model, &init, &cfg, StopRule::None, setup.replications)?;
    let h0 = init.f.iter().sum::<u64>() as f64 / setup.n as f64;
    let h = solve_h(&setup.params, h0, &grid)?;
    let occupation = empirical_occupation(&trajs, &windows)?;
    Ok(DynamicRun {
        setup: setup.clone(),
        model,
        trajs,
        h,
        occupation,
    })
}

fn mass_distances(run: &DynamicRun, h: &LimitCurve) -> Result<Vec<f64>, VerifyError> {
    run.trajs
        .iter()
        .map(|t| path_sup_distance(&scaled_free_mass(t), h))
        .collect()
}

/// At least 90% of replicas stay within 0.05 of `H` in sup norm.
pub fn mass_lln(run: &DynamicRun) -> Result<VerdictReport, VerifyError> {
    let d = mass_distances(run, &run.h)?;
    Ok(VerdictReport::at_least(
        "mass-lln",
        "fraction of replicas with sup |mass - H| <= 0.05",
        fraction_passing(&d, 0.05),
        0.9,
    )
    .with_n([run.setup.n])
    .with_runs(run.trajs.len(), [run.setup.seed])
    .detail("median_sup_distance", median(&d))
    .detail("max_sup_distance", d.iter().copied().fold(0.0, f64::max)))
}

/// Collapse residual after burn-in; the initial residual must exceed five
/// times the post-burn-in median.
pub fn collapse(run: &DynamicRun) -> Result<VerdictReport, VerifyError> {
    let r = collapse_test(&run.trajs, &run.setup.params, run.setup.burn_in())?;
    let ratio = r.details["initial_to_median_ratio"];
    Ok(r.with_runs(run.trajs.len(), [run.setup.seed]).require(ratio > 5.0))
}

/// `collapse` held to the fixed bar of the acceptance run, tighter than the
/// `N`-scaled default at moderate `N`.
pub fn collapse_pinned(run: &DynamicRun) -> Result<VerdictReport, VerifyError> {
    const BAR: f64 = 0.03;
    let r = collapse(run)?;
    Ok(VerdictReport {
        threshold: BAR,
        pass: r.pass && r.observed <= BAR,
        ..r
    })
}

pub fn occupation(run: &DynamicRun) -> Result<VerdictReport, VerifyError> {
    let r = occupation_vs_poisson(&run.occupation, &run.h, &run.setup.params, run.setup.burn_in())?;
    let probe = r.details["probe_mean_tv"];
    Ok(r.with_runs(run.trajs.len(), [run.setup.seed]).require(probe > 0.15))
}

pub fn drift_balance(run: &DynamicRun) -> Result<VerdictReport, VerifyError> {
    Ok(
        drift_balance_test(&run.occupation, &run.setup.params, run.setup.burn_in())?
            .with_runs(run.trajs.len(), [run.setup.seed]),
    )
}

/// Median sup mass distance for each `N`, optionally against `H + bias`.
pub fn mass_lln_sweep(
    base: &DynamicSetup,
    ns: &[u64],
    bias: f64,
) -> Result<VerdictReport, VerifyError> {
    if ns.is_empty() {
        return Err(VerifyError::InvalidSetup("empty N list".into()));
    }
    let mut rows = Vec::new();
    for (i, &n) in ns.iter().enumerate() {
        let setup = DynamicSetup {
            n,
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let run = run_dynamic(&setup)?;
        let shifted = LimitCurve::new(
            run.h.grid.clone(),
            run.h.values.iter().map(|v| vec![v[0] + bias]).collect(),
        );
        rows.push((n, median(&mass_distances(&run, &shifted)?)));
    }
    Ok(convergence_table("mass-lln", &rows)
        .with_runs(base.replications, (0..ns.len()).map(|i| base.seed.wrapping_add(i as u64))))
}

/// `H(50)` against the closed-form equilibrium from both sides, and the fixed
/// point identity `phi(H_inf) = beta / delta`.
pub fn h_equilibrium(params: &ModelParams) -> Result<VerdictReport, VerifyError> {
    let h_inf = h_infinity(params)?;
    let grid = uniform_grid(50.0, 51);
    let mut worst: f64 = 0.0;
    for h0 in [0.1 * h_inf, 0.5 * (h_inf + 1.0)] {
        let h = solve_h(params, h0, &grid)?;
        worst = worst.max((h.last().unwrap()[0] - h_inf).abs());
    }
    let fixed = (phi(params, h_inf)? - params.rho0()).abs();
    Ok(
        VerdictReport::at_most("h-equilibrium", "|H(50) - H_inf|", worst, 1e-6)
            .detail("h_infinity", h_inf)
            .detail("phi_fixed_point_residual", fixed)
            .require(fixed <= 1e-9),
    )
}

// ---------------------------------------------------------------------------
// Fast agents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastAgentSetup {
    pub params: ModelParams,
    pub ns: Vec<u64>,
    pub f0: Vec<f64>,
    pub z0: u64,
    pub horizon: f64,
    /// Free-mass level below which a path is stopped.
    pub stop_level: f64,
    pub replications: usize,
    pub seed: u64,
}

impl FastAgentSetup {
    pub fn acceptance() -> Self {
        Self {
            params: canonical_params(),
            ns: vec![250, 1000, 4000],
            f0: vec![0.05, 0.30],
            z0: 0,
            horizon: 1.0,
            stop_level: 0.1,
            replications: 20,
            seed: DEFAULT_SEED + 14,
        }
    }
}

/// 95th percentile of `sup Z / sqrt(N)` must fall strictly along the N list.
pub fn fast_agents(setup: &FastAgentSetup) -> Result<VerdictReport, VerifyError> {
    if setup.ns.is_empty() {
        return Err(VerifyError::InvalidSetup("empty N list".into()));
    }
    let mut q95 = Vec::new();
    for &n in &setup.ns {
        let model = build_finite(setup.params.clone(), n, RegimeRequest::Dynamic)?;
        let init = model.state_from_fractions(&setup.f0, setup.z0)?;
        let cfg = SimConfig::new(setup.horizon, Timescale::Scaled, vec![0.0, setup.horizon], setup.seed);
        let trajs = replicate(
            &model,
            &init,
            &cfg,
            StopRule::TauA(setup.stop_level),
            setup.replications,
        )?;
        let sups: Vec<f64> = trajs
            .iter()
            .map(|t| t.max_z as f64 / (n as f64).sqrt())
            .collect();
        q95.push(quantile(&sups, 0.95));
    }
    let decreasing = q95.windows(2).all(|w| w[1] < w[0]);
    let mut r = VerdictReport::at_least(
        "fast-agents",
        "strictly decreasing 95th percentiles of sup Z/sqrt(N)",
        if decreasing { 1.0 } else { 0.0 },
        1.0,
    )
    .with_n(setup.ns.iter().copied())
    .with_runs(setup.replications, [setup.seed]);
    for (n, q) in setup.ns.iter().zip(&q95) {
        r.details.insert(format!("q95_n{n}"), *q);
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Critical regime

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSetup {
    pub params: ModelParams,
    pub n: u64,
    /// Initial condition on the `sqrt(N)` scale; rounded to integers.
    pub f0bar: Vec<f64>,
    pub horizon: f64,
    pub grid_points: usize,
    pub replications: usize,
    pub seed: u64,
}

impl CriticalSetup {
    pub fn acceptance() -> Self {
        Self {
            params: canonical_params(),
            n: 10_000,
            f0bar: vec![0.5, 0.3],
            horizon: 2.0,
            grid_points: 201,
            replications: 20,
            seed: DEFAULT_SEED + 8,
        }
    }

    /// The clt configuration: one observation time, many replicas.
    pub fn clt() -> Self {
        Self {
            horizon: 1.0,
            grid_points: 101,
            replications: 1000,
            seed: DEFAULT_SEED + 10,
            ..Self::acceptance()
        }
    }
}

fn critical_instance(setup: &CriticalSetup) -> Result<(FiniteModel, State, Vec<f64>), VerifyError> {
    let model = build_finite(setup.params.clone(), setup.n, RegimeRequest::Critical)?;
    let root = (setup.n as f64).sqrt();
    let f: Vec<u64> = setup
        .f0bar
        .iter()
        .zip(&model.capacities)
        .map(|(&x, &cap)| ((x * root).round().max(0.0) as u64).min(cap))
        .collect();
    let realized = f.iter().map(|&x| x as f64 / root).collect();
    let init = model.fixed_state(f)?;
    Ok((model, init, realized))
}

pub fn critical_lln(setup: &CriticalSetup) -> Result<VerdictReport, VerifyError> {
    let (model, init, f0bar) = critical_instance(setup)?;
    let grid = uniform_grid(setup.horizon, setup.grid_points);
    let cfg = SimConfig::new(setup.horizon, Timescale::Critical, grid.clone(), setup.seed);
    let trajs = replicate(&model, &init, &cfg, StopRule::None, setup.replications)?;
    let fbar = critical_ode(&setup.params, &f0bar, &grid)?;
    let root = (setup.n as f64).sqrt();
    let d: Vec<f64> = trajs
        .iter()
        .map(|t| path_sup_distance(&scaled_free_profile(t, root), &fbar))
        .collect::<Result<_, _>>()?;
    Ok(VerdictReport::at_least(
        "critical-lln",
        "fraction of replicas with sup |F/sqrt(N) - fbar| <= 0.1",
        fraction_passing(&d, 0.1),
        0.9,
    )
    .with_n([setup.n])
    .with_runs(setup.replications, [setup.seed])
    .detail("median_sup_distance", median(&d))
    .detail("max_sup_distance", d.iter().copied().fold(0.0, f64::max)))
}

/// Terminal value of the critical ODE at `t = 50` against the closed form.
pub fn critical_equilibrium_check(
    params: &ModelParams,
    f0bar: &[f64],
) -> Result<VerdictReport, VerifyError> {
    let target = critical_equilibrium(params);
    let curve = critical_ode(params, f0bar, &[0.0, 50.0])?;
    let end = curve.last().unwrap();
    let gap = end
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut drift = vec![0.0; target.len()];
    critical_drift(params, &target, &mut drift);
    let stat = drift.iter().map(|d| d.abs()).fold(0.0, f64::max);
    Ok(
        VerdictReport::at_most("critical-equilibrium", "|fbar(50) - fbar_inf|", gap, 1e-6)
            .detail("drift_at_equilibrium", stat),
    )
}

/// Two-sample KS between the scaled SSA fluctuation at the horizon and the
/// diffusion marginals, per coordinate.
pub fn clt_marginal_test(setup: &CriticalSetup) -> Result<VerdictReport, VerifyError> {
    let (model, init, f0bar) = critical_instance(setup)?;
    let nt = model.num_types();
    let nf = setup.n as f64;
    let (root, quart) = (nf.sqrt(), nf.powf(0.25));
    let t_star = setup.horizon;
    let grid = uniform_grid(t_star, setup.grid_points);
    let fbar = critical_ode(&setup.params, &f0bar, &grid)?;
    let end = fbar.last().unwrap().to_vec();
    let cfg = SimConfig::new(t_star, Timescale::Critical, vec![t_star], setup.seed);
    let trajs = replicate(&model, &init, &cfg, StopRule::None, setup.replications)?;
    let ssa: Vec<Vec<f64>> = (0..nt)
        .map(|j| {
            trajs
                .iter()
                .map(|t| (t.samples[0].state.f[j] as f64 - root * end[j]) / quart)
                .collect()
        })
        .collect();
    // the realized start sits exactly on the fluid path, so fhat(0) = 0
    let fhat0 = vec![0.0; nt];
    let diff_seed = setup.seed.wrapping_add(1);
    let null_seed = setup.seed.wrapping_add(2);
    let diff = clt_terminal_samples(&setup.params, &fbar, &fhat0, setup.replications, diff_seed)?;
    let null = clt_terminal_samples(&setup.params, &fbar, &fhat0, setup.replications, null_seed)?;
    let column = |s: &[Vec<f64>], j: usize| s.iter().map(|v| v[j]).collect::<Vec<f64>>();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    let critical = ks_two_sample_critical(setup.replications, setup.replications);
    let mut ks_max: f64 = 0.0;
    let mut null_ok = true;
    let mut var_ok = true;
    let mut details = BTreeMap::new();
    for j in 0..nt {
        let dj = column(&diff, j);
        let ks = ks_two_sample(&ssa[j], &dj)?;
        let ks_null = ks_two_sample(&column(&null, j), &dj)?;
        let ratio = var(&ssa[j]) / var(&dj);
        ks_max = ks_max.max(ks);
        null_ok &= ks_null < critical;
        var_ok &= (ratio - 1.0).abs() <= 0.2;
        details.insert(format!("ks_{j}"), ks);
        details.insert(format!("null_ks_{j}"), ks_null);
        details.insert(format!("variance_ratio_{j}"), ratio);
        details.insert(format!("diffusion_coefficient_{j}"), clt_variance(&setup.params, &end, j));
    }
    details.insert("null_critical".into(), critical);
    let mut r = VerdictReport::at_most("clt", "max per-coordinate two-sample KS", ks_max, 0.1)
        .with_n([setup.n])
        .with_runs(setup.replications, [setup.seed, diff_seed, null_seed])
        .require(null_ok && var_ok);
    r.details = details;
    Ok(r)
}

// ---------------------------------------------------------------------------
// Overloaded regime

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverloadedSetup {
    pub params: ModelParams,
    pub r: f64,
    pub n: u64,
    pub f0: Vec<f64>,
    pub horizon: f64,
    pub grid_points: usize,
    pub replications: usize,
    pub seed: u64,
}

impl OverloadedSetup {
    pub fn acceptance() -> Self {
        Self {
            params: canonical_params(),
            r: 0.4,
            n: 4000,
            f0: vec![0.45, 0.15],
            horizon: 3.0,
            grid_points: 301,
            replications: 20,
            seed: DEFAULT_SEED + 11,
        }
    }
}

pub fn overloaded_lln(setup: &OverloadedSetup) -> Result<VerdictReport, VerifyError> {
    let model = build_finite(
        setup.params.clone(),
        setup.n,
        RegimeRequest::Overloaded { r: setup.r },
    )?;
    let init = model.state_from_fractions(&setup.f0, 0)?;
    let grid = uniform_grid(setup.horizon, setup.grid_points);
    let cfg = SimConfig::new(setup.horizon, Timescale::Raw, grid.clone(), setup.seed);
    let trajs = replicate(&model, &init, &cfg, StopRule::None, setup.replications)?;
    let nf = setup.n as f64;
    let f0: Vec<f64> = init.f.iter().map(|&x| x as f64 / nf).collect();
    // the ODE needs the exact mass 1 - r of the realized start
    let r_eff = 1.0 - f0.iter().sum::<f64>();
    let limit = overloaded_ode(&setup.params, r_eff, &f0, &grid)?;
    let eq = overloaded_equilibrium(&setup.params, r_eff)?;
    let d: Vec<f64> = trajs
        .iter()
        .map(|t| path_sup_distance(&scaled_free_profile(t, nf), &limit))
        .collect::<Result<_, _>>()?;
    let nt = model.num_types();
    let mut terminal = vec![0.0; nt];
    for t in &trajs {
        let last = &t.samples.last().unwrap().state.f;
        for j in 0..nt {
            terminal[j] += last[j] as f64 / nf / trajs.len() as f64;
        }
    }
    let gap = terminal
        .iter()
        .zip(&eq)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(VerdictReport::at_least(
        "overloaded-lln",
        "fraction of replicas with sup |F/N - f| <= 0.03",
        fraction_passing(&d, 0.03),
        0.9,
    )
    .with_n([setup.n])
    .with_runs(setup.replications, [setup.seed])
    .detail("median_sup_distance", median(&d))
    .detail("max_sup_distance", d.iter().copied().fold(0.0, f64::max))
    .detail("terminal_gap", gap)
    .require(gap <= 0.02))
}

// ---------------------------------------------------------------------------
// Exact stationary laws

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarySetup {
    pub params: ModelParams,
    pub n: u64,
    pub events: u64,
    pub seed: u64,
}

impl StationarySetup {
    /// One type with capacity 2 and unit rates.
    pub fn acceptance() -> Self {
        Self {
            params: ModelParams::new(vec![1.0], vec![1.0], vec![1.0], 1.0, 1.0).unwrap(),
            n: 2,
            events: 1_000_000,
            seed: DEFAULT_SEED + 1,
        }
    }
}

/// Long-run time average of a critical chain against its product-form law.
pub fn stationary_exactness(setup: &StationarySetup) -> Result<VerdictReport, VerifyError> {
    let model = build_finite(setup.params.clone(), setup.n, RegimeRequest::Critical)?;
    let table = enumerate_z(&model, None)?;
    let init = model.fixed_state(model.capacities.clone())?;
    let occ = state_occupancy(&model, &init, setup.seed, setup.events, f64::INFINITY)?;
    let empirical: BTreeMap<State, f64> = occupancy_law(&occ).into_iter().collect();
    let tv = tv_distance(&empirical, &table.law());
    Ok(
        VerdictReport::at_most("stationary", "TV(time average, exact law)", tv, 0.02)
            .with_n([setup.n])
            .with_runs(1, [setup.seed])
            .detail("states", table.law().len() as f64),
    )
}

/// Random critical instances with at most `10^4` states, spread over one to
/// three types.
pub fn enumerable_critical_models(seed: u64) -> Vec<FiniteModel> {
    let mut rng = stream_rng(seed, 0);
    let mut caps: Vec<Vec<u64>> = Vec::new();
    for c in [1, 2, 3, 5, 10, 50, 200, 1000, 9999] {
        caps.push(vec![c]);
    }
    for (a, b) in [(1, 1), (2, 3), (10, 10), (30, 60), (99, 99), (1, 4000)] {
        caps.push(vec![a, b]);
    }
    for c in [[1, 1, 1], [2, 5, 3], [10, 10, 10], [20, 20, 20]] {
        caps.push(c.to_vec());
    }
    caps.into_iter()
        .filter(|c| c.iter().map(|&x| (x + 1) as u128).product::<u128>() <= 10_000)
        .map(|cap| {
            let n: u64 = cap.iter().sum();
            let k = cap.len();
            let mut draw = |lo: f64, hi: f64| lo * (hi / lo).powf(rng.random::<f64>());
            let lambda: Vec<f64> = (0..k).map(|_| draw(0.1, 10.0)).collect();
            let eta: Vec<f64> = (0..k).map(|_| draw(0.1, 10.0)).collect();
            let c = cap.iter().map(|&x| x as f64 / n as f64).collect();
            let params = ModelParams::new(c, lambda, eta, 1.0, 1.0).unwrap();
            let model = build_finite(params, n, RegimeRequest::Critical).unwrap();
            debug_assert_eq!(model.capacities, cap);
            model
        })
        .collect()
}

pub fn detailed_balance(models: &[FiniteModel]) -> Result<VerdictReport, VerifyError> {
    let mut worst: f64 = 0.0;
    for m in models {
        worst = worst.max(check_detailed_balance(m)?);
    }
    Ok(
        VerdictReport::at_most("detailed-balance", "max relative flux mismatch", worst, 1e-12)
            .with_n(models.iter().map(|m| m.n))
            .detail("models", models.len() as f64),
    )
}

pub fn global_balance(model: &FiniteModel, z_cap: u64) -> Result<VerdictReport, VerifyError> {
    let table = enumerate_z(model, Some(z_cap))?;
    let res = global_balance_residual(model, &table)?;
    Ok(
        VerdictReport::at_most("global-balance", "max net probability flux", res, 1e-8)
            .with_n([model.n])
            .detail("z_cap", z_cap as f64)
            .detail("states", table.law().len() as f64),
    )
}

/// The single-type dynamic instance with capacity 1.
pub fn global_balance_instance() -> FiniteModel {
    let params = ModelParams::new(vec![1.0], vec![1.0], vec![1.0], 1.0, 2.0).unwrap();
    build_finite(params, 1, RegimeRequest::Dynamic).unwrap()
}

// ---------------------------------------------------------------------------
// Queues

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSetup {
    pub spec: BirthDeathSpec,
    pub level: u64,
    pub replications: usize,
    pub seed: u64,
}

impl QueueSetup {
    pub fn mm1() -> Self {
        Self {
            spec: BirthDeathSpec::new(crate::queues::QueueKind::MM1, 0.5, 1.0, 0).unwrap(),
            level: 12,
            replications: 2000,
            seed: DEFAULT_SEED + 12,
        }
    }

    pub fn mminf() -> Self {
        Self {
            spec: BirthDeathSpec::new(crate::queues::QueueKind::MMInf, 2.0, 1.0, 0).unwrap(),
            level: 8,
            replications: 2000,
            seed: DEFAULT_SEED + 13,
        }
    }
}

/// Scaled hitting times against the exponential family.
pub fn queue_hitting(claim: &str, setup: &QueueSetup) -> Result<VerdictReport, VerifyError> {
    let xs = scaled_hitting_law(&setup.spec, setup.level, setup.replications, setup.seed)?;
    let (ks, cv) = exponential_fit(&xs)?;
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(
        VerdictReport::at_most(claim, "KS to exponential with fitted mean", ks, 0.04)
            .with_n([setup.level])
            .with_runs(setup.replications, [setup.seed])
            .detail("cv", cv)
            .detail("scaled_mean", mean)
            .require((0.9..=1.1).contains(&cv)),
    )
}

// ---------------------------------------------------------------------------
// Couplings

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceSetup {
    pub params: ModelParams,
    pub n: u64,
    pub f0: Vec<f64>,
    pub paths: usize,
    /// Raw-time horizon.
    pub horizon: f64,
    pub seed: u64,
}

impl DominanceSetup {
    pub fn lemcl1() -> Self {
        Self {
            params: canonical_params(),
            n: 500,
            f0: vec![0.45, 0.15],
            paths: 1000,
            horizon: 3.0,
            seed: DEFAULT_SEED + 131,
        }
    }

    pub fn lem1op() -> Self {
        Self {
            params: canonical_params(),
            n: 100,
            f0: vec![0.05, 0.30],
            paths: 1000,
            horizon: 100.0,
            seed: DEFAULT_SEED + 132,
        }
    }

    /// `f0` holds the initial condition on the `sqrt(N)` scale.
    pub fn propcoup() -> Self {
        Self {
            params: canonical_params(),
            n: 10_000,
            f0: vec![0.5, 0.3],
            paths: 1000,
            horizon: 0.02,
            seed: DEFAULT_SEED + 133,
        }
    }
}

fn dominance_report(
    claim: &str,
    setup: &DominanceSetup,
    report: crate::coupling::CouplingReport,
) -> VerdictReport {
    VerdictReport::at_most(claim, "paths violating the ordering", report.violations as f64, 0.0)
        .with_n([setup.n])
        .with_runs(report.paths, [setup.seed])
        .detail("events", report.total_events as f64)
}

/// Overloaded free agents under the comparison M/M/∞ queue.
pub fn dominance_lemcl1(setup: &DominanceSetup, r: f64) -> Result<VerdictReport, VerifyError> {
    let model = build_finite(setup.params.clone(), setup.n, RegimeRequest::Overloaded { r })?;
    let init = model.state_from_fractions(&setup.f0, 0)?;
    let queue = lemcl1_queue(&model)?;
    let rep = coupling_experiment(setup.paths, setup.seed, |rng| {
        couple_with_queue(&model, &init, queue, None, setup.horizon, rng)
    })?;
    Ok(dominance_report("dominance-lemcl1", setup, rep))
}

/// Dynamic free agents under the comparison queue until the free mass drops
/// to `a N`.
pub fn dominance_lem1op(setup: &DominanceSetup, a: f64) -> Result<VerdictReport, VerifyError> {
    let model = build_finite(setup.params.clone(), setup.n, RegimeRequest::Dynamic)?;
    let init = model.state_from_fractions(&setup.f0, 0)?;
    let queue = lem1op_queue(&model, a)?;
    let rep = coupling_experiment(setup.paths, setup.seed, |rng| {
        couple_with_queue(&model, &init, queue, Some(a), setup.horizon, rng)
    })?;
    Ok(dominance_report("dominance-lem1op", setup, rep))
}

/// Critical coordinates under independent quadratic-death bounds.
pub fn coupling_propcoup(setup: &DominanceSetup) -> Result<VerdictReport, VerifyError> {
    let crit = CriticalSetup {
        params: setup.params.clone(),
        n: setup.n,
        f0bar: setup.f0.clone(),
        ..CriticalSetup::acceptance()
    };
    let (model, init, _) = critical_instance(&crit)?;
    let bound = propcoup_bound(&model);
    let rep = coupling_experiment(setup.paths, setup.seed, |rng| {
        couple_coordinates(&model, &init, bound, setup.horizon, rng)
    })?;
    Ok(dominance_report("coupling-propcoup", setup, rep))
}
