//! Statistics that turn simulation output and limit objects into verdicts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::CouplingError;
use crate::curve::LimitCurve;
use crate::limits::{profile_at, LimitError, PhiSolver};
use crate::model::ModelParams;
use crate::queues::QueueError;
use crate::ssa::{EmpiricalOccupation, SimError, Trajectory};
use crate::stationary::StationaryError;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("need at least two samples, got {0}")]
    EmptySample(usize),
    #[error("curves or windows are not on matching grids")]
    GridMismatch,
    #[error("invalid verification setup: {0}")]
    InvalidSetup(String),
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Stationary(#[from] StationaryError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Outcome of one claim check, reproducible from its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub claim: String,
    pub statistic: String,
    pub observed: f64,
    pub threshold: f64,
    pub pass: bool,
    pub n_values: Vec<u64>,
    pub replications: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub details: BTreeMap<String, f64>,
}

impl VerdictReport {
    /// A report passing when `observed <= threshold`.
    pub fn at_most(claim: &str, statistic: &str, observed: f64, threshold: f64) -> Self {
        Self {
            claim: claim.to_string(),
            statistic: statistic.to_string(),
            observed,
            threshold,
            pass: observed <= threshold,
            n_values: Vec::new(),
            replications: 0,
            seeds: Vec::new(),
            details: BTreeMap::new(),
        }
    }

    /// A report passing when `observed >= threshold`.
    pub fn at_least(claim: &str, statistic: &str, observed: f64, threshold: f64) -> Self {
        let mut r = Self::at_most(claim, statistic, observed, threshold);
        r.pass = observed >= threshold;
        r
    }

    pub fn with_n(mut self, n: impl IntoIterator<Item = u64>) -> Self {
        self.n_values = n.into_iter().collect();
        self
    }

    pub fn with_runs(mut self, replications: usize, seeds: impl IntoIterator<Item = u64>) -> Self {
        self.replications = replications;
        self.seeds = seeds.into_iter().collect();
        self
    }

    pub fn detail(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }

    /// Marks the report failed unless `cond` holds (secondary conditions).
    pub fn require(mut self, cond: bool) -> Self {
        self.pass &= cond;
        self
    }

    /// One summary line.
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} = {:.6e} (threshold {:.6e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.claim,
            self.statistic,
            self.observed,
            self.threshold
        )
    }
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Kolmogorov–Smirnov distance between the empirical law of `samples` and
/// `cdf`. Left limits of `cdf` are taken at the next smaller double, so
/// atoms of the reference are handled.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<f64, VerifyError> {
    if samples.len() < 2 {
        return Err(VerifyError::EmptySample(samples.len()));
    }
    let xs = sorted(samples);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < xs.len() {
        let x = xs[i];
        let mut k = i;
        while k < xs.len() && xs[k] == x {
            k += 1;
        }
        let below = i as f64 / n;
        let at = k as f64 / n;
        d = d.max((at - cdf(x)).abs()).max((below - cdf(x.next_down())).abs());
        i = k;
    }
    Ok(d)
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64, VerifyError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(VerifyError::EmptySample(a.len().min(b.len())));
    }
    let (xa, xb) = (sorted(a), sorted(b));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Asymptotic 95% critical value of the two-sample statistic.
pub fn ks_two_sample_critical(na: usize, nb: usize) -> f64 {
    1.358 * ((na + nb) as f64 / (na as f64 * nb as f64)).sqrt()
}

/// KS distance to the exponential law with the sample mean, and the
/// coefficient of variation.
pub fn exponential_fit(samples: &[f64]) -> Result<(f64, f64), VerifyError> {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return Err(VerifyError::EmptySample(samples.len()));
    }
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let ks = ks_distance(samples, |x| if x <= 0.0 { 0.0 } else { 1.0 - (-x / mean).exp() })?;
    Ok((ks, var.sqrt() / mean))
}

/// Poisson probability of `k`.
pub fn poisson_pmf(k: usize, mean: f64) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let lf: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
    (k as f64 * mean.ln() - mean - lf).exp()
}

/// Total variation between a finite law `p` on `{0, .., len-1}` and a
/// reference pmf on the integers; mass of the reference beyond the support
/// of `p` counts fully.
pub fn tv_against<F: Fn(usize) -> f64>(p: &[f64], pmf: F) -> f64 {
    let mut inside = 0.0;
    let mut diff = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        let q = pmf(k);
        inside += q;
        diff += (pk - q).abs();
    }
    0.5 * (diff + (1.0 - inside).max(0.0))
}

/// Total variation between two laws on a common index set.
pub fn tv_distance<K: Ord + Clone>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> f64 {
    let mut keys: Vec<&K> = p.keys().chain(q.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// Largest componentwise gap between two curves on the same grid.
pub fn path_sup_distance(sim: &LimitCurve, limit: &LimitCurve) -> Result<f64, VerifyError> {
    if !sim.same_grid(limit, 1e-12) || sim.dim() != limit.dim() {
        return Err(VerifyError::GridMismatch);
    }
    Ok(sim
        .values
        .iter()
        .zip(&limit.values)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Empirical quantile by linear interpolation of order statistics.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    let v = sorted(samples);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Distance of the free fractions `x` from the collapse curve at its mass.
pub fn collapse_residual(
    params: &ModelParams,
    solver: &PhiSolver,
    x: &[f64],
) -> Result<f64, VerifyError> {
    let mass: f64 = x.iter().sum();
    let p = solver.solve(mass)?;
    let curve = profile_at(&params.rhos(), &params.c, p);
    Ok(x.iter()
        .zip(&curve)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Time-median distance to the collapse curve after `burn_in` (observation
/// time), pooled over all trajectories.
pub fn collapse_test(
    trajs: &[Trajectory],
    params: &ModelParams,
    burn_in: f64,
) -> Result<VerdictReport, VerifyError> {
    let first = trajs
        .first()
        .ok_or(VerifyError::EmptySample(0))?;
    let n = first.model.n;
    let nf = n as f64;
    let solver = PhiSolver::new(params);
    let mut residuals = Vec::new();
    let mut initial = Vec::new();
    for tr in trajs {
        for s in &tr.samples {
            let x: Vec<f64> = s.state.f.iter().map(|&v| v as f64 / nf).collect();
            if s.time == 0.0 {
                initial.push(collapse_residual(params, &solver, &x)?);
            }
            if s.time > burn_in {
                residuals.push(collapse_residual(params, &solver, &x)?);
            }
        }
    }
    if residuals.is_empty() {
        return Err(VerifyError::EmptySample(0));
    }
    let med = median(residuals.clone());
    let t0 = initial.iter().sum::<f64>() / initial.len().max(1) as f64;
    let tol = 0.03f64.max(5.0 / nf.sqrt());
    Ok(VerdictReport::at_most("collapse", "median collapse residual", med, tol)
        .with_n([n])
        .with_runs(trajs.len(), trajs.iter().map(|t| t.config.seed))
        .detail("initial_residual", t0)
        .detail("initial_to_median_ratio", t0 / med)
        .detail("samples", residuals.len() as f64)
        .detail("burn_in", burn_in))
}

/// Mean TV between the windowed free-agent sojourn law and a Poisson law
/// with parameter `phi(H(mid-window)) + shift`, over windows starting at or
/// after `burn_in`. Returns the per-window distances too.
pub fn occupation_tv(
    occ: &EmpiricalOccupation,
    h: &LimitCurve,
    params: &ModelParams,
    burn_in: f64,
    shift: f64,
) -> Result<(f64, Vec<f64>), VerifyError> {
    let solver = PhiSolver::new(params);
    let mut tvs = Vec::new();
    for w in occ.windows.iter().filter(|w| w.start >= burn_in - 1e-12) {
        let mid = 0.5 * (w.start + w.end);
        let hm = h.interpolate(mid, 0).ok_or(VerifyError::GridMismatch)?;
        let lam = solver.solve(hm)? + shift;
        tvs.push(tv_against(&w.z_law, |k| poisson_pmf(k, lam)));
    }
    if tvs.is_empty() {
        return Err(VerifyError::EmptySample(0));
    }
    let mean = tvs.iter().sum::<f64>() / tvs.len() as f64;
    Ok((mean, tvs))
}

/// Occupation law of the free agents against the Poisson limit; the +1
/// perturbation probe is recorded in the details.
pub fn occupation_vs_poisson(
    occ: &EmpiricalOccupation,
    h: &LimitCurve,
    params: &ModelParams,
    burn_in: f64,
) -> Result<VerdictReport, VerifyError> {
    let (mean, tvs) = occupation_tv(occ, h, params, burn_in, 0.0)?;
    let (probe, _) = occupation_tv(occ, h, params, burn_in, 1.0)?;
    let mut r = VerdictReport::at_most("occupation", "mean windowed TV to Poisson", mean, 0.05)
        .with_n([occ.n])
        .detail("probe_mean_tv", probe)
        .detail("windows", tvs.len() as f64)
        .detail("max_window_tv", tvs.iter().copied().fold(0.0, f64::max));
    if let Some(w) = occ.windows.first() {
        r = r.detail("replicas", w.replicas as f64);
    }
    Ok(r)
}

/// `lambda_j x_j <eta, c - x>/<lambda, x> - eta_j (c_j - x_j)`.
pub fn drift_functional(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let split: f64 = (0..x.len()).map(|j| params.eta[j] * (params.c[j] - x[j])).sum();
    let pair: f64 = (0..x.len()).map(|j| params.lambda[j] * x[j]).sum();
    (0..x.len())
        .map(|j| params.lambda[j] * x[j] * split / pair - params.eta[j] * (params.c[j] - x[j]))
        .collect()
}

/// Per-window averages of the drift functional over the sampled free
/// fractions; the statistic is the largest `|average| / (eta_j c_j)`.
pub fn drift_balance_test(
    occ: &EmpiricalOccupation,
    params: &ModelParams,
    burn_in: f64,
) -> Result<VerdictReport, VerifyError> {
    let nt = params.num_types();
    let mut worst: f64 = 0.0;
    let mut windows = 0;
    for w in occ.windows.iter().filter(|w| w.start >= burn_in - 1e-12) {
        if w.free_samples.is_empty() {
            continue;
        }
        windows += 1;
        let mut acc = vec![0.0; nt];
        for x in &w.free_samples {
            for (a, d) in acc.iter_mut().zip(drift_functional(params, x)) {
                *a += d;
            }
        }
        for j in 0..nt {
            let avg = acc[j] / w.free_samples.len() as f64;
            worst = worst.max(avg.abs() / (params.eta[j] * params.c[j]));
        }
    }
    if windows == 0 {
        return Err(VerifyError::EmptySample(0));
    }
    Ok(
        VerdictReport::at_most("drift-balance", "max relative window drift", worst, 0.05)
            .with_n([occ.n])
            .detail("windows", windows as f64),
    )
}

/// Trend check over a sweep of `N`: the statistic may rise at most once and
/// by at most 10%, and must shrink overall at least like `N^{-1/4}`.
pub fn convergence_table(claim: &str, rows: &[(u64, f64)]) -> VerdictReport {
    let mut inversions = 0;
    let mut worst_inversion: f64 = 0.0;
    for w in rows.windows(2) {
        if w[1].1 > w[0].1 {
            inversions += 1;
            worst_inversion = worst_inversion.max(w[1].1 / w[0].1 - 1.0);
        }
    }
    let monotone = inversions <= 1 && worst_inversion <= 0.10;
    let (shrink, bound) = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if rows.len() > 1 => {
            let bound = a.1 * (a.0 as f64 / b.0 as f64).powf(0.25);
            (b.1 <= bound, bound)
        }
        _ => (true, f64::NAN),
    };
    let last = rows.last().map_or(f64::NAN, |r| r.1);
    let mut r = VerdictReport::at_most(claim, "statistic at largest N", last, bound)
        .with_n(rows.iter().map(|r| r.0))
        .detail("inversions", inversions as f64)
        .detail("worst_inversion", worst_inversion);
    r.pass = monotone && shrink;
    if rows.len() <= 1 {
        r.threshold = last;
    }
    for (n, s) in rows {
        r.details.insert(format!("stat_n{n}"), *s);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::uniform_grid;
    use crate::limits::solve_h;
    use crate::rng::stream_rng;
    use crate::ssa::WindowOccupation;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};

    #[test]
    fn ks_examples() {
        let mut rng = stream_rng(1, 0);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let d = ks_distance(&xs, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(d <= 0.02, "{d}");
        let c = vec![0.5; 100];
        assert!(ks_distance(&c, |x| x.clamp(0.0, 1.0)).unwrap() >= 0.5);
        // empirical step cdf of its own sample
        let s = [1.0, 2.0, 2.0, 3.0];
        let own = |x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / 4.0;
        assert_eq!(ks_distance(&s, own).unwrap(), 0.0);
        assert!(matches!(
            ks_distance(&[1.0], |x| x),
            Err(VerifyError::EmptySample(1))
        ));
    }

    #[test]
    fn two_sample_ks() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ks_two_sample(&a, &a).unwrap(), 0.0);
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(ks_two_sample(&a, &b).unwrap(), 1.0);
        let mut rng = stream_rng(2, 0);
        let x: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        assert!(ks_two_sample(&x, &y).unwrap() < 3.0 * ks_two_sample_critical(1000, 1000));
    }

    #[test]
    fn sup_distance() {
        let a = LimitCurve::scalar(vec![0.0, 1.0], vec![0.2, 0.4]);
        assert_eq!(path_sup_distance(&a, &a).unwrap(), 0.0);
        let b = LimitCurve::scalar(vec![0.0, 1.0], vec![0.3, 0.5]);
        assert!((path_sup_distance(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        let c = LimitCurve::scalar(vec![0.0, 2.0], vec![0.3, 0.5]);
        assert!(matches!(
            path_sup_distance(&a, &c),
            Err(VerifyError::GridMismatch)
        ));
    }

    fn params() -> ModelParams {
        ModelParams::new(vec![0.5, 0.5], vec![1.0, 2.0], vec![1.0, 1.0], 1.0, 2.0).unwrap()
    }

    fn occupation_with(laws: Vec<Vec<f64>>, samples: Vec<Vec<Vec<f64>>>, horizon: f64) -> EmpiricalOccupation {
        let k = laws.len();
        let g = uniform_grid(horizon, k + 1);
        EmpiricalOccupation {
            n: 1000,
            windows: laws
                .into_iter()
                .zip(samples)
                .enumerate()
                .map(|(i, (z_law, free_samples))| WindowOccupation {
                    start: g[i],
                    end: g[i + 1],
                    mean_free: vec![0.0; 2],
                    z_law,
                    free_samples,
                    replicas: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn occupation_self_consistency_and_probe() {
        let p = params();
        let grid = uniform_grid(1.0, 101);
        let h = solve_h(&p, 0.5, &grid).unwrap();
        let solver = PhiSolver::new(&p);
        let mut rng = stream_rng(3, 0);
        let mut laws = Vec::new();
        for w in 0..4 {
            let mid = 0.125 + 0.25 * w as f64;
            let lam = solver.solve(h.interpolate(mid, 0).unwrap()).unwrap();
            let d = Poisson::new(lam).unwrap();
            let mut hist = vec![0.0; 40];
            let n = 100_000;
            for _ in 0..n {
                let k: f64 = d.sample(&mut rng);
                hist[k as usize] += 1.0 / n as f64;
            }
            laws.push(hist);
        }
        let occ = occupation_with(laws, vec![vec![]; 4], 1.0);
        let r = occupation_vs_poisson(&occ, &h, &p, 0.0).unwrap();
        assert!(r.observed <= 0.02, "{}", r.observed);
        assert!(r.details["probe_mean_tv"] > 0.15);
    }

    #[test]
    fn drift_on_and_off_curve() {
        let p = params();
        let solver = PhiSolver::new(&p);
        for m in [0.3, 0.5, 0.8] {
            let x = profile_at(&p.rhos(), &p.c, solver.solve(m).unwrap());
            assert!(drift_functional(&p, &x).iter().all(|d| d.abs() < 1e-12));
        }
        // pushing type 0 above the curve makes its pairing outflow win
        let mut x = profile_at(&p.rhos(), &p.c, solver.solve(0.5).unwrap());
        x[0] += 0.05;
        x[1] -= 0.05;
        let d = drift_functional(&p, &x);
        assert!(d[0] > 0.0 && d[1] < 0.0);
        let occ = occupation_with(vec![vec![1.0]], vec![vec![x.clone(); 10]], 1.0);
        let r = drift_balance_test(&occ, &p, 0.0).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn collapse_on_curve_and_single_type() {
        use crate::model::{build_finite, RegimeRequest, State};
        use crate::ssa::{Sample, SimConfig, Timescale};
        let p1 = ModelParams::new(vec![1.0], vec![1.0], vec![1.0], 1.0, 1.0).unwrap();
        let m = build_finite(p1.clone(), 100, RegimeRequest::Dynamic).unwrap();
        let grid = uniform_grid(1.0, 5);
        let tr = Trajectory {
            model: m.clone(),
            config: SimConfig::new(1.0, Timescale::Scaled, grid.clone(), 0),
            init: State::new(vec![37], 0),
            samples: grid
                .iter()
                .enumerate()
                .map(|(i, &t)| Sample {
                    time: t,
                    state: State::new(vec![30 + i as u64], 1),
                })
                .collect(),
            event_count: 0,
            stopped_at: None,
            max_z: 1,
            events: None,
            occupation: None,
        };
        let r = collapse_test(&[tr], &p1, 0.1).unwrap();
        assert!(r.observed < 1e-12 && r.pass);
    }

    #[test]
    fn convergence_rules() {
        assert!(convergence_table("x", &[(250, 0.1)]).pass);
        assert!(convergence_table("x", &[(250, 0.1), (1000, 0.05), (4000, 0.025)]).pass);
        // one small inversion is tolerated
        assert!(convergence_table("x", &[(250, 0.1), (1000, 0.04), (4000, 0.043)]).pass);
        // a flat sequence is the signature of a biased limit
        assert!(!convergence_table("x", &[(250, 0.11), (1000, 0.105), (4000, 0.1)]).pass);
        assert!(!convergence_table("x", &[(250, 0.1), (1000, 0.2), (4000, 0.3)]).pass);
    }

    #[test]
    fn tv_helpers() {
        assert!((tv_against(&[1.0], |k| poisson_pmf(k, 0.0))).abs() < 1e-15);
        let t = tv_against(&[1.0], |k| poisson_pmf(k, 1.0));
        assert!((t - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        let a: BTreeMap<u8, f64> = [(0, 0.5), (1, 0.5)].into();
        let b: BTreeMap<u8, f64> = [(1, 0.5), (2, 0.5)].into();
        assert!((tv_distance(&a, &b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exponential_fit_on_exponential_samples() {
        let mut rng = stream_rng(6, 0);
        let xs: Vec<f64> = (0..5000).map(|_| crate::rng::exponential(&mut rng, 0.3)).collect();
        let (ks, cv) = exponential_fit(&xs).unwrap();
        assert!(ks < 0.03 && (cv - 1.0).abs() < 0.05);
    }

    #[test]
    fn report_line_and_json() {
        let r = VerdictReport::at_most("mass-lln", "sup distance", 0.01, 0.05).detail("k", 1.0);
        assert!(r.line().starts_with("PASS mass-lln"));
        let json = serde_json::to_string(&r).unwrap();
        let back: VerdictReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
