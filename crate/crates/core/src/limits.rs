//! Deterministic and diffusive scaling limits.
//!
//! * `phi`: the quasi-stationary free-agent level at free mass `y`, the root of
//!   `sum_j rho_j c_j / (rho_j + phi) = y`.
//! * `solve_h`, `limit_profile`: the free-mass curve `H' = delta phi(H) - beta`
//!   of the dynamic regime and the per-type profile it induces.
//! * `overloaded_ode`, `critical_ode`: fluid limits of the fixed-agent regimes.
//! * `clt_diffusion`: Euler–Maruyama paths of the critical fluctuation SDE.
//! * `crn_fixed_point`: fixed point of the deterministic reaction network.

use std::cell::Cell;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::LimitCurve;
use crate::model::{FiniteModel, ModelParams, Regime};
use crate::ode::{integrate, OdeError, OdeOptions};
use crate::rng::stream_rng;

/// Tolerance on the defining equation of `phi`.
pub const PHI_TOLERANCE: f64 = 1e-12;
/// `phi` is only evaluated on `[PHI_MARGIN, 1 - PHI_MARGIN]`.
pub const PHI_MARGIN: f64 = 1e-9;
/// Allowed error of the implicit integral identity of `H`, measured in `H`.
pub const H_INTEGRAL_TOLERANCE: f64 = 1e-8;
/// Allowed drift of the conserved mass of the overloaded ODE.
pub const MASS_TOLERANCE: f64 = 1e-9;
/// Largest Euler–Maruyama step.
pub const EM_MAX_STEP: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LimitError {
    #[error("{what} = {value} is outside its domain")]
    DomainError { what: &'static str, value: f64 },
    #[error("ODE solver stalled: {0}")]
    SolverStall(#[from] OdeError),
    #[error("initial mass {sum} differs from the required {expected}")]
    InitMassMismatch { sum: f64, expected: f64 },
    #[error("conserved mass drifted by {drift} at t = {t}")]
    MassDrift { t: f64, drift: f64 },
    #[error("implicit integral identity violated by {residual} at t = {t}")]
    IntegralCheck { t: f64, residual: f64 },
    #[error("equilibrium is degenerate (value {value})")]
    DegenerateEquilibrium { value: f64 },
    #[error("negative diffusion coefficient {value} for type {j} at t = {t}")]
    NegativeVariance { t: f64, j: usize, value: f64 },
    #[error("curves are not on the same grid")]
    GridMismatch,
    #[error("vector `{name}` has length {got}, expected {expected}")]
    LengthMismatch {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{0} applies only to the dynamic regime")]
    UnsupportedRegime(&'static str),
}

/// Root finder for `phi` with a warm start from the previous root.
#[derive(Debug, Clone)]
pub struct PhiSolver {
    weights: Vec<(f64, f64)>,
    total: f64,
    last: Cell<f64>,
}

impl PhiSolver {
    pub fn new(params: &ModelParams) -> Self {
        let weights: Vec<(f64, f64)> = params
            .rhos()
            .into_iter()
            .zip(&params.c)
            .map(|(rho, &c)| (rho, rho * c))
            .collect();
        let total = weights.iter().map(|w| w.1).sum();
        Self {
            weights,
            total,
            last: Cell::new(f64::NAN),
        }
    }

    /// `sum_j rho_j c_j / (rho_j + x)`, decreasing from 1 at `x = 0`.
    pub fn mass(&self, x: f64) -> f64 {
        self.weights.iter().map(|&(r, w)| w / (r + x)).sum()
    }

    fn mass_and_slope(&self, x: f64) -> (f64, f64) {
        self.weights.iter().fold((0.0, 0.0), |(m, d), &(r, w)| {
            let q = 1.0 / (r + x);
            (m + w * q, d - w * q * q)
        })
    }

    pub fn solve(&self, y: f64) -> Result<f64, LimitError> {
        if !(y > PHI_MARGIN && y < 1.0 - PHI_MARGIN) {
            return Err(LimitError::DomainError {
                what: "free mass y",
                value: y,
            });
        }
        let mut lo = 0.0;
        let mut hi = self.total / y;
        let guess = self.last.get();
        let mut x = if guess.is_finite() && guess > lo && guess < hi {
            guess
        } else {
            0.5 * (lo + hi)
        };
        for _ in 0..200 {
            let (m, d) = self.mass_and_slope(x);
            let g = m - y;
            if g.abs() <= PHI_TOLERANCE {
                self.last.set(x);
                return Ok(x);
            }
            if g > 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let newton = x - g / d;
            x = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        // bracket exhausted at machine precision
        self.last.set(x);
        Ok(x)
    }
}

/// Unique `phi > 0` with `sum_j rho_j c_j / (rho_j + phi) = y`.
pub fn phi(params: &ModelParams, y: f64) -> Result<f64, LimitError> {
    PhiSolver::new(params).solve(y)
}

/// Fixed point of the mass curve, `sum_j rho_j c_j / (rho_j + rho_0)`.
pub fn h_infinity(params: &ModelParams) -> Result<f64, LimitError> {
    if params.beta == 0.0 {
        return Err(LimitError::DegenerateEquilibrium { value: 1.0 });
    }
    Ok(PhiSolver::new(params).mass(params.rho0()))
}

fn check_grid(grid: &[f64]) -> Result<(), LimitError> {
    let ok = grid.first().is_some_and(|&g| g == 0.0) && grid.windows(2).all(|w| w[1] > w[0]);
    if ok {
        Ok(())
    } else {
        Err(LimitError::GridMismatch)
    }
}

/// The free-mass curve `H' = delta phi(H) - beta`, `H(0) = h0`, on `grid`
/// (which must start at 0). The result is checked against the implicit form
/// `int_{h0}^{H(t)} du / (delta phi(u) - beta) = t` at the final time.
pub fn solve_h(params: &ModelParams, h0: f64, grid: &[f64]) -> Result<LimitCurve, LimitError> {
    if !(h0 > 0.0 && h0 < 1.0) {
        return Err(LimitError::DomainError {
            what: "initial free mass",
            value: h0,
        });
    }
    check_grid(grid)?;
    let solver = PhiSolver::new(params);
    let (beta, delta) = (params.beta, params.delta);
    let failure: Cell<Option<LimitError>> = Cell::new(None);
    let values = integrate(
        |_, y, dy| match solver.solve(y[0]) {
            Ok(p) => dy[0] = delta * p - beta,
            Err(e) => {
                failure.set(Some(e));
                dy[0] = f64::NAN;
            }
        },
        0.0,
        &[h0],
        grid,
        &OdeOptions::default(),
    );
    let values = match values {
        Ok(v) => v,
        Err(e) => return Err(failure.take().unwrap_or(LimitError::SolverStall(e))),
    };
    let curve = LimitCurve::new(grid.to_vec(), values);
    let h_end = curve.last().map_or(h0, |v| v[0]);
    let t_end = *grid.last().unwrap_or(&0.0);
    let residual = h_integral_residual(params, &solver, h0, h_end, t_end)?;
    if residual > H_INTEGRAL_TOLERANCE {
        return Err(LimitError::IntegralCheck {
            t: t_end,
            residual,
        });
    }
    Ok(curve)
}

/// Error of the implicit integral at `(t, h_t)`, expressed in `H`: the time
/// mismatch times `|H'(t)|`, capped by `|h_t - H_inf|` when the exact curve
/// has already passed `h_t`.
fn h_integral_residual(
    params: &ModelParams,
    solver: &PhiSolver,
    h0: f64,
    h_t: f64,
    t: f64,
) -> Result<f64, LimitError> {
    let h_inf = if params.beta == 0.0 {
        1.0
    } else {
        solver.mass(params.rho0())
    };
    let gap0 = h_inf - h0;
    if gap0.abs() < 1e-14 {
        return Ok((h_t - h0).abs());
    }
    let ratio = (h_inf - h_t) / gap0;
    if ratio <= 1e-9 {
        return Ok((h_t - h_inf).abs());
    }
    // u = H_inf - gap0 e^{-s} makes the integrand smooth up to the fixed point
    let s_end = -ratio.ln();
    let (beta, delta) = (params.beta, params.delta);
    let failure: Cell<Option<LimitError>> = Cell::new(None);
    let elapsed = integrate(
        |s, _, dy| {
            let u = h_inf - gap0 * (-s).exp();
            match solver.solve(u) {
                Ok(p) => dy[0] = (h_inf - u) / (delta * p - beta),
                Err(e) => {
                    failure.set(Some(e));
                    dy[0] = f64::NAN;
                }
            }
        },
        0.0,
        &[0.0],
        &[s_end],
        &OdeOptions {
            atol: 1e-12,
            rtol: 1e-11,
            ..OdeOptions::default()
        },
    );
    let elapsed = match elapsed {
        Ok(v) => v[0][0],
        Err(e) => return Err(failure.take().unwrap_or(LimitError::SolverStall(e))),
    };
    let slope = delta * solver.solve(h_t)? - beta;
    let linear = ((elapsed - t) * slope).abs();
    if elapsed < t {
        // the exact H(t) lies between h_t and the fixed point
        Ok(linear.min((h_t - h_inf).abs()))
    } else {
        Ok(linear)
    }
}

/// Per-type profile `f_j = rho_j c_j / (rho_j + phi(H))` along a mass curve.
pub fn limit_profile(params: &ModelParams, h: &LimitCurve) -> Result<LimitCurve, LimitError> {
    let solver = PhiSolver::new(params);
    let rhos = params.rhos();
    let values = h
        .values
        .iter()
        .map(|v| {
            let p = solver.solve(v[0])?;
            Ok(profile_at(&rhos, &params.c, p))
        })
        .collect::<Result<Vec<_>, LimitError>>()?;
    Ok(LimitCurve::new(h.grid.clone(), values))
}

/// The collapse curve point for agent level `p`.
pub fn profile_at(rhos: &[f64], c: &[f64], p: f64) -> Vec<f64> {
    rhos.iter().zip(c).map(|(&r, &cj)| r * cj / (r + p)).collect()
}

/// Drift of the overloaded fluid limit,
/// `eta_j (c_j - f_j) - lambda_j f_j <eta, c - f> / <lambda, f>`.
pub fn overloaded_drift(params: &ModelParams, f: &[f64], out: &mut [f64]) {
    let split: f64 = (0..f.len())
        .map(|j| params.eta[j] * (params.c[j] - f[j]))
        .sum();
    let pair: f64 = (0..f.len()).map(|j| params.lambda[j] * f[j]).sum();
    let level = split / pair;
    for j in 0..f.len() {
        out[j] = params.eta[j] * (params.c[j] - f[j]) - params.lambda[j] * f[j] * level;
    }
}

fn check_len(name: &'static str, got: usize, expected: usize) -> Result<(), LimitError> {
    if got == expected {
        Ok(())
    } else {
        Err(LimitError::LengthMismatch {
            name,
            got,
            expected,
        })
    }
}

fn check_r(r: f64) -> Result<(), LimitError> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(LimitError::DomainError {
            what: "agent fraction r",
            value: r,
        })
    }
}

/// Fluid limit of the overloaded regime with agent fraction `r`.
pub fn overloaded_ode(
    params: &ModelParams,
    r: f64,
    f0: &[f64],
    grid: &[f64],
) -> Result<LimitCurve, LimitError> {
    check_r(r)?;
    check_len("f0", f0.len(), params.num_types())?;
    check_grid(grid)?;
    let expected = 1.0 - r;
    let sum: f64 = f0.iter().sum();
    if (sum - expected).abs() > MASS_TOLERANCE {
        return Err(LimitError::InitMassMismatch { sum, expected });
    }
    for (&x, &c) in f0.iter().zip(&params.c) {
        if !(x > 0.0 && x <= c) {
            return Err(LimitError::DomainError {
                what: "overloaded initial fraction",
                value: x,
            });
        }
    }
    let values = integrate(
        |_, y, dy| overloaded_drift(params, y, dy),
        0.0,
        f0,
        grid,
        &OdeOptions::default(),
    )?;
    for (t, v) in grid.iter().zip(&values) {
        let drift = v.iter().sum::<f64>() - expected;
        if drift.abs() > MASS_TOLERANCE {
            return Err(LimitError::MassDrift { t: *t, drift });
        }
    }
    Ok(LimitCurve::new(grid.to_vec(), values))
}

/// Equilibrium of the overloaded fluid limit, `rho_j c_j / (rho_j + phi(1 - r))`.
pub fn overloaded_equilibrium(params: &ModelParams, r: f64) -> Result<Vec<f64>, LimitError> {
    check_r(r)?;
    let p = phi(params, 1.0 - r)?;
    Ok(profile_at(&params.rhos(), &params.c, p))
}

/// Drift of the critical fluid limit, `c_j eta_j - lambda_j f_j ||f||`.
pub fn critical_drift(params: &ModelParams, f: &[f64], out: &mut [f64]) {
    let mass: f64 = f.iter().sum();
    for j in 0..f.len() {
        out[j] = params.c[j] * params.eta[j] - params.lambda[j] * f[j] * mass;
    }
}

/// Fluid limit of the critical regime on the `sqrt(N)` scale.
pub fn critical_ode(
    params: &ModelParams,
    f0bar: &[f64],
    grid: &[f64],
) -> Result<LimitCurve, LimitError> {
    check_len("f0bar", f0bar.len(), params.num_types())?;
    check_grid(grid)?;
    if let Some(&bad) = f0bar.iter().find(|&&x| !(x >= 0.0 && x.is_finite())) {
        return Err(LimitError::DomainError {
            what: "critical initial condition",
            value: bad,
        });
    }
    let values = integrate(
        |_, y, dy| critical_drift(params, y, dy),
        0.0,
        f0bar,
        grid,
        &OdeOptions::default(),
    )?;
    Ok(LimitCurve::new(grid.to_vec(), values))
}

/// `c_j rho_j / sqrt(sum_k c_k rho_k)`.
pub fn critical_equilibrium(params: &ModelParams) -> Vec<f64> {
    let rhos = params.rhos();
    let norm: f64 = rhos.iter().zip(&params.c).map(|(r, c)| r * c).sum::<f64>().sqrt();
    rhos.iter().zip(&params.c).map(|(r, c)| c * r / norm).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionPath {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Diffusion coefficient `eta_j c_j + lambda_j f_j ||f||` of coordinate `j`.
pub fn clt_variance(params: &ModelParams, fbar: &[f64], j: usize) -> f64 {
    let mass: f64 = fbar.iter().sum();
    params.eta[j] * params.c[j] + params.lambda[j] * fbar[j] * mass
}

/// Cubic Hermite interpolation of the critical fluid path, using the ODE
/// derivative at the nodes.
struct FluidInterpolant<'a> {
    curve: &'a LimitCurve,
    slopes: Vec<Vec<f64>>,
}

impl<'a> FluidInterpolant<'a> {
    fn new(params: &ModelParams, curve: &'a LimitCurve) -> Self {
        let slopes = curve
            .values
            .iter()
            .map(|v| {
                let mut d = vec![0.0; v.len()];
                critical_drift(params, v, &mut d);
                d
            })
            .collect();
        Self { curve, slopes }
    }

    /// Value at `t` within grid interval `k`.
    fn eval(&self, k: usize, t: f64, out: &mut [f64]) {
        let g = &self.curve.grid;
        if k + 1 >= g.len() {
            out.copy_from_slice(&self.curve.values[g.len() - 1]);
            return;
        }
        let h = g[k + 1] - g[k];
        let s = ((t - g[k]) / h).clamp(0.0, 1.0);
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let (y0, y1) = (&self.curve.values[k], &self.curve.values[k + 1]);
        let (d0, d1) = (&self.slopes[k], &self.slopes[k + 1]);
        for j in 0..out.len() {
            out[j] = h00 * y0[j] + h10 * h * d0[j] + h01 * y1[j] + h11 * h * d1[j];
        }
    }
}

/// Euler–Maruyama solution of the critical fluctuation SDE
/// `dX_j = -lambda_j (X_j ||f|| + f_j sum_k X_k) dt + sqrt(eta_j c_j + lambda_j f_j ||f||) dB_j`
/// driven by the fluid path `fbar` (same grid), started at `fhat0`.
pub fn clt_diffusion(
    params: &ModelParams,
    fbar: &LimitCurve,
    fhat0: &[f64],
    grid: &[f64],
    seed: u64,
) -> Result<DiffusionPath, LimitError> {
    let mut rng = stream_rng(seed, 0);
    let mut noise = |dw: &mut [f64], h: f64| {
        let sd = h.sqrt();
        for x in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = sd * z;
        }
    };
    let values = euler_maruyama(params, fbar, fhat0, grid, None, &mut noise)?;
    Ok(DiffusionPath {
        grid: grid.to_vec(),
        values,
        seed,
    })
}

/// Marginals at the last grid time of `replications` independent diffusion
/// paths; path `i` uses stream `(seed, i)`.
pub fn clt_terminal_samples(
    params: &ModelParams,
    fbar: &LimitCurve,
    fhat0: &[f64],
    replications: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, LimitError> {
    use rayon::prelude::*;
    (0..replications)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut noise = |dw: &mut [f64], h: f64| {
                let sd = h.sqrt();
                for x in dw.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = sd * z;
                }
            };
            let path = euler_maruyama(params, fbar, fhat0, &fbar.grid, None, &mut noise)?;
            Ok(path.last().cloned().unwrap_or_default())
        })
        .collect()
}

/// Euler–Maruyama driver. `noise(dw, h)` fills the Brownian increments of one
/// step of length `h`. The step is `min(EM_MAX_STEP, spacing)` per grid
/// interval unless `step` is given.
pub(crate) fn euler_maruyama(
    params: &ModelParams,
    fbar: &LimitCurve,
    fhat0: &[f64],
    grid: &[f64],
    step: Option<f64>,
    noise: &mut dyn FnMut(&mut [f64], f64),
) -> Result<Vec<Vec<f64>>, LimitError> {
    let nt = params.num_types();
    check_len("fhat0", fhat0.len(), nt)?;
    check_grid(grid)?;
    if !fbar.same_grid(&LimitCurve::new(grid.to_vec(), vec![vec![]; grid.len()]), 1e-12)
        || fbar.dim() != nt
    {
        return Err(LimitError::GridMismatch);
    }
    for (t, v) in fbar.grid.iter().zip(&fbar.values) {
        for j in 0..nt {
            let var = clt_variance(params, v, j);
            if var < 0.0 || !var.is_finite() {
                return Err(LimitError::NegativeVariance {
                    t: *t,
                    j,
                    value: var,
                });
            }
        }
    }
    let interp = FluidInterpolant::new(params, fbar);
    let mut x = fhat0.to_vec();
    let mut out = Vec::with_capacity(grid.len());
    out.push(x.clone());
    let mut f = vec![0.0; nt];
    let mut dw = vec![0.0; nt];
    let mut drift = vec![0.0; nt];
    for k in 0..grid.len() - 1 {
        let span = grid[k + 1] - grid[k];
        let h_max = step.unwrap_or(EM_MAX_STEP).min(span);
        let n_steps = (span / h_max).ceil().max(1.0) as usize;
        let h = span / n_steps as f64;
        for i in 0..n_steps {
            let t = grid[k] + i as f64 * h;
            interp.eval(k, t, &mut f);
            let mass: f64 = f.iter().sum();
            let x_sum: f64 = x.iter().sum();
            noise(&mut dw, h);
            for j in 0..nt {
                drift[j] = -params.lambda[j] * (x[j] * mass + f[j] * x_sum);
                let var = clt_variance(params, &f, j).max(0.0);
                x[j] += drift[j] * h + var.sqrt() * dw[j];
            }
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Fixed point of the deterministic reaction network of a dynamic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrnFixedPoint {
    /// Free particles per type.
    pub u: Vec<f64>,
    /// Paired particles per type.
    pub v: Vec<f64>,
    /// Free agents.
    pub w: f64,
}

pub fn crn_fixed_point(model: &FiniteModel) -> Result<CrnFixedPoint, LimitError> {
    if model.regime != Regime::Dynamic {
        return Err(LimitError::UnsupportedRegime("the reaction-network fixed point"));
    }
    let w = model.params.rho0();
    let u: Vec<f64> = model
        .params
        .rhos()
        .iter()
        .zip(&model.capacities)
        .map(|(&r, &cap)| cap as f64 * r / (r + w))
        .collect();
    let v = u
        .iter()
        .zip(&model.capacities)
        .map(|(&uj, &cap)| cap as f64 - uj)
        .collect();
    Ok(CrnFixedPoint { u, v, w })
}
