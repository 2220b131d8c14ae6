//! Product-form stationary laws on small instances.
//!
//! Dynamic regime: `pi(f, z) ∝ w^z/z! prod_j u_j^{f_j}/f_j! v_j^{C_j-f_j}/(C_j-f_j)!`
//! with `(u, v, w)` the reaction-network fixed point, truncated at `z <= z_cap`.
//! Critical regime: `pi(x) ∝ (1/||x||!) prod_j rho_j^{x_j} binom(C_j, x_j)`.
//!
//! Log weights are accumulated in double-double arithmetic so that ratios of
//! neighbouring weights stay accurate to a few ulps even when each weight is
//! a sum of tens of thousands of logarithms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limits::crn_fixed_point;
use crate::model::{FiniteModel, ModelParams, Regime, State, TransitionKind};

/// Largest enumerable state space.
pub const MAX_STATES: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StationaryError {
    #[error("no closed-form stationary law for the {0} regime")]
    UnsupportedRegime(&'static str),
    #[error("state space of {size} states exceeds the enumeration limit")]
    SpaceTooLarge { size: u128 },
    #[error("state {0:?} is not valid for the model")]
    InvalidState(State),
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const NEG_INF: Dd = Dd {
        hi: f64::NEG_INFINITY,
        lo: 0.0,
    };

    fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn add(self, o: Dd) -> Dd {
        if !self.hi.is_finite() || !o.hi.is_finite() {
            return Dd::from(self.hi + o.hi);
        }
        let s = self.hi + o.hi;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (o.hi - bb);
        let lo = err + self.lo + o.lo;
        let hi = s + lo;
        Dd {
            hi,
            lo: lo - (hi - s),
        }
    }

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    /// Exact product of two doubles.
    fn mul(a: f64, b: f64) -> Dd {
        let p = a * b;
        if !p.is_finite() {
            return Dd::from(p);
        }
        Dd {
            hi: p,
            lo: a.mul_add(b, -p),
        }
    }

    pub(crate) fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `n * ln(y)` with the convention `0 * ln(0) = 0`.
fn xlogy(n: u64, y: f64) -> Dd {
    if n == 0 {
        Dd::default()
    } else {
        Dd::mul(n as f64, y.ln())
    }
}

/// `ln k!` for `k <= max`, each entry the running double-double sum of `ln i`.
#[derive(Debug, Clone)]
struct LogFactorials(Vec<Dd>);

impl LogFactorials {
    fn new(max: u64) -> Self {
        let mut v = Vec::with_capacity(max as usize + 1);
        let mut acc = Dd::default();
        v.push(acc);
        for i in 1..=max {
            acc = acc.add(Dd::from((i as f64).ln()));
            v.push(acc);
        }
        Self(v)
    }

    fn get(&self, k: u64) -> Dd {
        self.0[k as usize]
    }
}

/// Log-weight evaluator for one model.
#[derive(Debug, Clone)]
pub(crate) struct WeightFn {
    kind: WeightKind,
    capacities: Vec<u64>,
    facts: LogFactorials,
}

#[derive(Debug, Clone)]
enum WeightKind {
    Dynamic { u: Vec<f64>, v: Vec<f64>, w: f64 },
    Critical { rho: Vec<f64> },
}

impl WeightFn {
    /// Weights for `model`'s state space using the rates in `params`.
    pub(crate) fn new(
        model: &FiniteModel,
        params: &ModelParams,
        z_cap: u64,
    ) -> Result<Self, StationaryError> {
        let mut m = model.clone();
        m.params = params.clone();
        let n: u64 = m.capacities.iter().sum();
        let kind = match m.regime {
            Regime::Dynamic => {
                let fp = crn_fixed_point(&m)
                    .map_err(|_| StationaryError::UnsupportedRegime("dynamic"))?;
                WeightKind::Dynamic {
                    u: fp.u,
                    v: fp.v,
                    w: fp.w,
                }
            }
            Regime::FixedCritical => WeightKind::Critical { rho: params.rhos() },
            Regime::FixedOverloaded { .. } => {
                return Err(StationaryError::UnsupportedRegime("overloaded"))
            }
        };
        Ok(Self {
            kind,
            capacities: m.capacities,
            facts: LogFactorials::new(n.max(z_cap) + 1),
        })
    }

    pub(crate) fn log_weight(&self, s: &State) -> Dd {
        let mut acc = Dd::default();
        match &self.kind {
            WeightKind::Dynamic { u, v, w } => {
                acc = acc.add(xlogy(s.z, *w)).add(self.facts.get(s.z).neg());
                for j in 0..self.capacities.len() {
                    let g = self.capacities[j] - s.f[j];
                    acc = acc
                        .add(xlogy(s.f[j], u[j]))
                        .add(self.facts.get(s.f[j]).neg())
                        .add(xlogy(g, v[j]))
                        .add(self.facts.get(g).neg());
                }
            }
            WeightKind::Critical { rho } => {
                let mass: u64 = s.f.iter().sum();
                acc = acc.add(self.facts.get(mass).neg());
                for j in 0..self.capacities.len() {
                    let (x, c) = (s.f[j], self.capacities[j]);
                    acc = acc
                        .add(xlogy(x, rho[j]))
                        .add(self.facts.get(c))
                        .add(self.facts.get(x).neg())
                        .add(self.facts.get(c - x).neg());
                }
            }
        }
        if acc.hi.is_nan() {
            Dd::NEG_INF
        } else {
            acc
        }
    }
}

/// Default truncation of the free-agent count for the dynamic regime.
pub fn default_z_cap(params: &ModelParams) -> u64 {
    (10.0 * params.rho0()).ceil().max(30.0) as u64
}

/// Unnormalized log stationary weight of `s`.
pub fn stationary_weight(model: &FiniteModel, s: &State) -> Result<f64, StationaryError> {
    model
        .check_state(s)
        .map_err(|_| StationaryError::InvalidState(s.clone()))?;
    let wf = WeightFn::new(model, &model.params, s.z)?;
    Ok(wf.log_weight(s).value())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryTable {
    pub model: FiniteModel,
    /// Truncation level of `z` (dynamic regime only).
    pub z_cap: Option<u64>,
    pub log_weights: BTreeMap<State, f64>,
    pub log_z: f64,
}

impl StationaryTable {
    /// Normalized probability of `s` (0 outside the table).
    pub fn probability(&self, s: &State) -> f64 {
        self.log_weights
            .get(s)
            .map_or(0.0, |lw| (lw - self.log_z).exp())
    }

    pub fn law(&self) -> BTreeMap<State, f64> {
        self.log_weights
            .iter()
            .map(|(s, lw)| (s.clone(), (lw - self.log_z).exp()))
            .collect()
    }

    /// `E ||F||` under the table.
    pub fn mean_free_mass(&self) -> f64 {
        self.log_weights
            .iter()
            .map(|(s, lw)| (lw - self.log_z).exp() * s.f.iter().sum::<u64>() as f64)
            .sum()
    }
}

fn space_size(model: &FiniteModel, z_layers: u64) -> u128 {
    model
        .capacities
        .iter()
        .fold(z_layers as u128, |acc, &c| acc.saturating_mul(c as u128 + 1))
}

/// All valid states of a fixed-critical model, or of a dynamic model with
/// `z <= z_cap`, in lexicographic order.
pub fn enumerate_states(model: &FiniteModel, z_cap: u64) -> Result<Vec<State>, StationaryError> {
    let z_layers = match model.regime {
        Regime::Dynamic => z_cap + 1,
        Regime::FixedCritical => 1,
        Regime::FixedOverloaded { .. } => {
            return Err(StationaryError::UnsupportedRegime("overloaded"))
        }
    };
    let size = space_size(model, z_layers);
    if size > MAX_STATES {
        return Err(StationaryError::SpaceTooLarge { size });
    }
    let nt = model.num_types();
    let mut out = Vec::with_capacity(size as usize);
    let mut f = vec![0u64; nt];
    loop {
        match model.regime {
            Regime::Dynamic => {
                for z in 0..=z_cap {
                    out.push(State::new(f.clone(), z));
                }
            }
            _ => {
                let z = f.iter().sum();
                out.push(State::new(f.clone(), z));
            }
        }
        // odometer over f
        let mut j = nt;
        loop {
            if j == 0 {
                return Ok(out);
            }
            j -= 1;
            if f[j] < model.capacities[j] {
                f[j] += 1;
                break;
            }
            f[j] = 0;
        }
    }
}

/// Exact normalization by enumeration. `z_cap` defaults to [`default_z_cap`]
/// and is ignored outside the dynamic regime.
pub fn enumerate_z(
    model: &FiniteModel,
    z_cap: Option<u64>,
) -> Result<StationaryTable, StationaryError> {
    let cap = match model.regime {
        Regime::Dynamic => Some(z_cap.unwrap_or_else(|| default_z_cap(&model.params))),
        _ => None,
    };
    let states = enumerate_states(model, cap.unwrap_or(0))?;
    let wf = WeightFn::new(model, &model.params, cap.unwrap_or(0))?;
    let logs: Vec<f64> = states.iter().map(|s| wf.log_weight(s).value()).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    Ok(StationaryTable {
        model: model.clone(),
        z_cap: cap,
        log_weights: states.into_iter().zip(logs).collect(),
        log_z,
    })
}

fn step(s: &State, kind: TransitionKind) -> State {
    let mut t = s.clone();
    match kind {
        TransitionKind::Pair(j) => {
            t.f[j] -= 1;
            t.z -= 1;
        }
        TransitionKind::Split(j) => {
            t.f[j] += 1;
            t.z += 1;
        }
        TransitionKind::AgentBirth => t.z += 1,
        TransitionKind::AgentDeath => t.z -= 1,
    }
    t
}

/// Largest relative detailed-balance defect of the critical chain over all
/// neighbouring pairs: `|pi(x) q(x,y) - pi(y) q(y,x)| / (pi(x) q(x,y))`.
pub fn check_detailed_balance(model: &FiniteModel) -> Result<f64, StationaryError> {
    detailed_balance_residual(model, &model.params)
}

/// As [`check_detailed_balance`], with weights built from `weight_params`
/// while the rates come from `model`. A mismatch probes the sensitivity.
pub fn detailed_balance_residual(
    model: &FiniteModel,
    weight_params: &ModelParams,
) -> Result<f64, StationaryError> {
    if model.regime != Regime::FixedCritical {
        return Err(StationaryError::UnsupportedRegime(
            "non-critical (detailed balance)",
        ));
    }
    let states = enumerate_states(model, 0)?;
    let wf = WeightFn::new(model, weight_params, 0)?;
    let logs: Vec<Dd> = states.iter().map(|s| wf.log_weight(s)).collect();
    let index: BTreeMap<&State, usize> = states.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let max = logs.iter().map(|d| d.hi).fold(f64::NEG_INFINITY, f64::max);
    let nt = model.num_types();
    let mut rates = vec![0.0; model.num_channels()];
    let mut back = vec![0.0; model.num_channels()];
    let mut worst: f64 = 0.0;
    // below this, both sides of the identity underflow as probabilities
    let floor = max - 700.0;
    for (i, s) in states.iter().enumerate() {
        model.rates_into(&s.f, s.z, &mut rates);
        for j in 0..nt {
            // each unordered pair once: the split move x -> x + e_j
            let q_xy = rates[nt + j];
            if q_xy <= 0.0 {
                continue;
            }
            let t = step(s, TransitionKind::Split(j));
            let k = index[&t];
            model.rates_into(&t.f, t.z, &mut back);
            let q_yx = back[j];
            let lhs = logs[i].add(Dd::from(q_xy.ln()));
            let rhs = logs[k].add(Dd::from(q_yx.ln()));
            if lhs.hi < floor && rhs.hi < floor {
                continue;
            }
            let delta = rhs.add(lhs.neg()).value();
            let r = if lhs.hi >= rhs.hi {
                delta.exp_m1().abs()
            } else {
                // normalize by the larger flux to keep the ratio bounded
                (-delta).exp_m1().abs()
            };
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Largest global-balance defect `|sum_y pi(y) q(y,x) - pi(x) q(x)|` over the
/// table, in normalized probability units. Rates are those of the full chain,
/// so probability leaking over the truncation level shows up as a defect.
pub fn global_balance_residual(
    model: &FiniteModel,
    table: &StationaryTable,
) -> Result<f64, StationaryError> {
    if matches!(model.regime, Regime::FixedOverloaded { .. }) {
        return Err(StationaryError::UnsupportedRegime("overloaded"));
    }
    let nt = model.num_types();
    let nc = model.num_channels();
    let mut rates = vec![0.0; nc];
    let mut worst: f64 = 0.0;
    for (s, &lw) in &table.log_weights {
        let p = (lw - table.log_z).exp();
        model.rates_into(&s.f, s.z, &mut rates);
        let out: f64 = p * rates.iter().sum::<f64>();
        let mut inflow = 0.0;
        for c in 0..nc {
            let kind = TransitionKind::from_index(c, nt);
            // predecessor y with y --kind--> s
            let Some(y) = predecessor(model, s, kind) else {
                continue;
            };
            let Some(&ly) = table.log_weights.get(&y) else {
                continue;
            };
            let mut r = vec![0.0; nc];
            model.rates_into(&y.f, y.z, &mut r);
            inflow += (ly - table.log_z).exp() * r[c];
        }
        worst = worst.max((inflow - out).abs());
    }
    Ok(worst)
}

fn predecessor(model: &FiniteModel, s: &State, kind: TransitionKind) -> Option<State> {
    let mut y = s.clone();
    match kind {
        TransitionKind::Pair(j) => {
            if s.f[j] >= model.capacities[j] {
                return None;
            }
            y.f[j] += 1;
            y.z += 1;
        }
        TransitionKind::Split(j) => {
            if s.f[j] == 0 || s.z == 0 {
                return None;
            }
            y.f[j] -= 1;
            y.z -= 1;
        }
        TransitionKind::AgentBirth => {
            if s.z == 0 || model.regime.is_fixed() {
                return None;
            }
            y.z -= 1;
        }
        TransitionKind::AgentDeath => {
            if model.regime.is_fixed() {
                return None;
            }
            y.z += 1;
        }
    }
    Some(y)
}
