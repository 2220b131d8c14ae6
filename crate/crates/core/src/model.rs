//! Model parameters, scaled finite instances and the transition-rate function.
//!
//! A particle of type `j` and a free agent pair at rate `lambda_j`, a pair of
//! type `j` splits at rate `eta_j`. In the dynamic regime agents are created at
//! rate `beta` and free agents die at rate `delta`; in the fixed regimes the
//! agent population is constant and the free-agent count is a function of the
//! free-particle counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `sum(c) == 1`.
pub const PROPORTION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model has no particle types")]
    EmptyModel,
    #[error("rate `{name}` must be positive (got {value})")]
    NonPositiveRate { name: String, value: f64 },
    #[error("proportions sum to {sum}, expected 1")]
    ProportionsDoNotSumToOne { sum: f64 },
    #[error("vector `{name}` has length {got}, expected {expected}")]
    LengthMismatch {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("N = {n} is too small: capacity of type {index} would be 0")]
    NTooSmall { n: u64, index: usize },
    #[error("agent fraction r = {r} gives C_Z = {agents}, need 0 < C_Z < N = {n}")]
    InvalidAgentCount { r: f64, agents: u64, n: u64 },
    #[error("invalid state: {0}")]
    InvalidState(String),
}

/// Rates and proportions of the pairing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Asymptotic proportions of each particle type.
    pub c: Vec<f64>,
    /// Pairing rate per (particle, agent) couple.
    pub lambda: Vec<f64>,
    /// Splitting rate per pair.
    pub eta: Vec<f64>,
    /// Agent creation rate.
    pub beta: f64,
    /// Death rate of a free agent.
    pub delta: f64,
}

impl ModelParams {
    pub fn new(
        c: Vec<f64>,
        lambda: Vec<f64>,
        eta: Vec<f64>,
        beta: f64,
        delta: f64,
    ) -> Result<Self, ModelError> {
        Self {
            c,
            lambda,
            eta,
            beta,
            delta,
        }
        .validate()
    }

    /// Checks every invariant and hands the parameters back unchanged.
    pub fn validate(self) -> Result<Self, ModelError> {
        let j = self.c.len();
        if j == 0 {
            return Err(ModelError::EmptyModel);
        }
        for (name, v) in [("lambda", &self.lambda), ("eta", &self.eta)] {
            if v.len() != j {
                return Err(ModelError::LengthMismatch {
                    name,
                    got: v.len(),
                    expected: j,
                });
            }
        }
        let positive = |name: String, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(ModelError::NonPositiveRate { name, value })
            }
        };
        for (i, &c) in self.c.iter().enumerate() {
            positive(format!("c[{i}]"), c)?;
        }
        for (i, &l) in self.lambda.iter().enumerate() {
            positive(format!("lambda[{i}]"), l)?;
        }
        for (i, &e) in self.eta.iter().enumerate() {
            positive(format!("eta[{i}]"), e)?;
        }
        positive("delta".into(), self.delta)?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ModelError::NonPositiveRate {
                name: "beta".into(),
                value: self.beta,
            });
        }
        let sum: f64 = self.c.iter().sum();
        if (sum - 1.0).abs() > PROPORTION_TOLERANCE {
            return Err(ModelError::ProportionsDoNotSumToOne { sum });
        }
        Ok(self)
    }

    /// Number of particle types `J`.
    pub fn num_types(&self) -> usize {
        self.c.len()
    }

    /// `beta / delta`.
    pub fn rho0(&self) -> f64 {
        self.beta / self.delta
    }

    /// `eta_j / lambda_j`.
    pub fn rho(&self, j: usize) -> f64 {
        self.eta[j] / self.lambda[j]
    }

    pub fn rhos(&self) -> Vec<f64> {
        (0..self.num_types()).map(|j| self.rho(j)).collect()
    }

    pub fn max_eta(&self) -> f64 {
        self.eta.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn min_lambda(&self) -> f64 {
        self.lambda.iter().copied().fold(f64::MAX, f64::min)
    }
}

/// How the agent population behaves, as requested before integerization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegimeRequest {
    Dynamic,
    /// Fixed agent count `round(r N)` with `0 < r < 1`.
    Overloaded { r: f64 },
    /// Fixed agent count exactly `N`.
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Dynamic,
    FixedOverloaded { agents: u64 },
    FixedCritical,
}

impl Regime {
    pub fn is_fixed(&self) -> bool {
        !matches!(self, Regime::Dynamic)
    }
}

/// A scaled instance: integer capacities summing to `N` and an agent regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteModel {
    pub params: ModelParams,
    pub n: u64,
    pub capacities: Vec<u64>,
    pub regime: Regime,
}

/// Largest-remainder apportionment of `c_j N`; ties go to the lowest index.
pub fn apportion(c: &[f64], n: u64) -> Vec<u64> {
    let quotas: Vec<f64> = c.iter().map(|&cj| cj * n as f64).collect();
    let mut seats: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = seats.iter().sum();
    let mut left = n.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..c.len()).collect();
    // stable sort keeps lower indices first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        seats[j] += 1;
        left -= 1;
    }
    seats
}

/// Builds the finite instance for scaling parameter `n`.
pub fn build_finite(
    params: ModelParams,
    n: u64,
    regime: RegimeRequest,
) -> Result<FiniteModel, ModelError> {
    let params = params.validate()?;
    let capacities = apportion(&params.c, n);
    if let Some(index) = capacities.iter().position(|&cj| cj == 0) {
        return Err(ModelError::NTooSmall { n, index });
    }
    let regime = match regime {
        RegimeRequest::Dynamic => Regime::Dynamic,
        RegimeRequest::Critical => Regime::FixedCritical,
        RegimeRequest::Overloaded { r } => {
            let agents = (r * n as f64).round();
            let agents = if agents.is_finite() && agents > 0.0 {
                agents as u64
            } else {
                0
            };
            if !(r > 0.0 && r < 1.0) || agents == 0 || agents >= n {
                return Err(ModelError::InvalidAgentCount { r, agents, n });
            }
            Regime::FixedOverloaded { agents }
        }
    };
    Ok(FiniteModel {
        params,
        n,
        capacities,
        regime,
    })
}

/// Free-particle counts and free-agent count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub f: Vec<u64>,
    pub z: u64,
}

impl State {
    pub fn new(f: Vec<u64>, z: u64) -> Self {
        Self { f, z }
    }
}

/// `||f|| = sum_j f_j`.
pub fn total_free(s: &State) -> u64 {
    s.f.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransitionKind {
    Pair(usize),
    Split(usize),
    AgentBirth,
    AgentDeath,
}

impl TransitionKind {
    /// Position of this kind in the flat rate vector used by the simulators:
    /// `[pair_0 .. pair_{J-1}, split_0 .. split_{J-1}, birth, death]`.
    pub fn index(&self, num_types: usize) -> usize {
        match *self {
            TransitionKind::Pair(j) => j,
            TransitionKind::Split(j) => num_types + j,
            TransitionKind::AgentBirth => 2 * num_types,
            TransitionKind::AgentDeath => 2 * num_types + 1,
        }
    }

    pub fn from_index(index: usize, num_types: usize) -> Self {
        if index < num_types {
            TransitionKind::Pair(index)
        } else if index < 2 * num_types {
            TransitionKind::Split(index - num_types)
        } else if index == 2 * num_types {
            TransitionKind::AgentBirth
        } else {
            TransitionKind::AgentDeath
        }
    }

    /// Change of the free-agent count.
    pub fn delta_z(&self) -> i64 {
        match self {
            TransitionKind::Pair(_) | TransitionKind::AgentDeath => -1,
            TransitionKind::Split(_) | TransitionKind::AgentBirth => 1,
        }
    }

    /// Index and sign of the free-particle change, if any.
    pub fn particle_change(&self) -> Option<(usize, i64)> {
        match *self {
            TransitionKind::Pair(j) => Some((j, -1)),
            TransitionKind::Split(j) => Some((j, 1)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub kind: TransitionKind,
    pub rate: f64,
    pub delta_f: Vec<i64>,
    pub delta_z: i64,
}

impl Transition {
    /// Applies the jump to `s`. The caller guarantees the rate is positive.
    pub fn apply(&self, s: &State) -> State {
        let f = s
            .f
            .iter()
            .zip(&self.delta_f)
            .map(|(&x, &d)| (x as i64 + d) as u64)
            .collect();
        State {
            f,
            z: (s.z as i64 + self.delta_z) as u64,
        }
    }
}

impl FiniteModel {
    pub fn num_types(&self) -> usize {
        self.capacities.len()
    }

    /// Number of rate slots in [`FiniteModel::rates_into`].
    pub fn num_channels(&self) -> usize {
        2 * self.num_types() + 2
    }

    /// Total number of agents for the fixed regimes.
    pub fn fixed_agents(&self) -> Option<u64> {
        match self.regime {
            Regime::Dynamic => None,
            Regime::FixedOverloaded { agents } => Some(agents),
            Regime::FixedCritical => Some(self.n),
        }
    }

    /// Free-agent count forced by the free-particle counts in a fixed regime:
    /// `C_Z + ||f|| - N`, or `None` when that is negative or the regime is dynamic.
    pub fn forced_free_agents(&self, f: &[u64]) -> Option<u64> {
        let agents = self.fixed_agents()?;
        let free: u64 = f.iter().sum();
        (agents + free).checked_sub(self.n)
    }

    /// State of a fixed regime with the regime-determined free-agent count.
    pub fn fixed_state(&self, f: Vec<u64>) -> Result<State, ModelError> {
        let z = self.forced_free_agents(&f).ok_or_else(|| {
            ModelError::InvalidState(format!(
                "free-particle counts {f:?} leave a negative number of free agents"
            ))
        })?;
        let s = State { f, z };
        self.check_state(&s)?;
        Ok(s)
    }

    pub fn check_state(&self, s: &State) -> Result<(), ModelError> {
        if s.f.len() != self.num_types() {
            return Err(ModelError::InvalidState(format!(
                "state has {} particle types, model has {}",
                s.f.len(),
                self.num_types()
            )));
        }
        for (j, (&fj, &cj)) in s.f.iter().zip(&self.capacities).enumerate() {
            if fj > cj {
                return Err(ModelError::InvalidState(format!(
                    "f[{j}] = {fj} exceeds capacity {cj}"
                )));
            }
        }
        if self.regime.is_fixed() {
            match self.forced_free_agents(&s.f) {
                Some(z) if z == s.z => {}
                expected => {
                    return Err(ModelError::InvalidState(format!(
                        "free agents z = {} but the fixed regime forces {:?}",
                        s.z, expected
                    )))
                }
            }
        }
        Ok(())
    }

    /// Writes every channel rate for `(f, z)` into `out`, in the order of
    /// [`TransitionKind::index`]. This is the Q-matrix shared by all simulators
    /// and by the stationary-law checks.
    #[inline]
    pub fn rates_into(&self, f: &[u64], z: u64, out: &mut [f64]) {
        let nt = self.num_types();
        let p = &self.params;
        let zf = z as f64;
        for j in 0..nt {
            let fj = f[j] as f64;
            out[j] = p.lambda[j] * fj * zf;
            out[nt + j] = p.eta[j] * (self.capacities[j] - f[j]) as f64;
        }
        if self.regime.is_fixed() {
            out[2 * nt] = 0.0;
            out[2 * nt + 1] = 0.0;
        } else {
            out[2 * nt] = p.beta;
            out[2 * nt + 1] = p.delta * zf;
        }
    }

    /// Rate of a single channel.
    pub fn rate(&self, s: &State, kind: TransitionKind) -> f64 {
        let mut out = vec![0.0; self.num_channels()];
        self.rates_into(&s.f, s.z, &mut out);
        out[kind.index(self.num_types())]
    }

    /// All transitions with positive rate out of `s`.
    pub fn enabled_transitions(&self, s: &State) -> Result<Vec<Transition>, ModelError> {
        self.check_state(s)?;
        let nt = self.num_types();
        let mut rates = vec![0.0; self.num_channels()];
        self.rates_into(&s.f, s.z, &mut rates);
        Ok(rates
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0.0)
            .map(|(i, &rate)| {
                let kind = TransitionKind::from_index(i, nt);
                let mut delta_f = vec![0; nt];
                if let Some((j, d)) = kind.particle_change() {
                    delta_f[j] = d;
                }
                Transition {
                    kind,
                    rate,
                    delta_f,
                    delta_z: kind.delta_z(),
                }
            })
            .collect())
    }

    /// State with `round(fraction_j * N)` free particles of each type, clamped to
    /// the capacities, and `z0` free agents (ignored in fixed regimes).
    pub fn state_from_fractions(&self, fractions: &[f64], z0: u64) -> Result<State, ModelError> {
        if fractions.len() != self.num_types() {
            return Err(ModelError::LengthMismatch {
                name: "initial fractions",
                got: fractions.len(),
                expected: self.num_types(),
            });
        }
        let f: Vec<u64> = fractions
            .iter()
            .zip(&self.capacities)
            .map(|(&x, &cj)| ((x * self.n as f64).round().max(0.0) as u64).min(cj))
            .collect();
        if self.regime.is_fixed() {
            self.fixed_state(f)
        } else {
            let s = State { f, z: z0 };
            self.check_state(&s)?;
            Ok(s)
        }
    }
}
