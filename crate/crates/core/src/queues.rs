//! M/M/1 and M/M/∞ birth–death chains: exact paths, hitting times and the
//! scaled hitting-time statistics whose limits are exponential.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{exponential, stream_rng};

pub const QUEUE_MAX_EVENTS: u64 = 1_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("invalid queue parameters: {0}")]
    InvalidSpec(String),
    #[error("M/M/1 with gamma = {gamma} >= mu = {mu} has no scaled hitting limit")]
    UnstableMM1 { gamma: f64, mu: f64 },
    #[error("level {level} not reached within {events} events")]
    Nonconvergence { level: u64, events: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueKind {
    /// Single server: departures at rate `mu` when non-empty.
    MM1,
    /// Infinitely many servers: departures at rate `mu` per customer.
    MMInf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BirthDeathSpec {
    pub kind: QueueKind,
    pub gamma: f64,
    pub mu: f64,
    pub init: u64,
}

impl BirthDeathSpec {
    pub fn new(kind: QueueKind, gamma: f64, mu: f64, init: u64) -> Result<Self, QueueError> {
        let s = Self {
            kind,
            gamma,
            mu,
            init,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), QueueError> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(QueueError::InvalidSpec(format!("gamma = {}", self.gamma)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(QueueError::InvalidSpec(format!("mu = {}", self.mu)));
        }
        Ok(())
    }

    #[inline]
    pub fn down_rate(&self, x: u64) -> f64 {
        match self.kind {
            QueueKind::MM1 => {
                if x > 0 {
                    self.mu
                } else {
                    0.0
                }
            }
            QueueKind::MMInf => self.mu * x as f64,
        }
    }

    /// Stationary probability of `k`: geometric for M/M/1 (when stable),
    /// Poisson for M/M/∞.
    pub fn stationary_pmf(&self, k: u64) -> f64 {
        let rho = self.gamma / self.mu;
        match self.kind {
            QueueKind::MM1 => (1.0 - rho) * rho.powi(k as i32),
            QueueKind::MMInf => {
                let lf: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
                (k as f64 * rho.ln() - rho - lf).exp()
            }
        }
    }

    /// `E L(t)` for the M/M/∞ queue.
    pub fn mminf_mean(&self, t: f64) -> f64 {
        let m = self.gamma / self.mu;
        m + (self.init as f64 - m) * (-self.mu * t).exp()
    }
}

/// One exact path on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdPath {
    pub horizon: f64,
    /// Jump times, starting with 0 for the initial value.
    pub times: Vec<f64>,
    pub values: Vec<u64>,
}

impl BdPath {
    pub fn value_at(&self, t: f64) -> u64 {
        let k = self.times.partition_point(|&s| s <= t);
        self.values[k.saturating_sub(1)]
    }

    pub fn down_jumps(&self) -> usize {
        self.values.windows(2).filter(|w| w[1] < w[0]).count()
    }

    /// Fraction of `[0, horizon]` spent in each level.
    pub fn time_average_law(&self) -> Vec<f64> {
        let max = self.values.iter().copied().max().unwrap_or(0) as usize;
        let mut law = vec![0.0; max + 1];
        for i in 0..self.values.len() {
            let end = self.times.get(i + 1).copied().unwrap_or(self.horizon);
            law[self.values[i] as usize] += end - self.times[i];
        }
        law.iter_mut().for_each(|x| *x /= self.horizon);
        law
    }
}

pub fn bd_simulate(spec: &BirthDeathSpec, horizon: f64, seed: u64) -> Result<BdPath, QueueError> {
    spec.validate()?;
    let mut rng = stream_rng(seed, 0);
    let mut x = spec.init;
    let mut t = 0.0;
    let mut path = BdPath {
        horizon,
        times: vec![0.0],
        values: vec![x],
    };
    for _ in 0..QUEUE_MAX_EVENTS {
        let (up, down) = (spec.gamma, spec.down_rate(x));
        let total = up + down;
        if total <= 0.0 {
            return Ok(path);
        }
        t += exponential(&mut rng, total);
        if t > horizon {
            return Ok(path);
        }
        if rng.random::<f64>() * total < up {
            x += 1;
        } else {
            x -= 1;
        }
        path.times.push(t);
        path.values.push(x);
    }
    Err(QueueError::Nonconvergence {
        level: x,
        events: QUEUE_MAX_EVENTS,
    })
}

/// First time the chain reaches `level`; stream `(seed, stream)`.
pub fn hitting_time_stream(
    spec: &BirthDeathSpec,
    level: u64,
    seed: u64,
    stream: u64,
) -> Result<f64, QueueError> {
    spec.validate()?;
    if spec.init >= level {
        return Ok(0.0);
    }
    if spec.gamma == 0.0 {
        return Err(QueueError::Nonconvergence { level, events: 0 });
    }
    let mut rng = stream_rng(seed, stream);
    let mut x = spec.init;
    let mut t = 0.0;
    for _ in 0..QUEUE_MAX_EVENTS {
        let (up, down) = (spec.gamma, spec.down_rate(x));
        let total = up + down;
        t += exponential(&mut rng, total);
        if rng.random::<f64>() * total < up {
            x += 1;
            if x >= level {
                return Ok(t);
            }
        } else {
            x -= 1;
        }
    }
    Err(QueueError::Nonconvergence {
        level,
        events: QUEUE_MAX_EVENTS,
    })
}

pub fn hitting_time(spec: &BirthDeathSpec, level: u64, seed: u64) -> Result<f64, QueueError> {
    hitting_time_stream(spec, level, seed, 0)
}

/// Scale applied to `T_K`: `(gamma/mu)^K` for M/M/1 and
/// `(gamma/mu)^K / (K-1)!` for M/M/∞.
pub fn hitting_scale(spec: &BirthDeathSpec, level: u64) -> f64 {
    let rho = spec.gamma / spec.mu;
    let base = level as f64 * rho.ln();
    match spec.kind {
        QueueKind::MM1 => base.exp(),
        QueueKind::MMInf => {
            let lf: f64 = (1..level).map(|i| (i as f64).ln()).sum();
            (base - lf).exp()
        }
    }
}

/// `R` scaled hitting times of `level`; replicate `i` uses stream `(seed, i)`.
pub fn scaled_hitting_law(
    spec: &BirthDeathSpec,
    level: u64,
    replications: usize,
    seed: u64,
) -> Result<Vec<f64>, QueueError> {
    spec.validate()?;
    if spec.kind == QueueKind::MM1 && spec.gamma >= spec.mu {
        return Err(QueueError::UnstableMM1 {
            gamma: spec.gamma,
            mu: spec.mu,
        });
    }
    let scale = hitting_scale(spec, level);
    (0..replications)
        .into_par_iter()
        .map(|i| hitting_time_stream(spec, level, seed, i as u64).map(|t| t * scale))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(a: &[f64], b: impl Fn(u64) -> f64) -> f64 {
        // include the tail of the reference beyond the observed support
        let inside: f64 = (0..a.len()).map(|k| b(k as u64)).sum();
        let diff: f64 = a
            .iter()
            .enumerate()
            .map(|(k, &p)| (p - b(k as u64)).abs())
            .sum();
        0.5 * (diff + (1.0 - inside).max(0.0))
    }

    #[test]
    fn pure_death_is_absorbed() {
        let s = BirthDeathSpec::new(QueueKind::MMInf, 0.0, 1.0, 5).unwrap();
        let p = bd_simulate(&s, 1e3, 1).unwrap();
        assert_eq!(*p.values.last().unwrap(), 0);
        assert_eq!(p.down_jumps(), 5);
        assert_eq!(p.values.len(), 6);
    }

    #[test]
    fn long_run_laws() {
        let s = BirthDeathSpec::new(QueueKind::MM1, 0.5, 1.0, 0).unwrap();
        let law = bd_simulate(&s, 2e5, 2).unwrap().time_average_law();
        assert!(tv(&law, |k| s.stationary_pmf(k)) <= 0.02);

        let s = BirthDeathSpec::new(QueueKind::MMInf, 3.0, 1.0, 0).unwrap();
        let law = bd_simulate(&s, 2e5, 3).unwrap().time_average_law();
        assert!(tv(&law, |k| s.stationary_pmf(k)) <= 0.02);
    }

    #[test]
    fn hitting_edge_cases() {
        let s = BirthDeathSpec::new(QueueKind::MM1, 0.5, 1.0, 4).unwrap();
        assert_eq!(hitting_time(&s, 4, 0).unwrap(), 0.0);
        let s = BirthDeathSpec::new(QueueKind::MM1, 0.0, 1.0, 0).unwrap();
        assert!(hitting_time(&s, 1, 0).is_err());
        let s = BirthDeathSpec::new(QueueKind::MM1, 2.0, 1.0, 0).unwrap();
        assert!(matches!(
            scaled_hitting_law(&s, 3, 10, 0),
            Err(QueueError::UnstableMM1 { .. })
        ));
        assert!(BirthDeathSpec::new(QueueKind::MM1, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn one_step_hitting_mean() {
        // level-by-level recursion m_i = (1 + d_i m_{i-1}) / gamma, exact
        let (g, mu) = (50.0, 1.0);
        let s = BirthDeathSpec::new(QueueKind::MMInf, g, mu, 3).unwrap();
        let mut m = 0.0;
        for i in 0..=3u64 {
            m = (1.0 + s.down_rate(i) * m) / g;
        }
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|i| hitting_time_stream(&s, 4, 9, i).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - m).abs() / m < 0.05, "{mean} vs {m}");
        assert!((mean - 1.0 / g).abs() / (1.0 / g) < 0.1);
    }

    #[test]
    fn mminf_mean_relaxation() {
        let s = BirthDeathSpec::new(QueueKind::MMInf, 4.0, 1.0, 10).unwrap();
        let reps = 4000;
        for t in [0.5, 1.0, 2.0] {
            let xs: Vec<f64> = (0..reps)
                .map(|i| bd_simulate(&s, t, 100 + i).unwrap().value_at(t) as f64)
                .collect();
            let mean = xs.iter().sum::<f64>() / reps as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
            let se = (var / reps as f64).sqrt();
            assert!((mean - s.mminf_mean(t)).abs() <= 3.0 * se, "t={t}");
        }
    }

    #[test]
    fn scaled_means_ratio_mm1() {
        // E T_K grows by mu/gamma per level, so scaled means agree across K
        let s = BirthDeathSpec::new(QueueKind::MM1, 0.5, 1.0, 0).unwrap();
        let m = |k| {
            let xs = scaled_hitting_law(&s, k, 2000, 5).unwrap();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let (a, b) = (m(8), m(9));
        assert!((b / a - 1.0).abs() < 0.1, "{a} {b}");
    }
}
