//! Pathwise comparisons of the pairing process with simpler chains.
//!
//! Each coupled pair is driven by one Poisson clock whose rate is, channel by
//! channel, the larger of the two processes' rates. A single uniform then
//! decides which of the two processes move, so each marginal has its own law
//! and the ordering is preserved whenever the rate comparisons hold on the
//! diagonal.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FiniteModel, Regime, State, TransitionKind};
use crate::rng::{exponential, pick, stream_rng, SimRng};

pub const COUPLING_MAX_EVENTS: u64 = 1_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("coupling needs the {expected} regime")]
    WrongRegime { expected: &'static str },
    #[error("invalid initial state: {0}")]
    InvalidInit(String),
    #[error("comparison queue does not dominate: {0}")]
    NotDominating(String),
    #[error("event cap reached")]
    MaxEventsExceeded,
}

/// An M/M/∞ queue in raw time: arrivals at `arrival`, each customer leaves at
/// rate `service`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominatingQueue {
    pub arrival: f64,
    pub service: f64,
}

/// The queue bounding the free agents of the overloaded regime: input
/// `eta_max N`, per-customer service `lambda_min (r/2) N` with `r = C_Z / N`.
pub fn lemcl1_queue(model: &FiniteModel) -> Result<DominatingQueue, CouplingError> {
    let Regime::FixedOverloaded { agents } = model.regime else {
        return Err(CouplingError::WrongRegime {
            expected: "overloaded",
        });
    };
    let n = model.n as f64;
    let r = agents as f64 / n;
    Ok(DominatingQueue {
        arrival: model.params.max_eta() * n,
        service: model.params.min_lambda() * 0.5 * r * n,
    })
}

/// The queue bounding the free agents of the dynamic regime before the free
/// mass falls to `a N`: input `2 eta_max N`, per-customer service
/// `delta + a lambda_min N`.
pub fn lem1op_queue(model: &FiniteModel, a: f64) -> Result<DominatingQueue, CouplingError> {
    if model.regime != Regime::Dynamic {
        return Err(CouplingError::WrongRegime { expected: "dynamic" });
    }
    let n = model.n as f64;
    let p = &model.params;
    if p.beta > p.max_eta() * n {
        return Err(CouplingError::NotDominating(format!(
            "beta = {} exceeds eta_max N = {}",
            p.beta,
            p.max_eta() * n
        )));
    }
    Ok(DominatingQueue {
        arrival: 2.0 * p.max_eta() * n,
        service: p.delta + a * p.min_lambda() * n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingOutcome {
    /// The ordering failed at some event.
    pub violated: bool,
    pub events: u64,
    /// Raw time at which the path ended (horizon or stopping time).
    pub end_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub paths: usize,
    pub violations: usize,
    pub total_events: u64,
}

fn apply(s: &mut State, kind: TransitionKind) {
    match kind {
        TransitionKind::Pair(j) => {
            s.f[j] -= 1;
            s.z -= 1;
        }
        TransitionKind::Split(j) => {
            s.f[j] += 1;
            s.z += 1;
        }
        TransitionKind::AgentBirth => s.z += 1,
        TransitionKind::AgentDeath => s.z -= 1,
    }
}

/// Couples the free-agent count with `queue` started at `z(0)` and checks
/// `z(t) <= L(t)` after every event up to raw time `horizon`. With
/// `stop_below = Some(a)` the run ends once the free mass is at most `a N`.
pub fn couple_with_queue<R: Rng + ?Sized>(
    model: &FiniteModel,
    init: &State,
    queue: DominatingQueue,
    stop_below: Option<f64>,
    horizon: f64,
    rng: &mut R,
) -> Result<CouplingOutcome, CouplingError> {
    model
        .check_state(init)
        .map_err(|e| CouplingError::InvalidInit(e.to_string()))?;
    let nt = model.num_types();
    let nc = model.num_channels();
    let level = stop_below.map(|a| a * model.n as f64);
    let mut s = init.clone();
    let mut l = s.z;
    let mut free: u64 = s.f.iter().sum();
    let mut t = 0.0;
    let mut rates = vec![0.0; nc];
    let mut up = vec![0.0; nc];
    let mut down = vec![0.0; nc];
    let mut events = 0u64;
    let mut violated = false;
    if level.is_some_and(|lv| free as f64 <= lv) {
        return Ok(CouplingOutcome {
            violated,
            events,
            end_time: 0.0,
        });
    }
    loop {
        model.rates_into(&s.f, s.z, &mut rates);
        // split the channels by the direction they move z
        for c in 0..nc {
            let k = TransitionKind::from_index(c, nt);
            let (u, d) = if k.delta_z() > 0 { (rates[c], 0.0) } else { (0.0, rates[c]) };
            up[c] = u;
            down[c] = d;
        }
        let up_z: f64 = up.iter().sum();
        let down_z: f64 = down.iter().sum();
        let up_l = queue.arrival;
        let down_l = queue.service * l as f64;
        let u_max = up_z.max(up_l);
        let d_max = down_z.max(down_l);
        let total = u_max + d_max;
        if total <= 0.0 {
            break;
        }
        t += exponential(rng, total);
        if t > horizon {
            break;
        }
        let u = rng.random::<f64>() * total;
        if u < u_max {
            if u < up_z {
                apply(&mut s, TransitionKind::from_index(pick(&up, u), nt));
            }
            if u < up_l {
                l += 1;
            }
        } else {
            let v = u - u_max;
            if v < down_z {
                apply(&mut s, TransitionKind::from_index(pick(&down, v), nt));
            }
            if v < down_l {
                l -= 1;
            }
        }
        events += 1;
        if s.z > l {
            violated = true;
        }
        free = s.f.iter().sum();
        if level.is_some_and(|lv| free as f64 <= lv) {
            break;
        }
        if events >= COUPLING_MAX_EVENTS {
            return Err(CouplingError::MaxEventsExceeded);
        }
    }
    Ok(CouplingOutcome {
        violated,
        events,
        end_time: t.min(horizon),
    })
}

/// Rates of the coordinate bounds `X_j` in the critical regime: up at `up`,
/// down at `down_coef * X_j^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateBound {
    pub up: f64,
    pub down_coef: f64,
}

pub fn propcoup_bound(model: &FiniteModel) -> CoordinateBound {
    CoordinateBound {
        up: model.params.max_eta() * model.n as f64,
        down_coef: model.params.min_lambda(),
    }
}

/// Couples the critical chain with independent bounds `X_j(0) = 0` and checks
/// `f_j(t) <= f_j(0) + X_j(t)` for every `j` after every event.
pub fn couple_coordinates<R: Rng + ?Sized>(
    model: &FiniteModel,
    init: &State,
    bound: CoordinateBound,
    horizon: f64,
    rng: &mut R,
) -> Result<CouplingOutcome, CouplingError> {
    if model.regime != Regime::FixedCritical {
        return Err(CouplingError::WrongRegime {
            expected: "critical",
        });
    }
    model
        .check_state(init)
        .map_err(|e| CouplingError::InvalidInit(e.to_string()))?;
    let nt = model.num_types();
    let mut s = init.clone();
    let mut x = vec![0u64; nt];
    // per type: [combined up, combined down]
    let mut lanes = vec![0.0; 2 * nt];
    let mut f_rates = vec![0.0; model.num_channels()];
    let mut t = 0.0;
    let mut events = 0u64;
    let mut violated = false;
    loop {
        model.rates_into(&s.f, s.z, &mut f_rates);
        for j in 0..nt {
            let xj = x[j] as f64;
            lanes[2 * j] = f_rates[nt + j].max(bound.up);
            lanes[2 * j + 1] = f_rates[j].max(bound.down_coef * xj * xj);
        }
        let total: f64 = lanes.iter().sum();
        if total <= 0.0 {
            break;
        }
        t += exponential(rng, total);
        if t > horizon {
            break;
        }
        let target = rng.random::<f64>() * total;
        let lane = pick(&lanes, target);
        let offset: f64 = target - lanes[..lane].iter().sum::<f64>();
        let j = lane / 2;
        if lane % 2 == 0 {
            if offset < f_rates[nt + j] {
                apply(&mut s, TransitionKind::Split(j));
            }
            if offset < bound.up {
                x[j] += 1;
            }
        } else {
            if offset < f_rates[j] {
                apply(&mut s, TransitionKind::Pair(j));
            }
            let xj = x[j] as f64;
            if offset < bound.down_coef * xj * xj {
                x[j] -= 1;
            }
        }
        events += 1;
        if (0..nt).any(|k| s.f[k] > init.f[k] + x[k]) {
            violated = true;
        }
        if events >= COUPLING_MAX_EVENTS {
            return Err(CouplingError::MaxEventsExceeded);
        }
    }
    Ok(CouplingOutcome {
        violated,
        events,
        end_time: t.min(horizon),
    })
}

/// Runs `paths` independent coupled paths; path `i` uses stream `(seed, i)`.
pub fn coupling_experiment<F>(
    paths: usize,
    seed: u64,
    run: F,
) -> Result<CouplingReport, CouplingError>
where
    F: Fn(&mut SimRng) -> Result<CouplingOutcome, CouplingError> + Sync,
{
    let outcomes: Vec<CouplingOutcome> = (0..paths)
        .into_par_iter()
        .map(|i| run(&mut stream_rng(seed, i as u64)))
        .collect::<Result<_, _>>()?;
    Ok(CouplingReport {
        paths,
        violations: outcomes.iter().filter(|o| o.violated).count(),
        total_events: outcomes.iter().map(|o| o.events).sum(),
    })
}

/// `sup_{t <= horizon} X(t) / sqrt(N)` for the chain with up rate `eta N` and
/// down rate `lambda X^2`, `X(0) = 0`, in raw time.
pub fn quadratic_death_sup<R: Rng + ?Sized>(
    n: u64,
    eta: f64,
    lambda: f64,
    horizon: f64,
    rng: &mut R,
) -> f64 {
    let up = eta * n as f64;
    let mut x = 0u64;
    let mut sup = 0u64;
    let mut t = 0.0;
    loop {
        let down = lambda * (x * x) as f64;
        let total = up + down;
        t += exponential(rng, total);
        if t > horizon {
            break;
        }
        if rng.random::<f64>() * total < up {
            x += 1;
            sup = sup.max(x);
        } else {
            x -= 1;
        }
    }
    sup as f64 / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_finite, ModelParams, RegimeRequest};

    fn canonical() -> ModelParams {
        ModelParams::new(vec![0.5, 0.5], vec![1.0, 2.0], vec![1.0, 1.0], 1.0, 2.0).unwrap()
    }

    #[test]
    fn queue_rates() {
        let m = build_finite(canonical(), 100, RegimeRequest::Overloaded { r: 0.4 }).unwrap();
        let q = lemcl1_queue(&m).unwrap();
        assert_eq!(q.arrival, 100.0);
        assert!((q.service - 20.0).abs() < 1e-12);
        let d = build_finite(canonical(), 100, RegimeRequest::Dynamic).unwrap();
        let q = lem1op_queue(&d, 0.5).unwrap();
        assert_eq!(q.arrival, 200.0);
        assert_eq!(q.service, 2.0 + 50.0);
        assert!(lemcl1_queue(&d).is_err());
        assert!(lem1op_queue(&m, 0.5).is_err());
    }

    #[test]
    fn overloaded_domination_holds() {
        let m = build_finite(canonical(), 200, RegimeRequest::Overloaded { r: 0.4 }).unwrap();
        let init = m.fixed_state(vec![90, 30]).unwrap();
        let q = lemcl1_queue(&m).unwrap();
        let rep = coupling_experiment(50, 1, |rng| {
            couple_with_queue(&m, &init, q, None, 1.0, rng)
        })
        .unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.total_events > 1000);
    }

    #[test]
    fn too_fast_queue_is_caught() {
        // a queue serving far faster than the agents pair cannot dominate
        let m = build_finite(canonical(), 200, RegimeRequest::Overloaded { r: 0.4 }).unwrap();
        let init = m.fixed_state(vec![90, 30]).unwrap();
        let q = DominatingQueue {
            arrival: 1.0,
            service: 1e3,
        };
        let rep = coupling_experiment(20, 1, |rng| {
            couple_with_queue(&m, &init, q, None, 1.0, rng)
        })
        .unwrap();
        assert!(rep.violations > 0);
    }

    #[test]
    fn dynamic_domination_holds_until_tau() {
        let m = build_finite(canonical(), 60, RegimeRequest::Dynamic).unwrap();
        let init = m.state_from_fractions(&[0.45, 0.45], 0).unwrap();
        let q = lem1op_queue(&m, 0.5).unwrap();
        let rep = coupling_experiment(50, 2, |rng| {
            couple_with_queue(&m, &init, q, Some(0.5), 60.0, rng)
        })
        .unwrap();
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn coordinate_bounds_hold_and_can_fail() {
        let m = build_finite(canonical(), 400, RegimeRequest::Critical).unwrap();
        let init = m.fixed_state(vec![200, 10]).unwrap();
        let b = propcoup_bound(&m);
        let rep = coupling_experiment(50, 3, |rng| couple_coordinates(&m, &init, b, 0.5, rng))
            .unwrap();
        assert_eq!(rep.violations, 0);
        let weak = CoordinateBound {
            up: 0.1,
            down_coef: 50.0,
        };
        let rep = coupling_experiment(20, 3, |rng| couple_coordinates(&m, &init, weak, 0.5, rng))
            .unwrap();
        assert!(rep.violations > 0);
    }

    #[test]
    fn quadratic_death_stays_near_sqrt_n() {
        let mut rng = stream_rng(4, 0);
        let s = quadratic_death_sup(10_000, 1.0, 1.0, 0.5, &mut rng);
        // stationary level sqrt(eta N / lambda) = 100, fluctuations of order N^{1/4}
        assert!(s > 0.8 && s < 1.5, "{s}");
    }
}
