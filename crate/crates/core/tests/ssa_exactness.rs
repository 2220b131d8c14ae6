//! The jump engine against laws known in closed form.

use std::collections::HashMap;

use pairlim_core::ssa::{replicate, simulate, state_occupancy, SimConfig, StopRule, Timescale};
use pairlim_core::verify::ks_distance;
use pairlim_core::{build_finite, ModelParams, RegimeRequest, State, TransitionKind};
use proptest::prelude::*;

#[test]
fn pure_agent_death_is_binomial() {
    // pairing switched off in effect; three agents die independently at rate 1
    let p = ModelParams::new(vec![1.0], vec![1e-12], vec![1.0], 0.0, 1.0).unwrap();
    let m = build_finite(p, 5, RegimeRequest::Dynamic).unwrap();
    let init = State::new(vec![5], 3);
    let cfg = SimConfig::new(1.0, Timescale::Raw, vec![1.0], 77);
    let trajs = replicate(&m, &init, &cfg, StopRule::None, 10_000).unwrap();
    let zs: Vec<f64> = trajs.iter().map(|t| t.samples[0].state.z as f64).collect();
    let q = (-1.0f64).exp();
    let pmf = [
        (1.0 - q).powi(3),
        3.0 * q * (1.0 - q).powi(2),
        3.0 * q * q * (1.0 - q),
        q.powi(3),
    ];
    let cdf = |x: f64| {
        if x < 0.0 {
            0.0
        } else {
            pmf[..=(x.floor() as usize).min(3)].iter().sum()
        }
    };
    let ks = ks_distance(&zs, cdf).unwrap();
    // three times the 95% critical value 1.36/sqrt(n)
    assert!(ks <= 3.0 * 1.36 / 100.0, "{ks}");
}

#[test]
fn two_state_chain_spends_half_its_time_free() {
    let p = ModelParams::new(vec![1.0], vec![1.0], vec![1.0], 1.0, 1.0).unwrap();
    let m = build_finite(p, 1, RegimeRequest::Critical).unwrap();
    let init = m.fixed_state(vec![0]).unwrap();
    let occ = state_occupancy(&m, &init, 5, u64::MAX, 1e4).unwrap();
    let total: f64 = occ.values().sum();
    let free = occ
        .iter()
        .filter(|(s, _)| s.f[0] == 1)
        .map(|(_, t)| t)
        .sum::<f64>()
        / total;
    assert!((free - 0.5).abs() <= 0.02, "{free}");
}

fn check_jump_frequencies(model: &pairlim_core::FiniteModel, init: State, events: u64, seed: u64) {
    let cfg = SimConfig::new(1e12, Timescale::Raw, vec![], seed)
        .with_event_log()
        .with_max_events(events);
    let err = simulate(model, &init, &cfg, StopRule::None).unwrap_err();
    let partial = match err {
        pairlim_core::ssa::SimError::MaxEventsExceeded { partial, .. } => partial,
        e => panic!("{e}"),
    };
    let log = partial.events.expect("event log requested");
    let nt = model.num_types();
    let mut counts: HashMap<State, Vec<u64>> = HashMap::new();
    let mut holding: HashMap<State, f64> = HashMap::new();
    let mut s = init;
    let mut last = 0.0;
    for e in &log {
        counts.entry(s.clone()).or_insert_with(|| vec![0; model.num_channels()])
            [e.kind.index(nt)] += 1;
        *holding.entry(s.clone()).or_default() += e.raw_time - last;
        last = e.raw_time;
        s = model
            .enabled_transitions(&s)
            .unwrap()
            .into_iter()
            .find(|t| t.kind == e.kind)
            .expect("logged jump must be enabled")
            .apply(&s);
    }
    let mut checked = 0;
    for (state, c) in &counts {
        let visits: u64 = c.iter().sum();
        if visits < 100_000 {
            continue;
        }
        checked += 1;
        let total: f64 = (0..model.num_channels())
            .map(|k| model.rate(state, TransitionKind::from_index(k, nt)))
            .sum();
        for (k, &ck) in c.iter().enumerate() {
            let p = model.rate(state, TransitionKind::from_index(k, nt)) / total;
            let se = (p * (1.0 - p) / visits as f64).sqrt();
            let obs = ck as f64 / visits as f64;
            assert!((obs - p).abs() <= 3.0 * se.max(1e-12), "{state:?} channel {k}: {obs} vs {p}");
        }
        // mean holding time is 1/total with standard error 1/(total sqrt(visits))
        let mean = holding[state] / visits as f64;
        let se = 1.0 / (total * (visits as f64).sqrt());
        assert!((mean - 1.0 / total).abs() <= 3.0 * se, "{state:?} holding");
    }
    assert!(checked >= 3, "only {checked} states reached 1e5 visits");
}

#[test]
fn jump_frequencies_match_rates_critical() {
    let p = ModelParams::new(vec![0.5, 0.5], vec![1.0, 2.0], vec![1.0, 1.0], 1.0, 2.0).unwrap();
    let m = build_finite(p, 4, RegimeRequest::Critical).unwrap();
    let init = m.fixed_state(vec![2, 2]).unwrap();
    check_jump_frequencies(&m, init, 3_000_000, 11);
}

#[test]
fn jump_frequencies_match_rates_dynamic() {
    let p = ModelParams::new(vec![1.0], vec![1.0], vec![2.0], 2.0, 1.0).unwrap();
    let m = build_finite(p, 3, RegimeRequest::Dynamic).unwrap();
    check_jump_frequencies(&m, State::new(vec![3], 0), 3_000_000, 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fixed_regimes_conserve_agents(
        lam in 0.1f64..5.0, eta in 0.1f64..5.0, n in 4u64..60, critical in any::<bool>(), seed in 0u64..1000
    ) {
        let p = ModelParams::new(vec![0.5, 0.5], vec![lam, 1.0], vec![eta, 1.0], 1.0, 1.0).unwrap();
        let req = if critical { RegimeRequest::Critical } else { RegimeRequest::Overloaded { r: 0.5 } };
        let m = build_finite(p, n, req).unwrap();
        let half = m.capacities.iter().map(|&c| c / 2 + 1).collect::<Vec<_>>();
        let f: Vec<u64> = half.iter().zip(&m.capacities).map(|(&h, &c)| h.min(c)).collect();
        let Ok(init) = m.fixed_state(f) else { return Ok(()); };
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
        let cfg = SimConfig::new(1.0, Timescale::Raw, grid, seed);
        let tr = simulate(&m, &init, &cfg, StopRule::None).unwrap();
        let agents = m.fixed_agents().unwrap();
        for s in &tr.samples {
            prop_assert!(m.check_state(&s.state).is_ok());
            let paired = s.state.f.iter().zip(&m.capacities).map(|(f, c)| c - f).sum::<u64>();
            prop_assert_eq!(paired + s.state.z, agents);
        }
    }
}
