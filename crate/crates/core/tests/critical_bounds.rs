//! Tightness of the critical free counts on the sqrt(N) scale, started from
//! the fully paired state.

use pairlim_core::pipelines::canonical_params;
use pairlim_core::ssa::{replicate, SimConfig, StopRule, Timescale};
use pairlim_core::{build_finite, RegimeRequest};

#[test]
fn free_counts_stay_below_k1_sqrt_n() {
    let p = canonical_params();
    let n = 10_000u64;
    // lambda_min K0^2 > eta_max with K0 = sqrt(2 eta_max / lambda_min); K1 = 2 K0
    let k1 = 2.0 * (2.0 * p.max_eta() / p.min_lambda()).sqrt();
    let m = build_finite(p, n, RegimeRequest::Critical).unwrap();
    let init = m.fixed_state(vec![0, 0]).unwrap();
    let cfg = SimConfig::new(1.0, Timescale::Raw, vec![1.0], 404);
    let trajs = replicate(&m, &init, &cfg, StopRule::None, 1000).unwrap();
    // in this regime z = ||f||, so max_z bounds every coordinate along the path
    let inside = trajs
        .iter()
        .filter(|t| t.max_z as f64 / (n as f64).sqrt() <= k1)
        .count();
    assert!(inside >= 990, "{inside}");
}
