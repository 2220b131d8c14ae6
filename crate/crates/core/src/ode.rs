//! Dormand–Prince 5(4) with step-size control, landing exactly on the
//! requested output times.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h})")]
    Stall { t: f64, h: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("step budget of {steps} exhausted at t = {t}")]
    TooManySteps { t: f64, steps: u64 },
    #[error("output times must be increasing and start at or after t0")]
    BadGrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: u64,
    /// Upper bound on the step; infinite by default.
    pub h_max: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            atol: 1e-10,
            rtol: 1e-8,
            max_steps: 50_000_000,
            h_max: f64::INFINITY,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth minus fourth order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `y' = rhs(t, y)` from `(t0, y0)` and returns the state at each
/// of `outputs` (which must be increasing and `>= t0`).
pub fn integrate<F>(
    mut rhs: F,
    t0: f64,
    y0: &[f64],
    outputs: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<Vec<f64>>, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if outputs.windows(2).any(|w| w[1] < w[0]) || outputs.first().is_some_and(|&a| a < t0) {
        return Err(OdeError::BadGrid);
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut out = Vec::with_capacity(outputs.len());
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];

    rhs(t, &y, &mut k1);
    let mut h = initial_step(&y, &k1, opts);
    let mut steps = 0u64;

    for &target in outputs {
        while t < target {
            if steps >= opts.max_steps {
                return Err(OdeError::TooManySteps { t, steps });
            }
            let remaining = target - t;
            let mut last = false;
            let mut hs = h.min(opts.h_max);
            if hs >= remaining {
                hs = remaining;
                last = true;
            }
            if hs <= 1e-14 * t.abs().max(1.0) && !last {
                return Err(OdeError::Stall { t, h: hs });
            }

            for i in 0..n {
                tmp[i] = y[i] + hs * A21 * k1[i];
            }
            rhs(t + C2 * hs, &tmp, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
            }
            rhs(t + C3 * hs, &tmp, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            rhs(t + C4 * hs, &tmp, &mut k4);
            for i in 0..n {
                tmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            rhs(t + C5 * hs, &tmp, &mut k5);
            for i in 0..n {
                tmp[i] = y[i]
                    + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            let t_new = if last { target } else { t + hs };
            rhs(t_new, &tmp, &mut k6);
            for i in 0..n {
                y_new[i] = y[i]
                    + hs * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            rhs(t_new, &y_new, &mut k7);
            steps += 1;

            let mut err = 0.0;
            for i in 0..n {
                let e = hs
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
                let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
                err += (e / sc) * (e / sc);
            }
            let err = (err / n.max(1) as f64).sqrt();
            if !err.is_finite() {
                // typically the drift left its domain mid-step; retry smaller
                h = hs * 0.1;
                if h <= 1e-14 * t.abs().max(1.0) {
                    return Err(OdeError::NonFinite { t });
                }
                continue;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if err <= 1.0 {
                t = t_new;
                std::mem::swap(&mut y, &mut y_new);
                std::mem::swap(&mut k1, &mut k7);
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(OdeError::NonFinite { t });
                }
                // a step truncated to hit the grid says nothing about the next one
                if !last || factor < 1.0 {
                    h = hs * factor;
                }
            } else {
                h = hs * factor.min(1.0);
                if h <= 1e-14 * t.abs().max(1.0) {
                    return Err(OdeError::Stall { t, h });
                }
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn initial_step(y: &[f64], dy: &[f64], opts: &OdeOptions) -> f64 {
    let n = y.len().max(1) as f64;
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (a, b) in y.iter().zip(dy) {
        let sc = opts.atol + opts.rtol * a.abs();
        d0 += (a / sc) * (a / sc);
        d1 += (b / sc) * (b / sc);
    }
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h.clamp(1e-8, 0.1).min(opts.h_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let grid = [0.0, 0.5, 1.0, 2.0, 10.0];
        let ys = integrate(
            |_, y, dy| dy[0] = -y[0],
            0.0,
            &[1.0],
            &grid,
            &OdeOptions::default(),
        )
        .unwrap();
        for (t, y) in grid.iter().zip(&ys) {
            assert!((y[0] - (-t).exp()).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn harmonic_oscillator_conserves_energy() {
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.3).collect();
        let ys = integrate(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            &[1.0, 0.0],
            &grid,
            &OdeOptions::default(),
        )
        .unwrap();
        for (t, y) in grid.iter().zip(&ys) {
            assert!((y[0] - t.cos()).abs() < 1e-7);
            assert!((y[1] + t.sin()).abs() < 1e-7);
        }
    }

    #[test]
    fn logistic_against_closed_form() {
        let grid = [0.0, 1.0, 3.0, 7.0];
        let ys = integrate(
            |_, y, dy| dy[0] = y[0] * (1.0 - y[0]),
            0.0,
            &[0.1],
            &grid,
            &OdeOptions::default(),
        )
        .unwrap();
        for (t, y) in grid.iter().zip(&ys) {
            let exact = 1.0 / (1.0 + 9.0 * (-t).exp());
            assert!((y[0] - exact).abs() < 1e-7);
        }
    }

    #[test]
    fn bad_grid() {
        assert_eq!(
            integrate(|_, _, d| d[0] = 0.0, 1.0, &[0.0], &[0.5], &OdeOptions::default()),
            Err(OdeError::BadGrid)
        );
    }

    #[test]
    fn blow_up_is_reported() {
        // y' = y^2 from 1 explodes at t = 1
        let r = integrate(
            |_, y, dy| dy[0] = y[0] * y[0],
            0.0,
            &[1.0],
            &[2.0],
            &OdeOptions::default(),
        );
        assert!(r.is_err());
    }
}
