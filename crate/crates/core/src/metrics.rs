//! Evaluation of closed-loop runs: deviation norms, errors against a
//! baseline run, traffic performance indices, decay fits and timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::Controller;
use crate::error::{Error, Result};
use crate::fd::Equilibrium;
use crate::sim::{ScenarioResult, TrafficState};
use crate::units::{ms_to_kmh, per_m_to_per_km};

/// Nondimensional L2 deviation `sqrt(Σ [(ρ−ρ⋆)²/ρ⋆² + (v−v⋆)²/v⋆²] dx)`.
pub fn l2_deviation(rho: &[f64], v: &[f64], eq: &Equilibrium, dx: f64) -> f64 {
    let s: f64 = rho
        .iter()
        .zip(v)
        .map(|(&r, &s)| {
            let a = (r - eq.rho_star) / eq.rho_star;
            let b = (s - eq.v_star) / eq.v_star;
            a * a + b * b
        })
        .sum();
    (s * dx).sqrt()
}

fn same_grid(a: &ScenarioResult, b: &ScenarioResult) -> Result<()> {
    let close = |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-9 * p.abs().max(1.0));
    if !close(&a.t, &b.t) || !close(&a.x, &b.x) {
        return Err(Error::GridMismatch(format!(
            "output grids differ: {}×{} vs {}×{}",
            a.nt(),
            a.nx(),
            b.nt(),
            b.nx()
        )));
    }
    Ok(())
}

/// `(MSE_ρ, MSE_v)`: mean of squared differences normalised by the
/// baseline's equilibrium, over every output sample.
pub fn mse_vs_baseline(result: &ScenarioResult, baseline: &ScenarioResult) -> Result<(f64, f64)> {
    same_grid(result, baseline)?;
    let n = result.rho.len() as f64;
    let (rs, vs) = (baseline.eq.rho_star, baseline.eq.v_star);
    let mr = result.rho.iter().zip(&baseline.rho).map(|(a, b)| ((a - b) / rs).powi(2)).sum::<f64>() / n;
    let mv = result.v.iter().zip(&baseline.v).map(|(a, b)| ((a - b) / vs).powi(2)).sum::<f64>() / n;
    Ok((mr, mv))
}

/// Absolute state errors against a baseline, in veh/km and km/h, plus the
/// same figures as percentages of `ρ⋆` and `v⋆`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StateErrors {
    pub max_rho: f64,
    pub mean_rho: f64,
    pub max_v: f64,
    pub mean_v: f64,
    pub max_rho_pct: f64,
    pub mean_rho_pct: f64,
    pub max_v_pct: f64,
    pub mean_v_pct: f64,
}

pub fn state_errors(result: &ScenarioResult, baseline: &ScenarioResult) -> Result<StateErrors> {
    same_grid(result, baseline)?;
    let n = result.rho.len() as f64;
    let stats = |a: &[f64], b: &[f64]| {
        let mut max = 0.0f64;
        let mut sum = 0.0;
        for (x, y) in a.iter().zip(b) {
            let e = (x - y).abs();
            max = max.max(e);
            sum += e;
        }
        (max, sum / n)
    };
    let (mr, ar) = stats(&result.rho, &baseline.rho);
    let (mv, av) = stats(&result.v, &baseline.v);
    let (rs, vs) = (baseline.eq.rho_star, baseline.eq.v_star);
    Ok(StateErrors {
        max_rho: per_m_to_per_km(mr),
        mean_rho: per_m_to_per_km(ar),
        max_v: ms_to_kmh(mv),
        mean_v: ms_to_kmh(av),
        max_rho_pct: 100.0 * mr / rs,
        mean_rho_pct: 100.0 * ar / rs,
        max_v_pct: 100.0 * mv / vs,
        mean_v_pct: 100.0 * av / vs,
    })
}

pub const FUEL_B0: f64 = 2.5e-3;
pub const FUEL_B1: f64 = 2.45e-7;
pub const FUEL_B2: f64 = 1.25e-8;
pub const FUEL_B3: f64 = 9.5e-5;

/// Fuel, discomfort and total travel time (SI units throughout).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerformanceIndices {
    pub fuel: f64,
    pub comfort: f64,
    pub ttt: f64,
}

impl PerformanceIndices {
    /// Percent change of each index relative to `base`.
    pub fn relative_to(&self, base: &PerformanceIndices) -> PerformanceIndices {
        let pct = |a: f64, b: f64| 100.0 * (a - b) / b;
        PerformanceIndices { fuel: pct(self.fuel, base.fuel), comfort: pct(self.comfort, base.comfort), ttt: pct(self.ttt, base.ttt) }
    }
}

/// Time derivative on a sampled series: one-sided at the ends, central
/// inside.
fn diff_t(f: &[f64], nt: usize, nx: usize, dt: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for k in 0..nt {
        for j in 0..nx {
            let at = |kk: usize| f[kk * nx + j];
            out[k * nx + j] = if k == 0 {
                (at(1) - at(0)) / dt[0]
            } else if k == nt - 1 {
                (at(nt - 1) - at(nt - 2)) / dt[nt - 2]
            } else {
                (at(k + 1) - at(k - 1)) / (dt[k - 1] + dt[k])
            };
        }
    }
    out
}

fn trapezoid_2d(f: &[f64], t: &[f64], x: &[f64]) -> f64 {
    let (nt, nx) = (t.len(), x.len());
    let row = |k: usize| -> f64 { (0..nx - 1).map(|j| 0.5 * (f[k * nx + j] + f[k * nx + j + 1]) * (x[j + 1] - x[j])).sum() };
    (0..nt - 1).map(|k| 0.5 * (row(k) + row(k + 1)) * (t[k + 1] - t[k])).sum()
}

/// Local acceleration `a = v_t + v v_x`: central in `x` (one-sided at the
/// ends), forward in `t` at the start, backward at the end.
pub fn acceleration(result: &ScenarioResult) -> Result<Vec<f64>> {
    let (nt, nx) = (result.nt(), result.nx());
    if nt < 3 || nx < 3 {
        return Err(Error::invalid(format!("need at least 3 samples in t and x for accelerations, got {nt}×{nx}")));
    }
    let dt: Vec<f64> = result.t.windows(2).map(|w| w[1] - w[0]).collect();
    let vt = diff_t(&result.v, nt, nx, &dt);
    let x = &result.x;
    let mut a = vec![0.0; nt * nx];
    for k in 0..nt {
        let v = result.v_row(k);
        for j in 0..nx {
            let vx = if j == 0 {
                (v[1] - v[0]) / (x[1] - x[0])
            } else if j == nx - 1 {
                (v[nx - 1] - v[nx - 2]) / (x[nx - 1] - x[nx - 2])
            } else {
                (v[j + 1] - v[j - 1]) / (x[j + 1] - x[j - 1])
            };
            a[k * nx + j] = vt[k * nx + j] + v[j] * vx;
        }
    }
    Ok(a)
}

pub fn performance_indices(result: &ScenarioResult) -> Result<PerformanceIndices> {
    let a = acceleration(result)?;
    let (nt, nx) = (result.nt(), result.nx());
    let dt: Vec<f64> = result.t.windows(2).map(|w| w[1] - w[0]).collect();
    let at = diff_t(&a, nt, nx, &dt);
    let n = nt * nx;
    let mut fuel = vec![0.0; n];
    let mut comfort = vec![0.0; n];
    for i in 0..n {
        let (v, acc, rho) = (result.v[i], a[i], result.rho[i]);
        fuel[i] = (FUEL_B0 + FUEL_B1 * v + FUEL_B2 * v * acc + FUEL_B3 * acc * acc).max(0.0) * rho;
        comfort[i] = (acc * acc + at[i] * at[i]) * rho;
    }
    Ok(PerformanceIndices {
        fuel: trapezoid_2d(&fuel, &result.t, &result.x),
        comfort: trapezoid_2d(&comfort, &result.t, &result.x),
        ttt: trapezoid_2d(&result.rho, &result.t, &result.x),
    })
}

/// Log-linear fit of a deviation norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Slope of `ln ‖·‖` [1/s]; negative when decaying.
    pub slope: f64,
    /// `−slope`: positive when decaying.
    pub rate: f64,
    pub r_squared: f64,
    /// Level the norm settles at when it stops decaying (practical
    /// stability); the fit stops above it.
    pub floor: Option<f64>,
    /// Time span actually fitted.
    pub window: (f64, f64),
}

fn linfit(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let sxx: f64 = t.iter().map(|a| (a - mt) * (a - mt)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Fits `ln norm` against `t` on `[t0, t1]`. Samples from the first zero
/// on are dropped; if the tail no longer decays, the fit is cut where the norm
/// reaches twice the tail level and that level is reported as the floor.
pub fn decay_fit(t: &[f64], norm: &[f64], t0: f64, t1: f64) -> Result<DecayFit> {
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (&ti, &n) in t.iter().zip(norm) {
        if ti < t0 || ti > t1 {
            continue;
        }
        if n <= 0.0 || !n.is_finite() {
            break;
        }
        ts.push(ti);
        ys.push(n.ln());
    }
    if ts.len() < 3 {
        return Err(Error::invalid(format!("decay fit needs >= 3 positive samples in [{t0}, {t1}]")));
    }
    let (slope, r2) = linfit(&ts, &ys);
    let tail = (ts.len() / 5).max(3);
    let k0 = ts.len() - tail;
    let (tail_slope, _) = linfit(&ts[k0..], &ys[k0..]);
    let mut tail_vals: Vec<f64> = ys[k0..].iter().map(|y| y.exp()).collect();
    tail_vals.sort_by(f64::total_cmp);
    let level = tail_vals[tail_vals.len() / 2];
    let first = ys[0].exp();
    // a tail that has stopped decaying, whether flat or drifting upward
    let flat = slope < 0.0 && tail_slope > -0.1 * slope.abs() && level > 1e-6 * first;
    if flat {
        let cut = ys.iter().position(|y| y.exp() <= 2.0 * level).unwrap_or(ys.len());
        if cut >= 3 {
            let (s2, r22) = linfit(&ts[..cut], &ys[..cut]);
            return Ok(DecayFit { slope: s2, rate: -s2, r_squared: r22, floor: Some(level), window: (ts[0], ts[cut - 1]) });
        }
        return Ok(DecayFit { slope, rate: -slope, r_squared: r2, floor: Some(level), window: (ts[0], *ts.last().unwrap()) });
    }
    Ok(DecayFit { slope, rate: -slope, r_squared: r2, floor: None, window: (ts[0], *ts.last().unwrap()) })
}

/// Wall-clock cost of one controller evaluation [s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Median over blocks of the per-block mean.
    pub per_eval: f64,
    /// One-off setup (e.g. a kernel solve) spread over a run's
    /// evaluations, added to `per_eval`.
    pub amortized: f64,
}

/// Median-of-means timing of `controller.compute` on a fixed state after a
/// short warm-up. `setup` seconds are amortised over `evals_per_run`.
pub fn timing_bench(
    controller: &mut dyn Controller,
    state: &TrafficState,
    eq: &Equilibrium,
    repetitions: usize,
    setup: f64,
    evals_per_run: usize,
) -> Timing {
    let reps = repetitions.max(5);
    let blocks = 5;
    let per_block = reps.div_ceil(blocks);
    let mut sink = 0.0;
    for k in 0..per_block.min(50) {
        sink += controller.compute(k as f64 * 1e-3, state, eq);
    }
    let mut means = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let start = Instant::now();
        for k in 0..per_block {
            sink += controller.compute((b * per_block + k) as f64 * 1e-3, state, eq);
        }
        means.push(start.elapsed().as_secs_f64() / per_block as f64);
    }
    std::hint::black_box(sink);
    controller.reset();
    means.sort_by(f64::total_cmp);
    let per_eval = means[blocks / 2];
    Timing { per_eval, amortized: per_eval + setup / evals_per_run.max(1) as f64 }
}

/// Everything reported for one controller against the baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub controller: String,
    pub mse_rho: f64,
    pub mse_v: f64,
    pub errors: StateErrors,
    pub indices: PerformanceIndices,
    /// Percent change of the indices against the baseline.
    pub indices_change: PerformanceIndices,
    pub decay: Option<DecayFit>,
    pub timing: Option<Timing>,
}

impl EvaluationReport {
    pub fn evaluate(result: &ScenarioResult, baseline: &ScenarioResult, fit_window: (f64, f64), timing: Option<Timing>) -> Result<Self> {
        let (mse_rho, mse_v) = mse_vs_baseline(result, baseline)?;
        let indices = performance_indices(result)?;
        let base = performance_indices(baseline)?;
        Ok(Self {
            controller: result.controller.clone(),
            mse_rho,
            mse_v,
            errors: state_errors(result, baseline)?,
            indices,
            indices_change: indices.relative_to(&base),
            decay: decay_fit(&result.t, &result.l2, fit_window.0, fit_window.1).ok(),
            timing,
        })
    }

    pub fn csv_header() -> &'static str {
        "controller,mse_rho,mse_v,max_rho_err_vehkm,mean_rho_err_vehkm,max_v_err_kmh,mean_v_err_kmh,\
max_rho_err_pct,mean_rho_err_pct,max_v_err_pct,mean_v_err_pct,j_fuel,j_comfort,j_ttt,\
j_fuel_change_pct,j_comfort_change_pct,j_ttt_change_pct,decay_rate,decay_r2,decay_floor,\
time_per_eval_s,time_per_eval_amortized_s"
    }

    pub fn csv_row(&self) -> String {
        let e = &self.errors;
        let (rate, r2, floor) = match &self.decay {
            Some(d) => (d.rate.to_string(), d.r_squared.to_string(), d.floor.map_or(String::new(), |f| f.to_string())),
            None => (String::new(), String::new(), String::new()),
        };
        let (te, ta) = match &self.timing {
            Some(t) => (t.per_eval.to_string(), t.amortized.to_string()),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{rate},{r2},{floor},{te},{ta}",
            self.controller,
            self.mse_rho,
            self.mse_v,
            e.max_rho,
            e.mean_rho,
            e.max_v,
            e.mean_v,
            e.max_rho_pct,
            e.mean_rho_pct,
            e.max_v_pct,
            e.mean_v_pct,
            self.indices.fuel,
            self.indices.comfort,
            self.indices.ttt,
            self.indices_change.fuel,
            self.indices_change.comfort,
            self.indices_change.ttt,
        )
    }

    /// Human-readable comparison tables: state errors, performance
    /// indices, then MSE and timing.
    pub fn table(reports: &[EvaluationReport]) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "Closed-loop errors against the baseline (percent of equilibrium)");
        let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>12} {:>12}", "method", "rho max", "rho mean", "v max", "v mean");
        for r in reports {
            let e = &r.errors;
            let _ = writeln!(
                s,
                "{:<16} {:>11.2}% {:>11.2}% {:>11.2}% {:>11.2}%",
                r.controller, e.max_rho_pct, e.mean_rho_pct, e.max_v_pct, e.mean_v_pct
            );
        }
        let _ = writeln!(s, "\nPerformance indices, change against the baseline");
        let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>12}", "method", "fuel", "discomfort", "travel time");
        for r in reports {
            let c = &r.indices_change;
            let _ = writeln!(s, "{:<16} {:>+11.2}% {:>+11.2}% {:>+11.2}%", r.controller, c.fuel, c.comfort, c.ttt);
        }
        let _ = writeln!(s, "\nMSE and evaluation cost");
        let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>14} {:>14}", "method", "MSE rho", "MSE v", "s/eval", "s/eval amort.");
        for r in reports {
            let (a, b) = r.timing.map_or((f64::NAN, f64::NAN), |t| (t.per_eval, t.amortized));
            let _ = writeln!(s, "{:<16} {:>12.3e} {:>12.3e} {:>14.3e} {:>14.3e}", r.controller, r.mse_rho, r.mse_v, a, b);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{FundamentalDiagram, GreenshieldsFD};
    use crate::units::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eq() -> Equilibrium {
        let fd: FundamentalDiagram = GreenshieldsFD::new(kmh_to_ms(144.0), per_km_to_per_m(160.0), 1.0).unwrap().into();
        fd.equilibrium(per_km_to_per_m(120.0)).unwrap()
    }

    fn constant_result(nt: usize, nx: usize, horizon: f64, rho: f64, v: f64) -> ScenarioResult {
        let e = eq();
        ScenarioResult {
            controller: "c".into(),
            eq: e,
            length: 500.0,
            t: (0..nt).map(|k| horizon * k as f64 / (nt - 1) as f64).collect(),
            x: (0..nx).map(|j| 500.0 * j as f64 / (nx - 1) as f64).collect(),
            rho: vec![rho; nt * nx],
            v: vec![v; nt * nx],
            u: vec![0.0; nt],
            l2: vec![0.0; nt],
            warnings: vec![],
            steps: 0,
        }
    }

    #[test]
    fn l2_of_the_sinusoid_matches_the_closed_form() {
        let e = eq();
        let n = 2000;
        let dx = 500.0 / n as f64;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * dx).collect();
        let s = |x: f64| (3.0 * std::f64::consts::PI * x / 500.0).sin();
        let rho: Vec<f64> = xs.iter().map(|&x| e.rho_star * (1.0 + 0.1 * s(x))).collect();
        let v: Vec<f64> = xs.iter().map(|&x| e.v_star * (1.0 - 0.1 * s(x))).collect();
        let expected = 0.1 * (500.0f64 / 2.0).sqrt() * 2.0f64.sqrt();
        assert!((l2_deviation(&rho, &v, &e, dx) - expected).abs() < 1e-9 * expected);
        let rho2: Vec<f64> = rho.iter().map(|r| e.rho_star + 2.0 * (r - e.rho_star)).collect();
        let v2: Vec<f64> = v.iter().map(|r| e.v_star + 2.0 * (r - e.v_star)).collect();
        assert!((l2_deviation(&rho2, &v2, &e, dx) - 2.0 * expected).abs() < 1e-9 * expected);
        assert_eq!(l2_deviation(&[e.rho_star; 4], &[e.v_star; 4], &e, 1.0), 0.0);
    }

    #[test]
    fn mse_matches_a_brute_force_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = eq();
        let mut a = constant_result(7, 5, 10.0, e.rho_star, e.v_star);
        let mut b = a.clone();
        for i in 0..35 {
            a.rho[i] = e.rho_star * rng.random_range(0.9..1.1);
            b.rho[i] = e.rho_star * rng.random_range(0.9..1.1);
            a.v[i] = e.v_star * rng.random_range(0.9..1.1);
            b.v[i] = e.v_star * rng.random_range(0.9..1.1);
        }
        let (mr, mv) = mse_vs_baseline(&a, &b).unwrap();
        let mut sr = 0.0;
        let mut sv = 0.0;
        for k in 0..7 {
            for j in 0..5 {
                let i = k * 5 + j;
                sr += ((a.rho[i] - b.rho[i]) / e.rho_star).powi(2);
                sv += ((a.v[i] - b.v[i]) / e.v_star).powi(2);
            }
        }
        assert!((mr - sr / 35.0).abs() < 1e-12 * mr.max(1e-300));
        assert!((mv - sv / 35.0).abs() < 1e-12 * mv.max(1e-300));
        assert_eq!(mse_vs_baseline(&a, &a).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_offset_gives_closed_form_mse_and_errors() {
        let e = eq();
        let b = constant_result(5, 4, 10.0, e.rho_star, e.v_star);
        let d = per_km_to_per_m(1.5);
        let a = constant_result(5, 4, 10.0, e.rho_star + d, e.v_star);
        let (mr, mv) = mse_vs_baseline(&a, &b).unwrap();
        assert!((mr - (d / e.rho_star).powi(2)).abs() < 1e-15);
        assert_eq!(mv, 0.0);
        let err = state_errors(&a, &b).unwrap();
        assert!((err.max_rho - 1.5).abs() < 1e-9);
        assert!((err.max_rho_pct - 1.25).abs() < 1e-9);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let e = eq();
        let a = constant_result(5, 4, 10.0, e.rho_star, e.v_star);
        let b = constant_result(6, 4, 10.0, e.rho_star, e.v_star);
        assert!(matches!(mse_vs_baseline(&a, &b), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn indices_of_a_stationary_trajectory() {
        let e = eq();
        let r = constant_result(31, 21, 300.0, e.rho_star, e.v_star);
        let p = performance_indices(&r).unwrap();
        let ttt = e.rho_star * 500.0 * 300.0;
        assert!((p.ttt - ttt).abs() < 1e-9 * ttt);
        assert_eq!(p.comfort, 0.0);
        let fuel = (FUEL_B0 + FUEL_B1 * e.v_star).max(0.0) * ttt;
        assert!((p.fuel - fuel).abs() < 1e-9 * fuel);
        let short = constant_result(2, 21, 300.0, e.rho_star, e.v_star);
        assert!(performance_indices(&short).is_err());
    }

    #[test]
    fn travel_time_equals_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = eq();
        let mut r = constant_result(9, 6, 40.0, e.rho_star, e.v_star);
        for x in &mut r.rho {
            *x *= rng.random_range(0.8..1.2);
        }
        let mut direct = 0.0;
        for k in 0..9 {
            for j in 0..6 {
                let wt = if k == 0 || k == 8 { 0.5 } else { 1.0 } * 5.0;
                let wx = if j == 0 || j == 5 { 0.5 } else { 1.0 } * 100.0;
                direct += wt * wx * r.rho[k * 6 + j];
            }
        }
        assert!((performance_indices(&r).unwrap().ttt - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn acceleration_of_a_uniform_ramp() {
        // v = v0 + α t everywhere → a = α
        let e = eq();
        let mut r = constant_result(11, 6, 10.0, e.rho_star, e.v_star);
        for k in 0..11 {
            for j in 0..6 {
                r.v[k * 6 + j] = 5.0 + 0.3 * r.t[k];
            }
        }
        assert!(acceleration(&r).unwrap().iter().all(|a| (a - 0.3).abs() < 1e-12));
    }

    #[test]
    fn decay_fit_recovers_an_exponential_and_detects_floors() {
        let t: Vec<f64> = (0..301).map(|k| k as f64).collect();
        let n: Vec<f64> = t.iter().map(|&s| (-0.05 * s).exp()).collect();
        let f = decay_fit(&t, &n, 0.0, 300.0).unwrap();
        assert!((f.rate - 0.05).abs() < 1e-6);
        assert!(f.floor.is_none());
        let floored: Vec<f64> = t.iter().map(|&s| (-0.05 * s).exp() + 0.01).collect();
        let g = decay_fit(&t, &floored, 0.0, 300.0).unwrap();
        assert!(g.floor.unwrap() > 0.009);
        assert!(g.window.1 < 100.0);
        let mut z = n.clone();
        z[50] = 0.0;
        assert_eq!(decay_fit(&t, &z, 0.0, 300.0).unwrap().window.1, 49.0);
    }

    #[test]
    fn report_row_has_one_field_per_header_column() {
        let e = eq();
        let a = constant_result(5, 4, 10.0, e.rho_star, e.v_star);
        let r = EvaluationReport::evaluate(&a, &a, (0.0, 10.0), Some(Timing { per_eval: 1e-5, amortized: 2e-5 })).unwrap();
        assert_eq!(r.csv_row().split(',').count(), EvaluationReport::csv_header().split(',').count());
        assert!(EvaluationReport::table(&[r]).contains("MSE"));
    }
}
