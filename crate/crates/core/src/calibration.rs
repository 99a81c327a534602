//! Fitting the three-parameter flow–density relation to aggregated
//! observations, and the jam density implied by road geometry.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::ThreeParamFD;
use crate::units::{per_h_to_per_s, per_km_to_per_m, per_m_to_per_km, per_s_to_per_h};

/// `lanes / (vehicle_length · safety_factor)` [veh/m].
pub fn rho_max_from_geometry(lanes: f64, vehicle_length: f64, safety_factor: f64) -> Result<f64> {
    if !(lanes > 0.0 && vehicle_length > 0.0 && safety_factor > 0.0) {
        return Err(Error::invalid(format!(
            "lanes, vehicle length and safety factor must be positive (got {lanes}, {vehicle_length}, {safety_factor})"
        )));
    }
    Ok(lanes / (vehicle_length * safety_factor))
}

/// One space–time cell, SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub x_index: usize,
    pub t_index: usize,
    /// [veh/m]
    pub density: f64,
    /// [veh/s]
    pub flow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedGrid {
    /// Cell size [m] and aggregation interval [s].
    pub dx: f64,
    pub dt: f64,
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    x_index: usize,
    t_index: usize,
    /// veh/km
    density: f64,
    /// veh/h
    flow: f64,
}

impl AggregatedGrid {
    pub const DEFAULT_DX: f64 = 20.0;
    pub const DEFAULT_DT: f64 = 15.0;

    pub fn new(cells: Vec<GridCell>) -> Self {
        Self { dx: Self::DEFAULT_DX, dt: Self::DEFAULT_DT, cells }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Reads `x_index,t_index,density,flow` (veh/km, veh/h). Rows with
    /// non-positive density, density above `rho_max` [veh/m] or negative
    /// flow are rejected with their line number.
    pub fn read_csv(path: &Path, rho_max: Option<f64>) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), line, reason };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_path(path).map_err(|e| parse_err(0, e.to_string()))?;
        let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        for want in ["x_index", "t_index", "density", "flow"] {
            if !headers.iter().any(|h| h == want) {
                return Err(parse_err(1, format!("missing column `{want}`")));
            }
        }
        let mut cells = Vec::new();
        for rec in rdr.deserialize::<CsvRow>() {
            let row = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                parse_err(line, e.to_string())
            })?;
            let line = cells.len() + 2;
            let density = per_km_to_per_m(row.density);
            if !(density > 0.0) || !row.flow.is_finite() || !density.is_finite() {
                return Err(parse_err(line, format!("density must be positive, got {} veh/km", row.density)));
            }
            if let Some(m) = rho_max {
                if density > m * (1.0 + 1e-12) {
                    return Err(parse_err(line, format!("density {} veh/km exceeds the jam density {} veh/km", row.density, per_m_to_per_km(m))));
                }
            }
            if row.flow < 0.0 {
                return Err(parse_err(line, format!("flow must be nonnegative, got {} veh/h", row.flow)));
            }
            cells.push(GridCell { x_index: row.x_index, t_index: row.t_index, density, flow: per_h_to_per_s(row.flow) });
        }
        Ok(Self::new(cells))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for c in &self.cells {
            w.serialize(CsvRow { x_index: c.x_index, t_index: c.t_index, density: per_m_to_per_km(c.density), flow: per_s_to_per_h(c.flow) })
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Observations drawn from `fd` at densities uniform on
    /// `[0.02, 0.98]·ρ_m`, flows perturbed by multiplicative Gaussian noise
    /// of relative size `noise`.
    pub fn synthetic(fd: &ThreeParamFD, n: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(0.02 * fd.rho_m, 0.98 * fd.rho_m).unwrap();
        let g = Normal::new(0.0, 1.0).unwrap();
        let side = (n as f64).sqrt().ceil() as usize;
        let cells = (0..n)
            .map(|k| {
                let rho = u.sample(&mut rng);
                let q = fd.flow(rho) * (1.0 + noise * g.sample(&mut rng));
                GridCell { x_index: k % side, t_index: k / side, density: rho, flow: q.max(0.0) }
            })
            .collect();
        Self::new(cells)
    }
}

/// Result of a three-parameter fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub fd: ThreeParamFD,
    /// Root-mean-square flow residual [veh/s].
    pub rmse: f64,
    /// Sum of squared residuals [veh²/s²] at the optimum.
    pub objective: f64,
    /// `(ζ, κ, p)` of each start with its objective.
    pub starts: Vec<([f64; 3], f64)>,
}

impl Calibration {
    /// TOML fragment accepted by the CLI's `[fd]` table.
    pub fn to_toml(&self) -> String {
        format!(
            "[fd]\nkind = \"three_param\"\nzeta_veh_per_h = {}\nkappa = {}\np = {}\nrho_max_veh_per_km = {}\n",
            per_s_to_per_h(self.fd.zeta),
            self.fd.kappa,
            self.fd.p,
            per_m_to_per_km(self.fd.rho_m)
        )
    }
}

/// Minimises `f` from `x0` with the Nelder–Mead simplex (reflection 1,
/// expansion 2, contraction ½, shrink ½). Returns the best vertex.
pub fn nelder_mead<const N: usize>(f: &dyn Fn(&[f64; N]) -> f64, x0: [f64; N], step: [f64; N], max_iter: usize, ftol: f64) -> ([f64; N], f64) {
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..N {
        let mut x = x0;
        x[i] += step[i];
        simplex.push((x, f(&x)));
    }
    let combine = |a: &[f64; N], b: &[f64; N], t: f64| -> [f64; N] {
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = a[i] + t * (b[i] - a[i]);
        }
        out
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[N].1);
        if (worst - best).abs() <= ftol * (best.abs() + ftol) {
            break;
        }
        let mut centroid = [0.0; N];
        for (x, _) in &simplex[..N] {
            for i in 0..N {
                centroid[i] += x[i] / N as f64;
            }
        }
        let xw = simplex[N].0;
        let xr = combine(&centroid, &xw, -1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = combine(&centroid, &xw, -2.0);
            let fe = f(&xe);
            simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let xc = combine(&centroid, &xr, 0.5);
                (xc, f(&xc))
            } else {
                let xc = combine(&centroid, &xw, 0.5);
                (xc, f(&xc))
            };
            if fc < worst.min(fr) {
                simplex[N] = (xc, fc);
            } else {
                let x0 = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    v.0 = combine(&x0, &v.0, 0.5);
                    v.1 = f(&v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Peak of the unit-scale shape `a + (b−a)s − sqrt(1 + κ²(s−p)²)`.
fn shape_peak(kappa: f64, p: f64) -> f64 {
    let fd = ThreeParamFD::new(1.0, kappa, p, 1.0).unwrap();
    (0..=1000).map(|k| fd.flow(k as f64 / 1000.0)).fold(f64::MIN, f64::max)
}

/// Least-squares fit of `(ζ, κ, p)` at fixed `rho_m` [veh/m] from nine
/// deterministic starts (`p ∈ {0.2, 0.3, 0.4}`, `κ ∈ {5, 15, 30}`, `ζ`
/// matching the largest observed flow).
pub fn fit_three_param(grid: &AggregatedGrid, rho_m: f64) -> Result<Calibration> {
    if !(rho_m > 0.0) {
        return Err(Error::invalid(format!("jam density must be positive, got {rho_m}")));
    }
    if grid.len() < 50 {
        return Err(Error::IllPosed(format!("{} observations; at least 50 are needed", grid.len())));
    }
    let (lo, hi) = grid.cells.iter().fold((f64::MAX, f64::MIN), |(a, b), c| (a.min(c.density), b.max(c.density)));
    if (hi - lo) / rho_m < 0.1 {
        return Err(Error::IllPosed(format!(
            "densities span only {:.1}–{:.1} veh/km; both free-flow and congested data are needed",
            per_m_to_per_km(lo),
            per_m_to_per_km(hi)
        )));
    }
    let q_max = grid.cells.iter().map(|c| c.flow).fold(0.0, f64::max);
    if !(q_max > 0.0) {
        return Err(Error::IllPosed("all observed flows are zero".into()));
    }
    // search in (ln ζ/q_max, ln κ, logit p) so every vertex is admissible
    let decode = |y: &[f64; 3]| -> (f64, f64, f64) { (q_max * y[0].exp(), y[1].exp(), 1.0 / (1.0 + (-y[2]).exp())) };
    let objective = |zeta: f64, kappa: f64, p: f64| -> f64 {
        match ThreeParamFD::new(zeta, kappa, p, rho_m) {
            Ok(fd) => grid.cells.iter().map(|c| (fd.flow(c.density) - c.flow).powi(2)).sum(),
            Err(_) => f64::INFINITY,
        }
    };
    let f = |y: &[f64; 3]| {
        let (z, k, p) = decode(y);
        let v = objective(z, k, p) / (q_max * q_max);
        if v.is_finite() { v } else { f64::MAX }
    };
    let mut starts = Vec::new();
    let mut best: Option<([f64; 3], f64)> = None;
    for p0 in [0.2, 0.3, 0.4] {
        for k0 in [5.0, 15.0, 30.0] {
            let z0 = q_max / shape_peak(k0, p0);
            starts.push(([z0, k0, p0], objective(z0, k0, p0)));
            let y0 = [(z0 / q_max).ln(), k0.ln(), (p0 / (1.0 - p0)).ln()];
            let (mut y, mut v) = nelder_mead(&f, y0, [0.2, 0.3, 0.4], 4000, 1e-15);
            // restart from the optimum to escape a collapsed simplex
            for _ in 0..3 {
                let (y2, v2) = nelder_mead(&f, y, [0.02, 0.02, 0.02], 4000, 1e-16);
                let done = v2 >= v * (1.0 - 1e-14);
                if v2 < v {
                    y = y2;
                    v = v2;
                }
                if done {
                    break;
                }
            }
            if best.is_none_or(|b| v < b.1) {
                best = Some((y, v));
            }
        }
    }
    let (y, _) = best.unwrap();
    let (zeta, kappa, p) = decode(&y);
    let fd = ThreeParamFD::new(zeta, kappa, p, rho_m)?;
    let obj = objective(zeta, kappa, p);
    Ok(Calibration { fd, rmse: (obj / grid.len() as f64).sqrt(), objective: obj, starts })
}
