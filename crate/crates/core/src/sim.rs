//! First-order finite-volume integrator for the ARZ system.
//!
//! The update works on the conserved pair `(ρ, y)` with `y = ρ (v − V(ρ))`:
//!
//! ```text
//! ρ_t + (ρ v)_x = 0
//! y_t + (y v)_x = −y/τ
//! ```
//!
//! The transport part uses an HLL flux bounded by the two characteristic
//! speeds `v` and `v + ρ V'(ρ)`; the relaxation source is linear in `y` and
//! is integrated exactly after each transport substep.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::Controller;
use crate::error::{Error, Result};
use crate::fd::{Equilibrium, FundamentalDiagram};
use crate::metrics::l2_deviation;
use crate::units::{ms_to_kmh, per_m_to_per_km};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub length: f64,
    pub n_cells: usize,
}

impl Grid1D {
    pub fn new(length: f64, n_cells: usize) -> Result<Self> {
        if n_cells < 8 {
            return Err(Error::invalid(format!("grid needs at least 8 cells, got {n_cells}")));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::invalid(format!("road length must be positive, got {length}")));
        }
        Ok(Self { length, n_cells })
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }
}

/// Density [veh/m] and speed [m/s] cell averages at time `t` [s].
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState {
    pub rho: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
}

impl TrafficState {
    pub fn uniform(n: usize, rho: f64, v: f64) -> Self {
        Self { rho: vec![rho; n], v: vec![v; n], t: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn validate(&self, rho_max: f64) -> Result<()> {
        if self.rho.len() != self.v.len() {
            return Err(Error::GridMismatch(format!(
                "density has {} cells, speed has {}",
                self.rho.len(),
                self.v.len()
            )));
        }
        for (i, (&r, &v)) in self.rho.iter().zip(&self.v).enumerate() {
            if !(r > 0.0 && r <= rho_max) || !(v > 0.0 && v.is_finite()) {
                return Err(Error::InitialCondition(format!(
                    "cell {i}: rho = {r} veh/m, v = {v} m/s violates 0 < rho <= {rho_max}, v > 0"
                )));
            }
        }
        Ok(())
    }

    /// Flow `ρ v` of the last cell, the outlet trace used by the boundary
    /// conditions and the control laws.
    pub fn outlet_flow(&self) -> f64 {
        let n = self.len() - 1;
        self.rho[n] * self.v[n]
    }
}

/// Spatial × temporal resolution of the recorded trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputGrid {
    pub nx: usize,
    pub nt: usize,
}

impl Default for OutputGrid {
    fn default() -> Self {
        Self { nx: 101, nt: 301 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid: Grid1D,
    pub horizon: f64,
    pub cfl: f64,
    pub tau: f64,
    pub fd: FundamentalDiagram,
    pub eq: Equilibrium,
    pub output: OutputGrid,
    /// Optional actuation bound `|U| ≤ u_max` [m/s].
    pub u_max: Option<f64>,
}

impl SimConfig {
    pub fn new(grid: Grid1D, horizon: f64, tau: f64, fd: FundamentalDiagram, eq: Equilibrium) -> Self {
        Self { grid, horizon, cfl: 0.9, tau, fd, eq, output: OutputGrid::default(), u_max: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 0.9) {
            return Err(Error::invalid(format!("CFL number must lie in (0, 0.9], got {}", self.cfl)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("relaxation time must be positive, got {}", self.tau)));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.output.nx < 2 || self.output.nt < 2 {
            return Err(Error::invalid("output grid needs at least 2 samples per axis"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// `ρ = ρ⋆(1 + a sin(3πx/L))`, `v = v⋆(1 − a sin(3πx/L))`.
    Sinusoidal3Pi { amplitude: f64 },
    /// `q = q⋆(1 + a sin(πx/L))`, `v = v⋆(1 − a sin(πx/L))`, `ρ = q/v`.
    SinusoidalPi { amplitude: f64 },
    /// `q = q0 + q_slope x`, `v = v0 + v_slope x` in SI, `ρ = q/v`.
    Linear { q0: f64, q_slope: f64, v0: f64, v_slope: f64 },
    ConstantEquilibrium,
    /// Cell averages given directly; must match the grid.
    Custom { rho: Vec<f64>, v: Vec<f64> },
}

impl InitialCondition {
    pub fn stop_and_go() -> Self {
        InitialCondition::Sinusoidal3Pi { amplitude: 0.1 }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            InitialCondition::Sinusoidal3Pi { .. } => "sinusoidal_3pi",
            InitialCondition::SinusoidalPi { .. } => "sinusoidal_pi",
            InitialCondition::Linear { .. } => "linear",
            InitialCondition::ConstantEquilibrium => "constant_equilibrium",
            InitialCondition::Custom { .. } => "custom",
        }
    }
}

/// Point values of an initial profile at position `x`.
fn profile_at(kind: &InitialCondition, eq: &Equilibrium, length: f64, x: f64) -> (f64, f64) {
    use std::f64::consts::PI;
    match kind {
        InitialCondition::Sinusoidal3Pi { amplitude } => {
            let s = (3.0 * PI * x / length).sin();
            (eq.rho_star * (1.0 + amplitude * s), eq.v_star * (1.0 - amplitude * s))
        }
        InitialCondition::SinusoidalPi { amplitude } => {
            let s = (PI * x / length).sin();
            let q = eq.q_star * (1.0 + amplitude * s);
            let v = eq.v_star * (1.0 - amplitude * s);
            (q / v, v)
        }
        InitialCondition::Linear { q0, q_slope, v0, v_slope } => {
            let q = q0 + q_slope * x;
            let v = v0 + v_slope * x;
            (q / v, v)
        }
        InitialCondition::ConstantEquilibrium => (eq.rho_star, eq.v_star),
        InitialCondition::Custom { .. } => unreachable!("custom profiles carry cell values"),
    }
}

/// Builds the initial cell state, sampling analytic profiles at cell centers.
pub fn make_initial(kind: &InitialCondition, eq: &Equilibrium, grid: &Grid1D, fd: &FundamentalDiagram) -> Result<TrafficState> {
    let state = match kind {
        InitialCondition::Custom { rho, v } => {
            if rho.len() != grid.n_cells || v.len() != grid.n_cells {
                return Err(Error::InitialCondition(format!(
                    "custom profile has {}/{} values for a {}-cell grid",
                    rho.len(),
                    v.len(),
                    grid.n_cells
                )));
            }
            TrafficState { rho: rho.clone(), v: v.clone(), t: 0.0 }
        }
        _ => {
            let (rho, v) = (0..grid.n_cells)
                .map(|i| profile_at(kind, eq, grid.length, grid.center(i)))
                .unzip();
            TrafficState { rho, v, t: 0.0 }
        }
    };
    state.validate(fd.rho_max())?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, Default)]
struct Flux {
    mass: f64,
    y: f64,
}

/// Mutable integrator state for one run.
#[derive(Debug, Clone)]
pub struct ArzSolver {
    fd: FundamentalDiagram,
    eq: Equilibrium,
    tau: f64,
    cfl: f64,
    dx: f64,
    rho: Vec<f64>,
    y: Vec<f64>,
    v: Vec<f64>,
    /// Per-cell primitive data `(ρ, v, y, v + ρV'(ρ))` reused by both
    /// interfaces of a cell.
    cells: Vec<[f64; 4]>,
    fresh: bool,
    flux: Vec<Flux>,
    t: f64,
    inflow: f64,
    outflow: f64,
}

impl ArzSolver {
    pub fn new(cfg: &SimConfig, state: &TrafficState) -> Result<Self> {
        cfg.validate()?;
        if state.len() != cfg.grid.n_cells {
            return Err(Error::GridMismatch(format!(
                "state has {} cells, grid has {}",
                state.len(),
                cfg.grid.n_cells
            )));
        }
        let y = state
            .rho
            .iter()
            .zip(&state.v)
            .map(|(&r, &v)| r * (v - cfg.fd.speed(r)))
            .collect();
        Ok(Self {
            fd: cfg.fd,
            eq: cfg.eq,
            tau: cfg.tau,
            cfl: cfg.cfl,
            dx: cfg.grid.dx(),
            rho: state.rho.clone(),
            y,
            v: state.v.clone(),
            cells: vec![[0.0; 4]; state.len()],
            fresh: false,
            flux: vec![Flux::default(); state.len() + 1],
            t: state.t,
            inflow: 0.0,
            outflow: 0.0,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn state(&self) -> TrafficState {
        TrafficState { rho: self.rho.clone(), v: self.v.clone(), t: self.t }
    }

    /// Vehicle flux through the inlet and outlet during the last step.
    pub fn boundary_fluxes(&self) -> (f64, f64) {
        (self.inflow, self.outflow)
    }

    /// Inlet ghost: speed extrapolated from the first cell, density fixed
    /// by the prescribed inflow `ρ v = q⋆`.
    fn inlet_ghost(&self) -> (f64, f64) {
        let v = self.v[0];
        (self.eq.q_star / v, v)
    }

    /// Outlet ghost: `v = q(L)/ρ⋆ + U` with the flow extrapolated from the
    /// last cell; the ghost density carries that same flow.
    fn outlet_ghost(&self, u: f64) -> (f64, f64) {
        let n = self.rho.len() - 1;
        let q = self.rho[n] * self.v[n];
        let v = q / self.eq.rho_star + u;
        (q / v, v)
    }

    fn cell_data(&self, r: f64, v: f64) -> [f64; 4] {
        [r, v, r * (v - self.fd.speed(r)), v + r * self.fd.speed_derivative(r)]
    }

    fn refresh_cells(&mut self) {
        if self.fresh {
            return;
        }
        self.fresh = true;
        for i in 0..self.rho.len() {
            self.cells[i] = self.cell_data(self.rho[i], self.v[i]);
        }
    }

    fn max_speed(&self, ghosts: [(f64, f64); 2]) -> f64 {
        let interior = self.cells.iter().fold(0.0f64, |m, c| m.max(c[1].abs()).max(c[3].abs()));
        ghosts.iter().fold(interior, |m, &(r, v)| {
            let c = self.cell_data(r, v);
            m.max(c[1].abs()).max(c[3].abs())
        })
    }

    /// CFL-limited time step for the current state and actuation.
    pub fn stable_dt(&mut self, u: f64) -> f64 {
        self.refresh_cells();
        let s = self.max_speed([self.inlet_ghost(), self.outlet_ghost(u)]);
        self.cfl * self.dx / s.max(1e-12)
    }

    #[inline]
    fn hll(l: &[f64; 4], r: &[f64; 4]) -> Flux {
        let [rl, vl, yl, cl] = *l;
        let [rr, vr, yr, cr] = *r;
        let sl = vl.min(cl).min(vr).min(cr);
        let sr = vl.max(cl).max(vr).max(cr);
        let fl = Flux { mass: rl * vl, y: yl * vl };
        let fr = Flux { mass: rr * vr, y: yr * vr };
        if sl >= 0.0 {
            fl
        } else if sr <= 0.0 {
            fr
        } else {
            let w = 1.0 / (sr - sl);
            Flux {
                mass: (sr * fl.mass - sl * fr.mass + sl * sr * (rr - rl)) * w,
                y: (sr * fl.y - sl * fr.y + sl * sr * (yr - yl)) * w,
            }
        }
    }

    /// Advances by `dt` with outlet actuation `u` [m/s].
    pub fn advance(&mut self, dt: f64, u: f64) -> Result<()> {
        let n = self.rho.len();
        let left = self.inlet_ghost();
        let right = self.outlet_ghost(u);
        if !(left.0 > 0.0 && left.0.is_finite() && right.0 > 0.0 && right.1 > 0.0 && right.0.is_finite()) {
            return Err(Error::BlowUp {
                t: self.t,
                reason: format!("inadmissible ghost states: inlet {left:?}, outlet {right:?} (u = {u})"),
            });
        }
        // cells are refreshed here as well so advance() is valid without a
        // preceding stable_dt()
        self.refresh_cells();
        let (gl, gr) = (self.cell_data(left.0, left.1), self.cell_data(right.0, right.1));
        self.flux[0] = Self::hll(&gl, &self.cells[0]);
        for i in 1..n {
            self.flux[i] = Self::hll(&self.cells[i - 1], &self.cells[i]);
        }
        self.flux[n] = Self::hll(&self.cells[n - 1], &gr);

        let ratio = dt / self.dx;
        let decay = (-dt / self.tau).exp();
        for i in 0..n {
            let (fl, fr) = (self.flux[i], self.flux[i + 1]);
            let rho = self.rho[i] - ratio * (fr.mass - fl.mass);
            let y = (self.y[i] - ratio * (fr.y - fl.y)) * decay;
            if !(rho > 0.0 && rho.is_finite() && y.is_finite()) {
                return Err(Error::BlowUp {
                    t: self.t + dt,
                    reason: format!("cell {i}: rho = {rho}, y = {y}"),
                });
            }
            self.rho[i] = rho;
            self.y[i] = y;
            self.v[i] = y / rho + self.fd.speed(rho);
        }
        self.fresh = false;
        self.inflow = self.flux[0].mass * dt;
        self.outflow = self.flux[n].mass * dt;
        self.t += dt;
        Ok(())
    }
}

/// One CFL-limited step from `state` with actuation `u_boundary` [m/s].
pub fn step(state: &TrafficState, cfg: &SimConfig, u_boundary: f64) -> Result<TrafficState> {
    let mut solver = ArzSolver::new(cfg, state)?;
    let dt = solver.stable_dt(u_boundary);
    solver.advance(dt, u_boundary)?;
    Ok(solver.state())
}

/// Samples cell averages at `nx` equispaced points on `[0, L]`, linear
/// between cell centers and constant beyond the outermost centers.
pub fn sample_profile(values: &[f64], grid: &Grid1D, nx: usize) -> Vec<f64> {
    let dx = grid.dx();
    let n = values.len();
    (0..nx)
        .map(|j| {
            let x = grid.length * j as f64 / (nx - 1) as f64;
            let s = x / dx - 0.5;
            if s <= 0.0 {
                values[0]
            } else if s >= (n - 1) as f64 {
                values[n - 1]
            } else {
                let i = s.floor() as usize;
                let w = s - i as f64;
                values[i] * (1.0 - w) + values[i + 1] * w
            }
        })
        .collect()
}

/// Full spatio-temporal record of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub controller: String,
    pub eq: Equilibrium,
    pub length: f64,
    /// Output times [s].
    pub t: Vec<f64>,
    /// Output positions [m].
    pub x: Vec<f64>,
    /// Density [veh/m], row-major `t × x`.
    pub rho: Vec<f64>,
    /// Speed [m/s], row-major `t × x`.
    pub v: Vec<f64>,
    /// Actuation [m/s] per output time.
    pub u: Vec<f64>,
    /// Nondimensional L2 deviation of the full cell state per output time.
    pub l2: Vec<f64>,
    pub warnings: Vec<String>,
    pub steps: usize,
}

impl ScenarioResult {
    pub fn nx(&self) -> usize {
        self.x.len()
    }

    pub fn nt(&self) -> usize {
        self.t.len()
    }

    pub fn rho_row(&self, k: usize) -> &[f64] {
        &self.rho[k * self.nx()..(k + 1) * self.nx()]
    }

    pub fn v_row(&self, k: usize) -> &[f64] {
        &self.v[k * self.nx()..(k + 1) * self.nx()]
    }

    /// First output time at which the deviation drops below `fraction` of
    /// its initial value.
    pub fn time_below(&self, fraction: f64) -> Option<f64> {
        let l0 = self.l2[0];
        self.l2.iter().zip(&self.t).find(|(&l, _)| l < fraction * l0).map(|(_, &t)| t)
    }

    /// Deviation at the output sample nearest to `time`.
    pub fn l2_at(&self, time: f64) -> f64 {
        let k = self
            .t
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - time).abs().total_cmp(&(b.1 - time).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        self.l2[k]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "#units t=s x=m rho=veh/km v=km/h u=km/h controller={}", self.controller)?;
        writeln!(out, "t,x,rho,v,u")?;
        let nx = self.nx();
        for (k, &t) in self.t.iter().enumerate() {
            let u = ms_to_kmh(self.u[k]);
            for (j, &x) in self.x.iter().enumerate() {
                let idx = k * nx + j;
                writeln!(out, "{t},{x},{},{},{u}", per_m_to_per_km(self.rho[idx]), ms_to_kmh(self.v[idx]))?;
            }
        }
        Ok(())
    }
}

/// Runs the closed loop from `ic` for `cfg.horizon` seconds.
///
/// The controller is evaluated at every internal step. Output samples take
/// the internal step whose time is nearest to each output time.
pub fn run_closed_loop(ic: &InitialCondition, cfg: &SimConfig, controller: &mut dyn Controller) -> Result<ScenarioResult> {
    let state0 = make_initial(ic, &cfg.eq, &cfg.grid, &cfg.fd)?;
    run_from_state(&state0, cfg, controller)
}

pub fn run_from_state(state0: &TrafficState, cfg: &SimConfig, controller: &mut dyn Controller) -> Result<ScenarioResult> {
    let mut solver = ArzSolver::new(cfg, state0)?;
    controller.reset();

    let (nx, nt) = (cfg.output.nx, cfg.output.nt);
    let times: Vec<f64> = (0..nt).map(|k| cfg.horizon * k as f64 / (nt - 1) as f64).collect();
    let xs: Vec<f64> = (0..nx).map(|j| cfg.grid.length * j as f64 / (nx - 1) as f64).collect();
    let mut result = ScenarioResult {
        controller: controller.name().to_string(),
        eq: cfg.eq,
        length: cfg.grid.length,
        t: times.clone(),
        x: xs,
        rho: Vec::with_capacity(nx * nt),
        v: Vec::with_capacity(nx * nt),
        u: Vec::with_capacity(nt),
        l2: Vec::with_capacity(nt),
        warnings: Vec::new(),
        steps: 0,
    };

    let clamp = |u: f64| match cfg.u_max {
        Some(m) => u.clamp(-m, m),
        None => u,
    };
    let record = |result: &mut ScenarioResult, rho: &[f64], v: &[f64], u: f64| {
        result.rho.extend(sample_profile(rho, &cfg.grid, nx));
        result.v.extend(sample_profile(v, &cfg.grid, nx));
        result.u.push(u);
        result.l2.push(l2_deviation(rho, v, &cfg.eq, cfg.grid.dx()));
    };

    let mut next = 0usize;
    let mut prev: Option<(f64, Vec<f64>, Vec<f64>, f64)> = None;
    loop {
        let t = solver.time();
        let state = TrafficState { rho: solver.rho().to_vec(), v: solver.v().to_vec(), t };
        let u = clamp(controller.compute(t, &state, &cfg.eq));

        while next < nt && times[next] <= t + 1e-9 {
            let target = times[next];
            match &prev {
                Some((tp, rp, vp, up)) if (target - tp).abs() < (t - target).abs() => record(&mut result, rp, vp, *up),
                _ => record(&mut result, &state.rho, &state.v, u),
            }
            next += 1;
        }
        if next >= nt || t >= cfg.horizon - 1e-9 {
            break;
        }
        let dt = solver.stable_dt(u).min(cfg.horizon - t);
        solver.advance(dt, u)?;
        result.steps += 1;
        prev = Some((t, state.rho, state.v, u));
    }
    // horizon reached exactly on the last step, so every sample is filled
    debug_assert_eq!(result.u.len(), nt);
    result.warnings = controller.warnings();
    Ok(result)
}
