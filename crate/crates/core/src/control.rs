use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::Equilibrium;
use crate::kernel::{control_gains_original, solve_kernels, EdgeKernels, OriginalGains, TriangularGrid};
use crate::operator::{OperatorModel, PinnModel, TrunkBasis};
use crate::sim::{Grid1D, TrafficState};

/// Default kernel resolution: edge samples for learned kernels, grid
/// size for the exact solve.
pub const EDGE_POINTS: usize = 101;

/// Boundary control law producing the outlet actuation `U(t)` [m/s] in
/// `v(L,t) = q(L,t)/ρ⋆ + U(t)`.
pub trait Controller {
    fn name(&self) -> &str;

    fn compute(&mut self, t: f64, state: &TrafficState, eq: &Equilibrium) -> f64;

    /// Clears per-run memory.
    fn reset(&mut self) {}

    /// Diagnostics collected during the run (extrapolation, clamping).
    fn warnings(&self) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OpenLoop;

impl Controller for OpenLoop {
    fn name(&self) -> &str {
        "open_loop"
    }

    fn compute(&mut self, _t: f64, _state: &TrafficState, _eq: &Equilibrium) -> f64 {
        0.0
    }
}

/// Which of the two equivalent assemblies evaluates the kernel law.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawForm {
    /// Weights on `q − q⋆` and `v − v⋆` in the original variables.
    #[default]
    Original,
    /// `−κ w̃(L) + ∫ Kʷ(L,ξ) w̃ dξ + ∫ Kᵛ(L,ξ) ṽ dξ` in transformed variables.
    Transformed,
}

/// Full-state kernel feedback. The same code path serves exact kernels
/// (backstepping) and kernels inferred by a learned operator.
///
/// The kernel law is naturally a flow: `ρ⋆ U` is what enters the
/// transformed boundary condition. The actuation returned here is that
/// value divided by `ρ⋆`, i.e. a speed.
#[derive(Debug, Clone)]
pub struct KernelController {
    name: String,
    edge: EdgeKernels,
    eq: Equilibrium,
    tau: f64,
    grid: Grid1D,
    form: LawForm,
    gains: OriginalGains,
    kw: Vec<f64>,
    kv: Vec<f64>,
    growth: Vec<f64>,
    warnings: Vec<String>,
}

impl KernelController {
    pub fn new(name: impl Into<String>, edge: EdgeKernels, eq: Equilibrium, tau: f64, grid: Grid1D) -> Result<Self> {
        if edge.xi.len() < 2 || edge.kw.len() != edge.xi.len() || edge.kv.len() != edge.xi.len() {
            return Err(Error::GridMismatch("edge kernels need matching ξ, Kʷ, Kᵛ samples".into()));
        }
        let last = *edge.xi.last().unwrap();
        if (last - grid.length).abs() > 1e-9 * grid.length {
            return Err(Error::GridMismatch(format!("kernels cover [0, {last}] but the road has length {}", grid.length)));
        }
        let mut c = Self {
            name: name.into(),
            edge,
            eq,
            tau,
            grid,
            form: LawForm::Original,
            gains: OriginalGains { xi: vec![], g_q: vec![], g_v: vec![], boundary_q: -1.0, boundary_v: 0.0, dx: 0.0 },
            kw: vec![],
            kv: vec![],
            growth: vec![],
            warnings: vec![],
        };
        c.resample(grid);
        Ok(c)
    }

    /// Exact kernels from the characteristic solver.
    pub fn backstepping(eq: Equilibrium, tau: f64, grid: Grid1D, kernel_grid: &TriangularGrid) -> Result<Self> {
        let kf = solve_kernels(&eq, tau, kernel_grid)?;
        Self::new("backstepping", kf.edge(), eq, tau, grid)
    }

    pub fn with_form(mut self, form: LawForm) -> Self {
        self.form = form;
        self
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_warning(mut self, w: impl Into<String>) -> Self {
        self.warnings.push(w.into());
        self
    }

    pub fn edge(&self) -> &EdgeKernels {
        &self.edge
    }

    pub fn gains(&self) -> &OriginalGains {
        &self.gains
    }

    fn resample(&mut self, grid: Grid1D) {
        let centers = grid.centers();
        self.gains = control_gains_original(&self.edge, &self.eq, self.tau, &centers, grid.dx());
        let (kw, kv): (Vec<f64>, Vec<f64>) = centers.iter().map(|&x| self.edge.at(x)).unzip();
        self.kw = kw;
        self.kv = kv;
        self.growth = centers.iter().map(|&x| (x / (self.tau * self.eq.v_star)).exp()).collect();
        self.grid = grid;
    }

    /// Flow-valued law (the quantity entering `ṽ(L) = κ w̃(L) + U`).
    pub fn flow_law(&self, rho: &[f64], v: &[f64]) -> f64 {
        let eq = &self.eq;
        let n = rho.len();
        let dx = self.grid.dx();
        let q_bar_l = rho[n - 1] * v[n - 1] - eq.q_star;
        let v_bar_l = v[n - 1] - eq.v_star;
        match self.form {
            LawForm::Original => {
                let g = &self.gains;
                let mut acc = 0.0;
                for i in 0..n {
                    acc += g.g_q[i] * (rho[i] * v[i] - eq.q_star) + g.g_v[i] * (v[i] - eq.v_star);
                }
                g.boundary_q * q_bar_l + g.boundary_v * v_bar_l + acc * dx
            }
            LawForm::Transformed => {
                let sw = eq.speed_weight();
                let a = eq.v_star / eq.v_prime;
                let kappa = eq.kappa(self.grid.length, self.tau);
                let w_l = (self.grid.length / (self.tau * eq.v_star)).exp() * (q_bar_l - sw * v_bar_l);
                let mut acc = 0.0;
                for i in 0..n {
                    let vb = v[i] - eq.v_star;
                    let w = self.growth[i] * ((rho[i] * v[i] - eq.q_star) - sw * vb);
                    acc += self.kw[i] * w + self.kv[i] * (-a * vb);
                }
                -kappa * w_l + acc * dx
            }
        }
    }
}

impl Controller for KernelController {
    fn name(&self) -> &str {
        &self.name
    }

    fn compute(&mut self, _t: f64, state: &TrafficState, _eq: &Equilibrium) -> f64 {
        if state.len() != self.grid.n_cells {
            // a different simulation grid: resample rather than truncate
            if let Ok(g) = Grid1D::new(self.grid.length, state.len()) {
                self.resample(g);
            }
        }
        self.flow_law(&state.rho, &state.v) / self.eq.rho_star
    }

    fn warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }
}

/// Flags scenarios whose `(τ, L, λ1)` differ from what the model's
/// family implies for the scenario's `λ2`.
fn family_warning(model_tau: f64, model_len: f64, family_l1: Option<f64>, eq: &Equilibrium, tau: f64, length: f64) -> Option<String> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12);
    let l1_ok = family_l1.is_some_and(|l1| (l1 - eq.lambda1).abs() <= 0.01 * eq.lambda1.abs().max(1e-12));
    if close(model_tau, tau) && close(model_len, length) && l1_ok {
        None
    } else {
        Some(format!(
            "scenario (τ = {tau} s, L = {length} m, λ1 = {:.4} m/s) lies outside the model's training family (τ = {model_tau} s, L = {model_len} m, λ1 = {})",
            eq.lambda1,
            family_l1.map_or("n/a".to_string(), |v| format!("{v:.4} m/s"))
        ))
    }
}

impl KernelController {
    /// Kernels from a trained operator on [`EDGE_POINTS`] points of the
    /// `x = L` edge.
    pub fn from_operator(model: &OperatorModel, eq: Equilibrium, tau: f64, grid: Grid1D) -> Result<Self> {
        Self::from_operator_with(model, &model.edge_basis(EDGE_POINTS)?, eq, tau, grid)
    }

    /// As [`from_operator`](Self::from_operator) with a precomputed edge
    /// basis, so only the branch network runs.
    pub fn from_operator_with(model: &OperatorModel, basis: &TrunkBasis, eq: Equilibrium, tau: f64, grid: Grid1D) -> Result<Self> {
        if model.meta.family.length != grid.length {
            return Err(Error::GridMismatch(format!(
                "model trained for L = {} m, road has L = {} m",
                model.meta.family.length, grid.length
            )));
        }
        let (edge, warning) = model.edge_kernels_with(eq.lambda2, basis)?;
        let fam = &model.meta.family;
        let l1 = fam.equilibrium(eq.lambda2).ok().map(|e| e.lambda1);
        let mut c = Self::new("no_kernel", edge, eq, tau, grid)?;
        c.warnings.extend(warning);
        c.warnings.extend(family_warning(fam.tau, fam.length, l1, &eq, tau, grid.length));
        Ok(c)
    }

    /// Kernels from a single-instance surrogate; errors on any other `λ2`.
    pub fn from_pinn(model: &PinnModel, eq: Equilibrium, tau: f64, grid: Grid1D) -> Result<Self> {
        if model.params.length != grid.length {
            return Err(Error::GridMismatch(format!("model trained for L = {} m, road has L = {} m", model.params.length, grid.length)));
        }
        let edge = model.edge_kernels(eq.lambda2, EDGE_POINTS)?;
        let mut c = Self::new("pinn_kernel", edge, eq, tau, grid)?;
        c.warnings.extend(family_warning(model.params.tau, model.params.length, Some(model.params.lambda1), &eq, tau, grid.length));
        Ok(c)
    }
}

/// Open-loop schedule `Û(t)` read from a control-law operator at the
/// scenario's `λ2`; the state is ignored.
#[derive(Debug, Clone)]
pub struct ControlLawController {
    model: OperatorModel,
    lambda2: f64,
    u_max: Option<f64>,
    base_warnings: Vec<String>,
    warnings: Vec<String>,
}

impl ControlLawController {
    pub fn new(model: OperatorModel, eq: &Equilibrium, tau: f64, length: f64) -> Result<Self> {
        // validates the target and the input range up front
        let (_, mut base) = model.control(eq.lambda2, &[0.0])?;
        let fam = &model.meta.family;
        let l1 = fam.equilibrium(eq.lambda2).ok().map(|e| e.lambda1);
        base.extend(family_warning(fam.tau, fam.length, l1, eq, tau, length));
        Ok(Self { model, lambda2: eq.lambda2, u_max: None, base_warnings: base.clone(), warnings: base })
    }

    pub fn with_u_max(mut self, u_max: Option<f64>) -> Self {
        self.u_max = u_max;
        self
    }
}

impl Controller for ControlLawController {
    fn name(&self) -> &str {
        "no_control_law"
    }

    fn compute(&mut self, t: f64, _state: &TrafficState, _eq: &Equilibrium) -> f64 {
        let (u, w) = match self.model.control(self.lambda2, &[t]) {
            Ok(r) => r,
            Err(e) => (vec![0.0], vec![format!("control-law evaluation failed: {e}")]),
        };
        for w in w {
            if !self.warnings.contains(&w) {
                self.warnings.push(w);
            }
        }
        let u = u[0];
        match self.u_max {
            Some(m) if u.abs() > m => {
                let w = "control-law output saturated".to_string();
                if !self.warnings.contains(&w) {
                    self.warnings.push(w);
                }
                m.copysign(u)
            }
            _ => u,
        }
    }

    fn reset(&mut self) {
        self.warnings = self.base_warnings.clone();
    }

    fn warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }
}

/// Proportional-integral feedback on the inlet speed, actuated as the
/// absolute outlet speed `v(L,t) = U_PI(t)`.
#[derive(Debug, Clone)]
pub struct PiController {
    pub kp: f64,
    pub ki: f64,
    /// Optional clamp on the integral contribution `|ki ∫e|` [m/s].
    pub u_max: Option<f64>,
    integral: f64,
    last: Option<(f64, f64)>,
    clamped: bool,
}

impl PiController {
    // negative: the inlet speed error must be answered by lowering the
    // outlet speed; found by grid search on settling time
    pub const DEFAULT_KP: f64 = -0.2;
    pub const DEFAULT_KI: f64 = -0.005;

    pub fn new(kp: f64, ki: f64) -> Result<Self> {
        if !(kp.is_finite() && ki.is_finite()) {
            return Err(Error::invalid(format!("PI gains must be finite, got kp = {kp}, ki = {ki}")));
        }
        Ok(Self { kp, ki, u_max: None, integral: 0.0, last: None, clamped: false })
    }

    pub fn with_u_max(mut self, u_max: Option<f64>) -> Self {
        self.u_max = u_max;
        self
    }

    /// Integral of the inlet speed error so far [m].
    pub fn integral_state(&self) -> f64 {
        self.integral
    }

    /// `U_PI − v⋆` for inlet error `e` given the current integral.
    pub fn deviation(&self, e: f64) -> f64 {
        self.kp * e + self.ki * self.integral
    }
}

impl Default for PiController {
    fn default() -> Self {
        Self::new(Self::DEFAULT_KP, Self::DEFAULT_KI).unwrap()
    }
}

impl Controller for PiController {
    fn name(&self) -> &str {
        "pi"
    }

    fn compute(&mut self, t: f64, state: &TrafficState, eq: &Equilibrium) -> f64 {
        let e = state.v[0] - eq.v_star;
        // rectangle rule over the step that just finished
        if let Some((tp, ep)) = self.last {
            if t > tp {
                self.integral += ep * (t - tp);
            }
        }
        if let Some(m) = self.u_max {
            if self.ki != 0.0 && (self.ki * self.integral).abs() > m {
                self.integral = m.copysign(self.integral) / self.ki;
                self.clamped = true;
            }
        }
        self.last = Some((t, e));
        let target = eq.v_star + self.deviation(e);
        target - state.outlet_flow() / eq.rho_star
    }

    fn reset(&mut self) {
        self.integral = 0.0;
        self.last = None;
        self.clamped = false;
    }

    fn warnings(&self) -> Vec<String> {
        if self.clamped {
            vec!["PI integral clamped by anti-windup".into()]
        } else {
            vec![]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{FundamentalDiagram, GreenshieldsFD};
    use crate::units::*;

    fn setup() -> (Equilibrium, Grid1D) {
        let fd: FundamentalDiagram = GreenshieldsFD::new(kmh_to_ms(144.0), per_km_to_per_m(160.0), 1.0).unwrap().into();
        (fd.equilibrium(per_km_to_per_m(120.0)).unwrap(), Grid1D::new(500.0, 100).unwrap())
    }

    /// Deviations in `(q, v)`, the variables the law is linear in; flat
    /// at `x = L` so that boundary samples agree across grids.
    fn deviation_state(eq: &Equilibrium, n: usize, scale: f64) -> TrafficState {
        let mut s = TrafficState::uniform(n, eq.rho_star, eq.v_star);
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64;
            let q = eq.q_star * (1.0 + scale * 0.01 * (3.0 * std::f64::consts::PI * x).cos());
            s.v[i] = eq.v_star * (1.0 + scale * 0.02 * (std::f64::consts::PI * x).cos());
            s.rho[i] = q / s.v[i];
        }
        s
    }

    #[test]
    fn all_laws_vanish_at_equilibrium() {
        let (eq, grid) = setup();
        let s = TrafficState::uniform(100, eq.rho_star, eq.v_star);
        let kg = TriangularGrid::new(41, 500.0).unwrap();
        for form in [LawForm::Original, LawForm::Transformed] {
            let mut c = KernelController::backstepping(eq, 60.0, grid, &kg).unwrap().with_form(form);
            assert!(c.compute(0.0, &s, &eq).abs() < 1e-12);
        }
        assert_eq!(PiController::default().compute(0.0, &s, &eq), 0.0);
        assert_eq!(OpenLoop.compute(0.0, &s, &eq), 0.0);
    }

    #[test]
    fn kernel_law_is_linear_in_the_deviation() {
        let (eq, grid) = setup();
        let kg = TriangularGrid::new(41, 500.0).unwrap();
        let mut c = KernelController::backstepping(eq, 60.0, grid, &kg).unwrap();
        let u1 = c.compute(0.0, &deviation_state(&eq, 100, 1.0), &eq);
        let u2 = c.compute(0.0, &deviation_state(&eq, 100, 2.0), &eq);
        assert!(u1.abs() > 1e-6);
        assert!((u2 - 2.0 * u1).abs() < 1e-10);
    }

    #[test]
    fn both_law_forms_agree() {
        let (eq, grid) = setup();
        let kg = TriangularGrid::new(101, 500.0).unwrap();
        let s = deviation_state(&eq, 100, 1.0);
        let mut a = KernelController::backstepping(eq, 60.0, grid, &kg).unwrap();
        let mut b = a.clone().with_form(LawForm::Transformed);
        let (ua, ub) = (a.compute(0.0, &s, &eq), b.compute(0.0, &s, &eq));
        assert!((ua - ub).abs() < 1e-9 * ua.abs().max(1e-9), "{ua} vs {ub}");
    }

    #[test]
    fn exact_edge_kernels_reproduce_backstepping_bitwise() {
        let (eq, grid) = setup();
        let kg = TriangularGrid::new(41, 500.0).unwrap();
        let edge = solve_kernels(&eq, 60.0, &kg).unwrap().edge();
        let mut a = KernelController::backstepping(eq, 60.0, grid, &kg).unwrap();
        let mut b = KernelController::new("no_kernel", edge, eq, 60.0, grid).unwrap();
        let s = deviation_state(&eq, 100, 1.0);
        assert_eq!(a.compute(3.0, &s, &eq).to_bits(), b.compute(3.0, &s, &eq).to_bits());
    }

    #[test]
    fn resamples_to_other_simulation_grids() {
        let (eq, grid) = setup();
        let kg = TriangularGrid::new(41, 500.0).unwrap();
        let mut c = KernelController::backstepping(eq, 60.0, grid, &kg).unwrap();
        let u100 = c.compute(0.0, &deviation_state(&eq, 100, 1.0), &eq);
        let u400 = c.compute(0.0, &deviation_state(&eq, 400, 1.0), &eq);
        assert!((u100 - u400).abs() < 0.02 * u100.abs(), "{u100} vs {u400}");
    }

    #[test]
    fn pi_step_response() {
        let (eq, _) = setup();
        let mut pi = PiController::new(0.5, 0.02).unwrap();
        let e = kmh_to_ms(1.0);
        let mut s = TrafficState::uniform(100, eq.rho_star, eq.v_star);
        s.v[0] += e;
        pi.compute(0.0, &s, &eq);
        let u = pi.compute(10.0, &s, &eq);
        assert!((ms_to_kmh(u) - 0.7).abs() < 1e-12, "{}", ms_to_kmh(u));
        pi.reset();
        assert_eq!(pi.integral_state(), 0.0);
        let mut s0 = TrafficState::uniform(100, eq.rho_star, eq.v_star);
        s0.t = 5.0;
        assert_eq!(pi.compute(5.0, &s0, &eq), 0.0);
    }

    #[test]
    fn pi_anti_windup_clamps_and_reports() {
        let (eq, _) = setup();
        let mut pi = PiController::new(0.5, 0.02).unwrap().with_u_max(Some(0.1));
        let mut s = TrafficState::uniform(100, eq.rho_star, eq.v_star);
        s.v[0] += 1.0;
        for k in 0..50 {
            pi.compute(k as f64, &s, &eq);
        }
        assert!((pi.ki * pi.integral_state()).abs() <= 0.1 + 1e-15);
        assert!(!pi.warnings().is_empty());
        assert!(PiController::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn rejects_kernels_of_another_length() {
        let (eq, grid) = setup();
        let kg = TriangularGrid::new(41, 400.0).unwrap();
        let edge = solve_kernels(&eq, 60.0, &kg).unwrap().edge();
        assert!(matches!(KernelController::new("x", edge, eq, 60.0, grid), Err(Error::GridMismatch(_))));
    }
}
