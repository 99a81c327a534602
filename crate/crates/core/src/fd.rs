//! Fundamental diagrams: equilibrium speed-density relations, their
//! derivatives, and the congested equilibria the controllers are designed
//! around.
//!
//! All quantities are SI: densities in veh/m, speeds in m/s, flows in veh/s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `V(ρ) = v_f (1 − (ρ/ρ_m)^γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenshieldsFD {
    pub v_f: f64,
    pub rho_m: f64,
    pub gamma: f64,
}

impl GreenshieldsFD {
    pub fn new(v_f: f64, rho_m: f64, gamma: f64) -> Result<Self> {
        if !(v_f > 0.0 && rho_m > 0.0 && gamma > 0.0) || !(v_f.is_finite() && rho_m.is_finite() && gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "Greenshields parameters must be positive and finite (v_f={v_f}, rho_m={rho_m}, gamma={gamma})"
            )));
        }
        Ok(Self { v_f, rho_m, gamma })
    }

    fn speed(&self, rho: f64) -> f64 {
        let s = rho.max(0.0) / self.rho_m;
        if self.gamma == 1.0 {
            return self.v_f * (1.0 - s);
        }
        self.v_f * (1.0 - s.powf(self.gamma))
    }

    fn speed_derivative(&self, rho: f64) -> f64 {
        if self.gamma == 1.0 {
            return -self.v_f / self.rho_m;
        }
        -self.gamma * self.v_f * rho.max(0.0).powf(self.gamma - 1.0) / self.rho_m.powf(self.gamma)
    }
}

/// Three-parameter flow-density relation
/// `Q(ρ) = ζ (a + (b − a) ρ/ρ_m − sqrt(1 + κ² (ρ/ρ_m − p)²))`
/// with `a = sqrt(1 + κ² p²)` and `b = sqrt(1 + κ² (1 − p)²)`.
///
/// `a` and `b` are recomputed from `(κ, p)` on every evaluation. The
/// closed form gives `Q(0) = 0`; whatever rounding leaves behind is stored
/// in `q_offset` and subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeParamFD {
    /// Flow scale [veh/s].
    pub zeta: f64,
    pub kappa: f64,
    pub p: f64,
    pub rho_m: f64,
    #[serde(default)]
    q_offset: f64,
}

impl ThreeParamFD {
    pub fn new(zeta: f64, kappa: f64, p: f64, rho_m: f64) -> Result<Self> {
        if !(zeta > 0.0 && kappa > 0.0 && rho_m > 0.0) || !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!(
                "three-parameter FD requires zeta>0, kappa>0, 0<p<1, rho_m>0 (got {zeta}, {kappa}, {p}, {rho_m})"
            )));
        }
        let mut fd = Self { zeta, kappa, p, rho_m, q_offset: 0.0 };
        fd.q_offset = fd.raw_flow(0.0);
        Ok(fd)
    }

    pub fn a(&self) -> f64 {
        (1.0 + self.kappa * self.kappa * self.p * self.p).sqrt()
    }

    pub fn b(&self) -> f64 {
        let one_minus_p = 1.0 - self.p;
        (1.0 + self.kappa * self.kappa * one_minus_p * one_minus_p).sqrt()
    }

    /// Residual `Q(0)` removed from the closed form.
    pub fn q_offset(&self) -> f64 {
        self.q_offset
    }

    fn raw_flow(&self, rho: f64) -> f64 {
        let s = rho / self.rho_m;
        let d = s - self.p;
        self.zeta * (self.a() + (self.b() - self.a()) * s - (1.0 + self.kappa * self.kappa * d * d).sqrt())
    }

    pub fn flow(&self, rho: f64) -> f64 {
        self.raw_flow(rho) - self.q_offset
    }

    pub fn flow_derivative(&self, rho: f64) -> f64 {
        let s = rho / self.rho_m;
        let d = s - self.p;
        let k2 = self.kappa * self.kappa;
        self.zeta / self.rho_m * ((self.b() - self.a()) - k2 * d / (1.0 + k2 * d * d).sqrt())
    }

    pub fn flow_second_derivative(&self, rho: f64) -> f64 {
        let d = rho / self.rho_m - self.p;
        let k2 = self.kappa * self.kappa;
        -self.zeta * k2 / (self.rho_m * self.rho_m) / (1.0 + k2 * d * d).powf(1.5)
    }

    fn speed(&self, rho: f64) -> f64 {
        if rho <= 1e-9 * self.rho_m {
            // Q(ρ)/ρ → Q'(0) as ρ → 0
            return self.flow_derivative(0.0) + 0.5 * self.flow_second_derivative(0.0) * rho.max(0.0);
        }
        self.flow(rho) / rho
    }

    fn speed_derivative(&self, rho: f64) -> f64 {
        if rho <= 1e-6 * self.rho_m {
            return 0.5 * self.flow_second_derivative(rho.max(0.0));
        }
        (rho * self.flow_derivative(rho) - self.flow(rho)) / (rho * rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FundamentalDiagram {
    Greenshields(GreenshieldsFD),
    ThreeParam(ThreeParamFD),
}

impl From<GreenshieldsFD> for FundamentalDiagram {
    fn from(fd: GreenshieldsFD) -> Self {
        FundamentalDiagram::Greenshields(fd)
    }
}

impl From<ThreeParamFD> for FundamentalDiagram {
    fn from(fd: ThreeParamFD) -> Self {
        FundamentalDiagram::ThreeParam(fd)
    }
}

impl FundamentalDiagram {
    pub fn rho_max(&self) -> f64 {
        match self {
            FundamentalDiagram::Greenshields(g) => g.rho_m,
            FundamentalDiagram::ThreeParam(t) => t.rho_m,
        }
    }

    fn check(&self, rho: f64, closed: bool) -> Result<()> {
        let hi = self.rho_max();
        let ok = if closed { (0.0..=hi).contains(&rho) } else { rho > 0.0 && rho < hi };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain { quantity: "density", value: rho, lo: 0.0, hi })
        }
    }

    /// Equilibrium speed `V(ρ)`, for `0 ≤ ρ ≤ ρ_m`.
    pub fn velocity(&self, rho: f64) -> Result<f64> {
        self.check(rho, true)?;
        Ok(self.speed(rho))
    }

    /// `V'(ρ)`, for `0 < ρ < ρ_m`.
    pub fn velocity_derivative(&self, rho: f64) -> Result<f64> {
        self.check(rho, false)?;
        Ok(self.speed_derivative(rho))
    }

    /// Unchecked `V(ρ)` used in the inner loops of the simulator, where
    /// transient states can touch the edges of the admissible range.
    #[inline]
    pub fn speed(&self, rho: f64) -> f64 {
        match self {
            FundamentalDiagram::Greenshields(g) => g.speed(rho),
            FundamentalDiagram::ThreeParam(t) => t.speed(rho),
        }
    }

    #[inline]
    pub fn speed_derivative(&self, rho: f64) -> f64 {
        match self {
            FundamentalDiagram::Greenshields(g) => g.speed_derivative(rho),
            FundamentalDiagram::ThreeParam(t) => t.speed_derivative(rho),
        }
    }

    /// Equilibrium flow `Q(ρ) = ρ V(ρ)`.
    pub fn flow(&self, rho: f64) -> f64 {
        match self {
            FundamentalDiagram::Greenshields(g) => rho * g.speed(rho),
            FundamentalDiagram::ThreeParam(t) => t.flow(rho),
        }
    }

    /// `Q'(ρ) = V(ρ) + ρ V'(ρ)`.
    pub fn flow_derivative(&self, rho: f64) -> f64 {
        match self {
            FundamentalDiagram::Greenshields(g) => g.speed(rho) + rho * g.speed_derivative(rho),
            FundamentalDiagram::ThreeParam(t) => t.flow_derivative(rho),
        }
    }

    /// Numerical strict-concavity check of `Q` on `samples` interior points.
    pub fn is_strictly_concave(&self, samples: usize) -> bool {
        let n = samples.max(3);
        let h = self.rho_max() / (n as f64 + 1.0);
        (1..=n).all(|i| {
            let rho = i as f64 * h;
            self.flow(rho - h) - 2.0 * self.flow(rho) + self.flow(rho + h) < 0.0
        })
    }

    /// Density maximising `Q`, found by bisection on `Q'`.
    pub fn critical_density(&self) -> Result<f64> {
        let rho_m = self.rho_max();
        let mut lo = 1e-12 * rho_m;
        let mut hi = rho_m * (1.0 - 1e-12);
        let (dlo, dhi) = (self.flow_derivative(lo), self.flow_derivative(hi));
        if !(dlo > 0.0 && dhi < 0.0) {
            return Err(Error::Model(format!(
                "Q' has no sign change on (0, rho_m): Q'(0+) = {dlo}, Q'(rho_m-) = {dhi}"
            )));
        }
        while hi - lo > 1e-10 * hi {
            let mid = 0.5 * (lo + hi);
            if self.flow_derivative(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Congested equilibrium at `rho_star` with its characteristic speeds.
    pub fn equilibrium(&self, rho_star: f64) -> Result<Equilibrium> {
        self.check(rho_star, false)?;
        let rho_c = self.critical_density()?;
        let v_star = self.speed(rho_star);
        let v_prime = self.speed_derivative(rho_star);
        let lambda2 = -rho_star * v_prime - v_star;
        if rho_star <= rho_c || lambda2 <= 0.0 {
            return Err(Error::Regime { rho_star, rho_c });
        }
        Ok(Equilibrium {
            rho_star,
            v_star,
            q_star: rho_star * v_star,
            lambda1: v_star,
            lambda2,
            v_prime,
        })
    }
}

impl FundamentalDiagram {
    /// Congested equilibrium whose congestion-wave speed is `lambda2`.
    /// Since `λ2 = −Q'(ρ⋆)` and `Q` is concave, `λ2` increases with `ρ⋆`
    /// on `(ρ_c, ρ_m)` and a bisection inverts it.
    pub fn equilibrium_for_lambda2(&self, lambda2: f64) -> Result<Equilibrium> {
        let rho_c = self.critical_density()?;
        let rho_m = self.rho_max();
        let (mut lo, mut hi) = (rho_c, rho_m * (1.0 - 1e-12));
        let top = -self.flow_derivative(hi);
        if !(lambda2 > 0.0 && lambda2 < top) {
            return Err(Error::invalid(format!(
                "lambda2 = {lambda2} m/s is not reachable in the congested regime (0, {top})"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if -self.flow_derivative(mid) < lambda2 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        self.equilibrium(0.5 * (lo + hi))
    }
}

/// Congested equilibrium `(ρ⋆, v⋆)` and the linearisation data the
/// backstepping design needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub rho_star: f64,
    pub v_star: f64,
    pub q_star: f64,
    /// Density-wave speed, `v⋆`.
    pub lambda1: f64,
    /// Congestion-wave speed, `−ρ⋆ V'(ρ⋆) − v⋆`.
    pub lambda2: f64,
    /// `V'(ρ⋆)`.
    pub v_prime: f64,
}

impl Equilibrium {
    /// Inlet reflection coefficient `r = λ2/λ1`.
    pub fn r(&self) -> f64 {
        (-self.rho_star * self.v_prime - self.v_star) / self.v_star
    }

    /// Outlet coefficient `κ = exp(−L/(τ v⋆))`.
    pub fn kappa(&self, length: f64, tau: f64) -> f64 {
        (-length / (tau * self.v_star)).exp()
    }

    /// In-domain coupling `c(x) = −exp(−x/(τ v⋆))/τ`.
    #[inline]
    pub fn coupling(&self, x: f64, tau: f64) -> f64 {
        -(-x / (tau * self.v_star)).exp() / tau
    }

    /// `ρ⋆ + v⋆/V'(ρ⋆)`, the speed weight in the Riemann-type variable.
    pub fn speed_weight(&self) -> f64 {
        self.rho_star + self.v_star / self.v_prime
    }

    /// Finite convergence time `L/λ1 + L/λ2` of the target system.
    pub fn finite_time(&self, length: f64) -> f64 {
        length / self.lambda1 + length / self.lambda2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::*;

    #[test]
    fn lambda2_inversion_round_trips() {
        let fd: FundamentalDiagram = GreenshieldsFD::new(kmh_to_ms(144.0), per_km_to_per_m(160.0), 1.0).unwrap().into();
        for rho in [90.0, 100.0, 120.0, 130.0] {
            let eq = fd.equilibrium(per_km_to_per_m(rho)).unwrap();
            let back = fd.equilibrium_for_lambda2(eq.lambda2).unwrap();
            assert!((back.rho_star - eq.rho_star).abs() < 1e-10 * eq.rho_star);
        }
        assert!(fd.equilibrium_for_lambda2(-1.0).is_err());
    }

    fn reference_fd() -> FundamentalDiagram {
        GreenshieldsFD::new(kmh_to_ms(144.0), per_km_to_per_m(160.0), 1.0).unwrap().into()
    }

    #[test]
    fn greenshields_speed_values() {
        let fd = reference_fd();
        let v = fd.velocity(per_km_to_per_m(120.0)).unwrap();
        assert!((ms_to_kmh(v) - 36.0).abs() < 1e-12);
        assert!((fd.velocity(0.0).unwrap() - kmh_to_ms(144.0)).abs() < 1e-12);
        assert_eq!(fd.velocity(fd.rho_max()).unwrap(), 0.0);
        assert!(matches!(fd.velocity(0.2), Err(Error::Domain { .. })));
        assert!(fd.velocity(-1e-6).is_err());
    }

    #[test]
    fn greenshields_derivative() {
        let fd = reference_fd();
        // −v_f/ρ_m = −0.9 (km/h)/(veh/km)
        let d = fd.velocity_derivative(per_km_to_per_m(50.0)).unwrap();
        assert!((ms_to_kmh(d) * VEH_PER_KM + 0.9).abs() < 1e-12);

        let g2: FundamentalDiagram = GreenshieldsFD::new(40.0, 0.16, 2.0).unwrap().into();
        let d2 = g2.velocity_derivative(0.08).unwrap();
        assert!((d2 + 40.0 / 0.16).abs() < 1e-10);
        assert!(g2.velocity_derivative(0.0).is_err());
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let fds: Vec<FundamentalDiagram> = vec![
            GreenshieldsFD::new(40.0, 0.16, 2.3).unwrap().into(),
            ThreeParamFD::new(per_h_to_per_s(1339.38), 16.53, 0.28, 0.8).unwrap().into(),
        ];
        for fd in fds {
            for k in 1..20 {
                let rho = fd.rho_max() * k as f64 / 20.0;
                let h = 1e-5 * fd.rho_max();
                let fdiff = (fd.speed(rho + h) - fd.speed(rho - h)) / (2.0 * h);
                let exact = fd.velocity_derivative(rho).unwrap();
                assert!((fdiff - exact).abs() <= 1e-8 * exact.abs().max(1e-3), "{fd:?} rho={rho}: {fdiff} vs {exact}");
            }
        }
    }

    #[test]
    fn critical_density_closed_forms() {
        let fd = reference_fd();
        assert!((fd.critical_density().unwrap() - 0.08).abs() < 1e-10);
        let g2: FundamentalDiagram = GreenshieldsFD::new(40.0, 0.16, 2.0).unwrap().into();
        assert!((g2.critical_density().unwrap() - 0.16 / 3f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn critical_density_three_param_matches_grid_argmax() {
        let fd: FundamentalDiagram = ThreeParamFD::new(per_h_to_per_s(1339.38), 16.53, 0.28, 0.8).unwrap().into();
        let n = 100_000;
        let (mut best, mut arg) = (f64::MIN, 0.0);
        for i in 0..=n {
            let rho = 0.8 * i as f64 / n as f64;
            let q = fd.flow(rho);
            if q > best {
                best = q;
                arg = rho;
            }
        }
        let rho_c = fd.critical_density().unwrap();
        assert!((rho_c - arg).abs() <= 0.8 / n as f64, "{rho_c} vs {arg}");
    }

    #[test]
    fn greenshields_flow_is_strictly_concave() {
        for gamma in [0.5, 1.0, 2.0, 3.5] {
            let fd: FundamentalDiagram = GreenshieldsFD::new(40.0, 0.16, gamma).unwrap().into();
            assert!(fd.is_strictly_concave(1000), "gamma = {gamma}");
            for k in 1..100 {
                let rho = 0.16 * k as f64 / 100.0;
                assert!((fd.flow(rho) - rho * fd.velocity(rho).unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn equilibrium_reference_values() {
        let fd = reference_fd();
        let eq = fd.equilibrium(per_km_to_per_m(120.0)).unwrap();
        assert!((ms_to_kmh(eq.v_star) - 36.0).abs() < 1e-10);
        assert!((ms_to_kmh(eq.lambda1) - 36.0).abs() < 1e-10);
        assert!((ms_to_kmh(eq.lambda2) - 72.0).abs() < 1e-10);
        assert_eq!(eq.v_star, fd.velocity(eq.rho_star).unwrap());
        assert!((eq.q_star - eq.rho_star * eq.v_star).abs() < 1e-15);
        assert!((eq.r() - 2.0).abs() < 1e-12);
        assert!((eq.kappa(500.0, 60.0) - (-5.0f64 / 6.0).exp()).abs() < 1e-15);
        assert!((eq.finite_time(500.0) - 75.0).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_rejects_free_flow() {
        let fd = reference_fd();
        assert!(matches!(fd.equilibrium(0.08), Err(Error::Regime { .. })));
        assert!(matches!(fd.equilibrium(0.05), Err(Error::Regime { .. })));
    }

    #[test]
    fn lambda2_sweep_endpoints() {
        let fd = reference_fd();
        let lo = fd.equilibrium(per_km_to_per_m(90.0)).unwrap().lambda2;
        let hi = fd.equilibrium(per_km_to_per_m(130.0)).unwrap().lambda2;
        assert!((ms_to_kmh(lo) - 18.0).abs() < 1e-9);
        assert!((ms_to_kmh(hi) - 90.0).abs() < 1e-9);
    }

    #[test]
    fn three_param_zero_flow_at_zero_and_jam() {
        let fd = ThreeParamFD::new(per_h_to_per_s(1339.38), 16.53, 0.28, 0.8).unwrap();
        assert_eq!(fd.flow(0.0), 0.0);
        assert!(fd.q_offset().abs() < 1e-12);
        assert!(fd.flow(0.8).abs() < 1e-12);
        let fd: FundamentalDiagram = fd.into();
        assert!(fd.is_strictly_concave(2000));
        // continuity of the ρ → 0 speed limit
        let v0 = fd.velocity(0.0).unwrap();
        let v1 = fd.velocity(1e-6).unwrap();
        assert!((v0 - v1).abs() < 1e-4 * v0);
    }

    #[test]
    fn calibrated_three_param_equilibrium_speed() {
        let fd: FundamentalDiagram = ThreeParamFD::new(per_h_to_per_s(1339.38), 16.53, 0.28, per_km_to_per_m(800.0))
            .unwrap()
            .into();
        let eq = fd.equilibrium(per_km_to_per_m(320.0)).unwrap();
        let v = ms_to_kmh(eq.v_star);
        assert!((v - 22.3).abs() / 22.3 < 0.02, "v* = {v}");
        // λ2 = −Q'(ρ⋆) for any diagram
        assert!((eq.lambda2 + fd.flow_derivative(eq.rho_star)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(GreenshieldsFD::new(-1.0, 0.1, 1.0).is_err());
        assert!(GreenshieldsFD::new(1.0, 0.0, 1.0).is_err());
        assert!(ThreeParamFD::new(1.0, 10.0, 1.2, 0.8).is_err());
        assert!(ThreeParamFD::new(1.0, 0.0, 0.3, 0.8).is_err());
    }
}
