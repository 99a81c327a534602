//! Named scenarios. A preset fixes the fundamental diagram, equilibrium,
//! relaxation time, road, horizon and initial condition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::{Equilibrium, FundamentalDiagram, GreenshieldsFD, ThreeParamFD};
use crate::kernel::CouplingArgument;
use crate::operator::Family;
use crate::sim::{Grid1D, InitialCondition, SimConfig};
use crate::units::{kmh_to_ms, per_h_to_per_s, per_km_to_per_m};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The reference road: 144 km/h free speed, ρ⋆ = 120 veh/km,
    /// 3π sinusoid.
    Reference,
    /// Greenshields with 54 km/h and 160 veh/km; ρ⋆ = 100/110/120 veh/km.
    DemandHigh,
    DemandMedium,
    DemandLow,
    /// Reference road, single-hump 5% sinusoid in (q, v).
    NonrecurrentSin,
    /// Reference road, flow rising and speed falling linearly by ±5%
    /// around equilibrium.
    NonrecurrentLinear,
    /// Calibrated three-parameter diagram, ρ⋆ = 320 veh/km.
    NgsimCalibrated,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Reference,
        Preset::DemandHigh,
        Preset::DemandMedium,
        Preset::DemandLow,
        Preset::NonrecurrentSin,
        Preset::NonrecurrentLinear,
        Preset::NgsimCalibrated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Reference => "reference",
            Preset::DemandHigh => "demand_high",
            Preset::DemandMedium => "demand_medium",
            Preset::DemandLow => "demand_low",
            Preset::NonrecurrentSin => "nonrecurrent_sin",
            Preset::NonrecurrentLinear => "nonrecurrent_linear",
            Preset::NgsimCalibrated => "ngsim_calibrated",
        }
    }

    pub fn scenario(self) -> Scenario {
        let reference: FundamentalDiagram = GreenshieldsFD::new(kmh_to_ms(144.0), per_km_to_per_m(160.0), 1.0).unwrap().into();
        let demand: FundamentalDiagram = GreenshieldsFD::new(kmh_to_ms(54.0), per_km_to_per_m(160.0), 1.0).unwrap().into();
        let ngsim: FundamentalDiagram = ThreeParamFD::new(per_h_to_per_s(1339.38), 16.53, 0.28, per_km_to_per_m(800.0)).unwrap().into();
        let (fd, rho_star, ic) = match self {
            Preset::Reference => (reference, 120.0, InitialCondition::stop_and_go()),
            Preset::DemandHigh => (demand, 100.0, InitialCondition::stop_and_go()),
            Preset::DemandMedium => (demand, 110.0, InitialCondition::stop_and_go()),
            Preset::DemandLow => (demand, 120.0, InitialCondition::stop_and_go()),
            Preset::NonrecurrentSin => (reference, 120.0, InitialCondition::SinusoidalPi { amplitude: 0.05 }),
            Preset::NonrecurrentLinear => {
                let eq = reference.equilibrium(per_km_to_per_m(120.0)).unwrap();
                let l = 500.0;
                let ic = InitialCondition::Linear {
                    q0: 0.95 * eq.q_star,
                    q_slope: 0.1 * eq.q_star / l,
                    v0: 1.05 * eq.v_star,
                    v_slope: -0.1 * eq.v_star / l,
                };
                (reference, 120.0, ic)
            }
            Preset::NgsimCalibrated => (ngsim, 320.0, InitialCondition::stop_and_go()),
        };
        let eq = fd.equilibrium(per_km_to_per_m(rho_star)).expect("preset equilibria are congested");
        Scenario { preset: self, fd, eq, tau: 60.0, length: 500.0, horizon: 300.0, ic }
    }

    /// Density interval [veh/km] used to train operators for this preset's
    /// diagram, bracketing every preset equilibrium on it.
    pub fn training_densities(self) -> (f64, f64) {
        match self {
            Preset::DemandHigh | Preset::DemandMedium | Preset::DemandLow => (95.0, 125.0),
            Preset::NgsimCalibrated => (290.0, 350.0),
            _ => (90.0, 130.0),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::invalid(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Everything needed to run one closed-loop experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub preset: Preset,
    pub fd: FundamentalDiagram,
    pub eq: Equilibrium,
    pub tau: f64,
    pub length: f64,
    pub horizon: f64,
    pub ic: InitialCondition,
}

impl Scenario {
    pub fn sim_config(&self, n_cells: usize) -> Result<SimConfig> {
        let cfg = SimConfig::new(Grid1D::new(self.length, n_cells)?, self.horizon, self.tau, self.fd, self.eq);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The operator family sharing this scenario's diagram and road.
    pub fn family(&self) -> Family {
        Family { fd: self.fd, tau: self.tau, length: self.length, coupling: CouplingArgument::Xi }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::*;

    #[test]
    fn demand_levels_match_the_published_equilibria() {
        for (p, q, rho, v) in [
            (Preset::DemandHigh, 2025.0, 100.0, 20.25),
            (Preset::DemandMedium, 1856.0, 110.0, 16.87),
            (Preset::DemandLow, 1620.0, 120.0, 13.5),
        ] {
            let s = p.scenario();
            assert!((per_m_to_per_km(s.eq.rho_star) - rho).abs() < 1e-9);
            assert!((ms_to_kmh(s.eq.v_star) - v).abs() < 0.01, "{p}: {}", ms_to_kmh(s.eq.v_star));
            assert!((per_s_to_per_h(s.eq.q_star) - q).abs() < 1.0, "{p}: {}", per_s_to_per_h(s.eq.q_star));
        }
    }

    #[test]
    fn calibrated_preset_speed() {
        let s = Preset::NgsimCalibrated.scenario();
        assert!((ms_to_kmh(s.eq.v_star) - 22.3).abs() < 0.02 * 22.3);
    }

    #[test]
    fn every_preset_builds_a_valid_initial_state() {
        for p in Preset::ALL {
            let s = p.scenario();
            let cfg = s.sim_config(200).unwrap();
            crate::sim::make_initial(&s.ic, &s.eq, &cfg.grid, &s.fd).unwrap();
            let (lo, hi) = p.training_densities();
            assert!(per_km_to_per_m(lo) < s.eq.rho_star && s.eq.rho_star < per_km_to_per_m(hi));
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn linear_profile_raises_density_downstream() {
        let s = Preset::NonrecurrentLinear.scenario();
        let cfg = s.sim_config(100).unwrap();
        let st = crate::sim::make_initial(&s.ic, &s.eq, &cfg.grid, &s.fd).unwrap();
        assert!(st.rho[99] > st.rho[0] && st.v[99] < st.v[0]);
    }
}
