//! Run configuration: a TOML file whose values command-line flags
//! override. The effective configuration is echoed into every output
//! directory so a run can be repeated from that file alone.
//!
//! Units follow the file conventions: veh/km, km/h, veh/h, seconds.

use std::path::{Path, PathBuf};

use arz_core::fd::{FundamentalDiagram, GreenshieldsFD, ThreeParamFD};
use arz_core::presets::{Preset, Scenario};
use arz_core::train::{Method, TrainConfig};
use arz_core::units::*;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub controller: String,
    /// Model file for a learned controller.
    pub model: Option<PathBuf>,
    /// Directory holding `<method>.bin` files, for `compare`.
    pub model_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    /// Finite-volume cells of the simulated road.
    pub cells: usize,
    pub svg: bool,
    pub scenario: ScenarioOverrides,
    /// Replaces the preset's fundamental diagram; the calibrate command
    /// emits this section.
    pub fd: Option<FdSection>,
    pub pi: PiSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub calibrate: CalibrateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Reference.name().to_string(),
            controller: "backstepping".to_string(),
            model: None,
            model_dir: None,
            out: PathBuf::from("out"),
            seed: 0,
            jobs: 1,
            cells: 500,
            svg: false,
            scenario: ScenarioOverrides::default(),
            fd: None,
            pi: PiSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            calibrate: CalibrateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioOverrides {
    pub rho_star_veh_per_km: Option<f64>,
    pub tau_s: Option<f64>,
    pub horizon_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FdSection {
    Greenshields { v_free_kmh: f64, rho_max_veh_per_km: f64, gamma: f64 },
    ThreeParam { zeta_veh_per_h: f64, kappa: f64, p: f64, rho_max_veh_per_km: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiSection {
    pub kp: f64,
    /// [1/s]
    pub ki: f64,
    /// Actuation bound [km/h]; unbounded if absent.
    pub u_max_kmh: Option<f64>,
}

impl Default for PiSection {
    fn default() -> Self {
        Self { kp: arz_core::control::PiController::DEFAULT_KP, ki: arz_core::control::PiController::DEFAULT_KI, u_max_kmh: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `kernels` or `control`.
    pub kind: String,
    pub samples: usize,
    /// Nodes per edge of the kernel grid.
    pub grid_n: usize,
    /// Density interval; the preset's training interval if absent.
    pub rho_lo_veh_per_km: Option<f64>,
    pub rho_hi_veh_per_km: Option<f64>,
    /// Output samples per control trajectory.
    pub nt: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { kind: "kernels".to_string(), samples: 200, grid_n: 51, rho_lo_veh_per_km: None, rho_hi_veh_per_km: None, nt: 301 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub method: String,
    /// Dataset directory written by `gen-data`.
    pub data: Option<PathBuf>,
    /// Start from the desk-scale settings rather than the slower
    /// reference defaults.
    pub desk: bool,
    /// PINO: train on every other labelled sample.
    pub half_data: bool,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub points_per_batch: Option<usize>,
    pub physics_rows: Option<usize>,
    pub w_physics: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            method: Method::NoKernel.name().to_string(),
            data: None,
            desk: true,
            half_data: false,
            epochs: None,
            lr: None,
            points_per_batch: None,
            physics_rows: None,
            w_physics: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    /// Aggregated `x_index,t_index,density,flow` grid.
    pub input: Option<PathBuf>,
    pub rho_max_veh_per_km: Option<f64>,
    /// Write a synthetic grid of this many cells (from the calibrated
    /// preset's diagram, 1% noise) to `input` or the output directory
    /// first.
    pub synthetic: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }

    pub fn preset(&self) -> Result<Preset, CliError> {
        self.preset.parse().map_err(|e: arz_core::Error| CliError::Usage(e.to_string()))
    }

    pub fn method(&self) -> Result<Method, CliError> {
        self.train.method.parse().map_err(|e: arz_core::Error| CliError::Usage(e.to_string()))
    }

    /// The preset with the file's overrides applied.
    pub fn scenario(&self) -> Result<Scenario, CliError> {
        let mut s = self.preset()?.scenario();
        if let Some(fd) = &self.fd {
            s.fd = fd.build()?;
        }
        if let Some(t) = self.scenario.tau_s {
            s.tau = t;
        }
        if let Some(h) = self.scenario.horizon_s {
            s.horizon = h;
        }
        let rho_star = self.scenario.rho_star_veh_per_km.map_or(s.eq.rho_star, per_km_to_per_m);
        s.eq = s.fd.equilibrium(rho_star)?;
        Ok(s)
    }

    /// Density interval [veh/m] for dataset generation.
    pub fn density_interval(&self) -> Result<(f64, f64), CliError> {
        let (lo, hi) = self.preset()?.training_densities();
        let lo = self.data.rho_lo_veh_per_km.unwrap_or(lo);
        let hi = self.data.rho_hi_veh_per_km.unwrap_or(hi);
        if !(lo < hi) {
            return Err(CliError::Usage(format!("density interval [{lo}, {hi}] veh/km is empty")));
        }
        Ok((per_km_to_per_m(lo), per_km_to_per_m(hi)))
    }

    pub fn train_config(&self, method: Method) -> TrainConfig {
        let t = &self.train;
        let mut c = if t.desk { TrainConfig::desk(method) } else { TrainConfig::default() };
        c.seed = self.seed;
        if let Some(e) = t.epochs {
            // keep the same number of decay steps when shortening a run
            c.decay_every = (c.decay_every * e / c.epochs.max(1)).max(1);
            c.epochs = e;
        }
        if let Some(v) = t.lr {
            c.lr = v;
        }
        if t.points_per_batch.is_some() {
            c.points_per_batch = t.points_per_batch;
        }
        if let Some(v) = t.physics_rows {
            c.physics_rows = v;
        }
        if let Some(v) = t.w_physics {
            c.w_physics = v;
        }
        c
    }
}

impl FdSection {
    pub fn build(&self) -> Result<FundamentalDiagram, CliError> {
        Ok(match *self {
            FdSection::Greenshields { v_free_kmh, rho_max_veh_per_km, gamma } => {
                GreenshieldsFD::new(kmh_to_ms(v_free_kmh), per_km_to_per_m(rho_max_veh_per_km), gamma)?.into()
            }
            FdSection::ThreeParam { zeta_veh_per_h, kappa, p, rho_max_veh_per_km } => {
                ThreeParamFD::new(per_h_to_per_s(zeta_veh_per_h), kappa, p, per_km_to_per_m(rho_max_veh_per_km))?.into()
            }
        })
    }
}
