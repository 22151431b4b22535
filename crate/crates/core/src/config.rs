//! Run configuration, read from a TOML file.
//!
//! ```toml
//! [plant]
//! v_x = 15.0
//!
//! [trigger]
//! alpha = 0.5
//!
//! [scenario]
//! road = "quarter_turn"
//! duration = 15.0
//! ```
//!
//! Every section and field is optional; omitted values take the reference
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adp::AdpConfig;
use crate::driver::DriverParams;
use crate::error::{Error, Result};
use crate::plant::{PlantParams, RoadProfile, RoadSegment, VehicleState};
use crate::shared::SharedParams;
use crate::trigger::ConstantOverrides;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub plant: PlantParams,
    pub driver: DriverParams,
    pub shared: SharedParams,
    pub trigger: TriggerConfig,
    pub adp: AdpConfig,
    pub scenario: ScenarioConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub alpha: f64,
    /// Minimum dwell, s. Defaults to one base step.
    pub tau_min: Option<f64>,
    #[serde(flatten)]
    pub constants: ConstantOverrides,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            alpha: 0.5,
            tau_min: None,
            constants: ConstantOverrides::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadKind {
    QuarterTurn,
    Loop,
    Straight,
    /// Use `segments`.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub road: RoadKind,
    pub segments: Vec<RoadSegment>,
    /// Run length, s.
    pub duration: f64,
    /// Base step, s.
    pub h: f64,
    /// Initial `[v_y, r_a, ψ_L, y_L]`.
    pub x0: [f64; 4],
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "quarter_turn".into(),
            road: RoadKind::QuarterTurn,
            segments: Vec::new(),
            duration: 15.0,
            h: 0.005,
            x0: [0.0; 4],
        }
    }
}

impl ScenarioConfig {
    pub fn road_profile(&self) -> Result<RoadProfile> {
        let road = match self.road {
            RoadKind::QuarterTurn => RoadProfile::quarter_turn(),
            RoadKind::Loop => RoadProfile::loop_course(),
            RoadKind::Straight => RoadProfile::straight(1e6),
            RoadKind::Custom => RoadProfile::new(self.segments.clone())?,
        };
        Ok(road)
    }

    pub fn initial_state(&self) -> VehicleState {
        let [v_y, r_a, psi_l, y_l] = self.x0;
        VehicleState {
            v_y,
            r_a,
            psi_l,
            y_l,
            t: 0.0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Config::from_toml(&text).map_err(|e| Error::parse(path, e.message()))?;
        cfg.validate().map_err(|e| Error::parse(path, e))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.driver.validate()?;
        let s = &self.scenario;
        if !(s.duration > 0.0 && s.duration.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "scenario duration must be positive, got {}",
                s.duration
            )));
        }
        if !(s.h > 0.0 && s.h.is_finite()) {
            return Err(Error::InvalidParams(format!("base step must be positive, got {}", s.h)));
        }
        if !(self.shared.kappa > 0.0 && self.shared.window > 0.0) {
            return Err(Error::InvalidParams("kappa and window must be positive".into()));
        }
        if let Some(tau) = self.trigger.tau_min {
            if tau < s.h {
                return Err(Error::InvalidParams(format!(
                    "tau_min {tau} is below the base step {}",
                    s.h
                )));
            }
        }
        s.road_profile()?;
        Ok(())
    }

    /// Reference Case II setup: the loop course for 90 s.
    pub fn loop_case() -> Self {
        Config {
            scenario: ScenarioConfig {
                name: "loop".into(),
                road: RoadKind::Loop,
                duration: 90.0,
                ..ScenarioConfig::default()
            },
            ..Config::default()
        }
    }
}
