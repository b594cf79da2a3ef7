//! Scenario files (TOML).
//!
//! ```toml
//! name = "fig4"
//! seed = 1
//! arena = [12.0, 12.0]                 # width, height in meters; origin at a corner
//!
//! [noise]
//! sigma_v = 0.2                        # m/s
//! sigma_omega = 0.1                    # rad/s
//! sigma_range = 0.1                    # m
//!
//! [durations]                          # seconds
//! static_init = 1.5
//! linear_motion = 4.0
//! run = 300.0
//!
//! [init]
//! mode = "motion"                      # or "known" (truth pose at the end of the linear phase)
//!
//! [[vehicles]]
//! id = 1
//! x = 1.0
//! y = 1.0
//! theta = 0.0
//! static = true
//!
//! [[vehicles]]
//! id = 3
//! x = 3.0
//! y = 4.0
//! theta = 0.5
//! trajectory = { kind = "random_waypoint", speed = 0.5 }
//! ```
//!
//! Optional tables `[network]` and `[estimator]` override the defaults of
//! [`NetworkSettings`] and [`EstimatorSettings`].

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::estimator::EstimatorConfig;
use crate::kinematics::{NoiseSpec, VehicleState};
use crate::{Error, Result, VehicleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub arena: [f64; 2],
    pub noise: NoiseSpec,
    #[serde(default)]
    pub durations: Durations,
    #[serde(default)]
    pub network: NetworkSettings,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub init: InitSettings,
    pub vehicles: Vec<VehicleSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Durations {
    pub static_init: f64,
    pub linear_motion: f64,
    pub run: f64,
}

impl Default for Durations {
    fn default() -> Self {
        Self {
            static_init: 1.5,
            linear_motion: 4.0,
            run: 300.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSettings {
    pub frame_rate: f64,
    /// Seconds; `None` splits the frame evenly.
    pub slot_duration: Option<f64>,
    pub drop_probability: f64,
    pub quantization: bool,
    /// Initial clock offsets are drawn uniformly within ±this (s).
    pub max_clock_offset: f64,
    /// Initial clock skews are drawn uniformly within ±this.
    pub max_clock_skew: f64,
    pub offset_density: f64,
    pub skew_density: f64,
    /// Reciprocal exchanges needed before a pair yields ranges.
    pub sync_min_updates: u32,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            frame_rate: 100.0,
            slot_duration: None,
            drop_probability: 0.0,
            quantization: true,
            max_clock_offset: 1e-6,
            max_clock_skew: 2e-5,
            offset_density: crate::uwb_net::DEFAULT_OFFSET_DENSITY,
            skew_density: crate::uwb_net::DEFAULT_SKEW_DENSITY,
            sync_min_updates: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    pub smoothing_window: usize,
    pub smoothing_decay: f64,
    pub gate_sigma: f64,
    pub hold_ticks: usize,
    pub hold_inflation: f64,
    /// Lower bounds on the noise levels the filter assumes.
    pub sigma_floor_range: f64,
    pub sigma_floor_v: f64,
    pub sigma_floor_omega: f64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        Self {
            smoothing_window: d.smoothing_window,
            smoothing_decay: d.smoothing_decay,
            gate_sigma: d.gate_sigma,
            hold_ticks: d.hold_ticks,
            hold_inflation: d.hold_inflation,
            sigma_floor_range: d.sigma_floor_range,
            sigma_floor_v: d.sigma_floor_v,
            sigma_floor_omega: d.sigma_floor_omega,
        }
    }
}

impl EstimatorSettings {
    pub fn to_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            smoothing_window: self.smoothing_window,
            smoothing_decay: self.smoothing_decay,
            gate_sigma: self.gate_sigma,
            hold_ticks: self.hold_ticks,
            hold_inflation: self.hold_inflation,
            sigma_floor_range: self.sigma_floor_range,
            sigma_floor_v: self.sigma_floor_v,
            sigma_floor_omega: self.sigma_floor_omega,
            ..EstimatorConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Frame and poses from ranging and the straight-drive heading fit.
    #[default]
    Motion,
    /// Poses from ground truth at the end of the linear phase.
    Known,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSettings {
    pub mode: InitMode,
    /// Samples averaged per pair for the adjacency matrix.
    pub samples_per_pair: usize,
    /// Speed of the straight drive, m/s.
    pub linear_speed: f64,
    /// Linear-motion detector window, in encoder samples.
    pub window: usize,
    /// Standard deviations of a known initial pose.
    pub known_sigma_position: f64,
    pub known_sigma_heading: f64,
}

impl Default for InitSettings {
    fn default() -> Self {
        Self {
            mode: InitMode::Motion,
            samples_per_pair: 50,
            linear_speed: 1.0,
            window: 20,
            known_sigma_position: 0.05,
            known_sigma_heading: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub id: VehicleId,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default, rename = "static")]
    pub is_static: bool,
    #[serde(default)]
    pub trajectory: Option<TrajectorySpec>,
}

impl VehicleSpec {
    pub fn pose(&self) -> VehicleState {
        VehicleState::new(self.x, self.y, self.theta)
    }
}

fn default_turn_rate() -> f64 {
    1.0
}

fn default_margin() -> f64 {
    1.0
}

/// Motion of a dynamic vehicle during the main run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Drives to uniformly drawn targets inside the arena, one after another.
    RandomWaypoint {
        speed: f64,
        #[serde(default = "default_turn_rate")]
        max_turn_rate: f64,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    /// Back-and-forth sweep over the arena with rows `spacing` apart.
    Lawnmower {
        speed: f64,
        spacing: f64,
        #[serde(default = "default_turn_rate")]
        max_turn_rate: f64,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    /// Visits the listed points in order, cycling when `cyclic`.
    Waypoints {
        speed: f64,
        points: Vec<[f64; 2]>,
        #[serde(default)]
        cyclic: bool,
        #[serde(default = "default_turn_rate")]
        max_turn_rate: f64,
    },
    /// Scripted `[duration, v, omega]` segments, repeated.
    Profile { segments: Vec<[f64; 3]> },
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn static_ids(&self) -> Vec<VehicleId> {
        self.vehicles.iter().filter(|v| v.is_static).map(|v| v.id).collect()
    }

    pub fn dynamic_ids(&self) -> Vec<VehicleId> {
        self.vehicles.iter().filter(|v| !v.is_static).map(|v| v.id).collect()
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleSpec> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    /// The two anchors, in file order, when there are exactly two static vehicles.
    pub fn anchors(&self) -> Option<(VehicleId, VehicleId)> {
        match self.static_ids()[..] {
            [a, b] => Some((a, b)),
            _ => None,
        }
    }

    /// Copy with every static vehicle removed.
    pub fn without_static(&self) -> Self {
        let mut s = self.clone();
        s.vehicles.retain(|v| !v.is_static);
        s
    }

    /// Copy keeping only the first `keep` static vehicles.
    pub fn with_static_limit(&self, keep: usize) -> Self {
        let mut s = self.clone();
        let mut kept = 0;
        s.vehicles.retain(|v| {
            if !v.is_static {
                return true;
            }
            kept += 1;
            kept <= keep
        });
        s
    }

    /// Geometry checks shared by every entry point; allows two-vehicle fleets.
    pub fn validate_geometry(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Scenario(msg));
        if self.vehicles.len() < 2 {
            return fail(format!("{} vehicles, need at least 2", self.vehicles.len()));
        }
        let [w, h] = self.arena;
        if !(w > 0.0 && h > 0.0) {
            return fail("arena dimensions must be positive".into());
        }
        let mut ids = BTreeSet::new();
        for v in &self.vehicles {
            if !ids.insert(v.id) {
                return fail(format!("duplicate vehicle id {}", v.id));
            }
            if !(v.x >= 0.0 && v.x <= w && v.y >= 0.0 && v.y <= h) || !v.theta.is_finite() {
                return fail(format!("vehicle {} starts outside the arena", v.id));
            }
        }
        for (k, a) in self.vehicles.iter().enumerate() {
            for b in &self.vehicles[k + 1..] {
                if ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt() <= 0.1 {
                    return fail(format!("vehicles {} and {} start within 0.1 m", a.id, b.id));
                }
            }
        }
        let statics = self.static_ids().len();
        if statics > 2 {
            return fail(format!("{statics} static vehicles, at most 2 allowed"));
        }
        Ok(())
    }

    /// Full validation for a simulation run.
    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        let fail = |msg: String| Err(Error::Scenario(msg));
        if self.vehicles.len() < 3 {
            return fail(format!("{} vehicles, need at least 3", self.vehicles.len()));
        }
        if self.dynamic_ids().is_empty() {
            return fail("no dynamic vehicle".into());
        }
        self.noise.validate().map_err(|e| Error::Scenario(e.to_string()))?;
        let d = &self.durations;
        if !(d.static_init > 0.0 && d.linear_motion > 0.0 && d.run > 0.0) {
            return fail("durations must be positive".into());
        }
        if self.init.mode == InitMode::Motion && self.anchors().is_none() {
            return fail("motion initialization needs exactly 2 static vehicles".into());
        }
        if self.init.samples_per_pair == 0 || self.init.window < 2 || !(self.init.linear_speed > 0.0) {
            return fail("invalid init settings".into());
        }
        let n = &self.network;
        if !(n.frame_rate > 0.0) || !(0.0..=1.0).contains(&n.drop_probability) {
            return fail("invalid network settings".into());
        }
        if n.max_clock_skew.abs() >= crate::uwb_net::MAX_SKEW {
            return fail("clock skew bound must stay below 100 ppm".into());
        }
        let e = &self.estimator;
        let floors = [e.sigma_floor_range, e.sigma_floor_v, e.sigma_floor_omega];
        if e.smoothing_window == 0
            || !(e.smoothing_decay > 0.0 && e.smoothing_decay <= 1.0)
            || !(e.gate_sigma > 0.0)
            || floors.iter().any(|f| !(*f > 0.0))
        {
            return fail("invalid estimator settings".into());
        }
        for v in &self.vehicles {
            if v.is_static {
                continue;
            }
            match &v.trajectory {
                None => return fail(format!("dynamic vehicle {} has no trajectory", v.id)),
                Some(TrajectorySpec::Profile { segments }) => {
                    if segments.is_empty() || segments.iter().any(|s| !(s[0] > 0.0)) {
                        return fail(format!("vehicle {}: profile segments need positive durations", v.id));
                    }
                }
                Some(TrajectorySpec::Waypoints { points, speed, .. }) => {
                    if points.is_empty() || !(*speed > 0.0) {
                        return fail(format!("vehicle {}: waypoints need points and a speed", v.id));
                    }
                }
                Some(TrajectorySpec::RandomWaypoint { speed, margin, .. })
                | Some(TrajectorySpec::Lawnmower { speed, margin, .. }) => {
                    if !(*speed > 0.0) || !(*margin >= 0.0) || 2.0 * margin >= w_min(self.arena) {
                        return fail(format!("vehicle {}: bad speed or margin", v.id));
                    }
                }
            }
            if let Some(TrajectorySpec::Lawnmower { spacing, .. }) = &v.trajectory {
                if !(*spacing > 0.0) {
                    return fail(format!("vehicle {}: lawnmower spacing must be positive", v.id));
                }
            }
        }
        Ok(())
    }
}

fn w_min(arena: [f64; 2]) -> f64 {
    arena[0].min(arena[1])
}
