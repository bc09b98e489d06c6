//! Scenario configuration, loadable from TOML.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use visiopath_core::RoadGeometry;

use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleType {
    pub length: f64,
    pub width: f64,
    /// Desired speeds are drawn uniformly from this range (m/s).
    pub speed_min: f64,
    pub speed_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadConfig {
    pub lane_width: f64,
    pub lane_count: usize,
    pub segment_length: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        let r = RoadGeometry::default();
        Self {
            lane_width: r.lane_width,
            lane_count: r.lane_count,
            segment_length: r.segment_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoConfig {
    pub length: f64,
    pub width: f64,
    pub nominal_speed: f64,
    /// Entry speed, reduced if the lane ahead is slower.
    pub initial_speed: f64,
    /// Preferred entry lane; the emptiest lane when absent.
    pub lane: Option<usize>,
    /// Distance each ego travels before a new one is inserted (m).
    pub segment: f64,
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self {
            length: 4.5,
            width: 1.8,
            nominal_speed: 25.0,
            initial_speed: 25.0,
            lane: None,
            segment: 2000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    /// Time gap kept behind a leader (s).
    pub time_gap: f64,
    pub acceleration: f64,
    /// Deceleration used in the safe-speed rule (m/s²).
    pub deceleration: f64,
    /// Minimum bumper gap enforced between vehicles (m).
    pub min_gap: f64,
    /// Minimum bumper gap to the nearest vehicle for a new arrival (m).
    pub spawn_gap: f64,
    /// Discretionary lane changes per second for a vehicle held up by its leader.
    pub lane_change_rate: f64,
    pub lane_change_duration: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            time_gap: 1.2,
            acceleration: 2.0,
            deceleration: 7.5,
            min_gap: 1.0,
            spawn_gap: 20.0,
            lane_change_rate: 0.0,
            lane_change_duration: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// `x` is measured from the road entry and `lane` is absolute.
    Road,
    /// `x` is the bumper gap ahead of the ego and `lane` is an offset from the ego lane.
    Ego,
}

/// A vehicle inserted at a fixed time, optionally cutting into another lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedVehicle {
    /// Insertion time relative to the start of the first ego episode (s).
    pub time: f64,
    pub anchor: Anchor,
    pub x: f64,
    pub lane: i64,
    pub speed: f64,
    pub vehicle_type: String,
    /// Lane offset of a cut-in started right after insertion.
    #[serde(default)]
    pub cut_in: i64,
    #[serde(default = "default_cut_in_duration")]
    pub cut_in_duration: f64,
    /// Hold `speed` regardless of traffic instead of following.
    #[serde(default)]
    pub constant_speed: bool,
}

fn default_cut_in_duration() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum PerceptionConfig {
    GroundTruth,
    Noisy { sigma_pos: f64, sigma_dim: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Total simulated time including warm-up (s).
    pub duration: f64,
    /// Traffic-only period before the first ego enters (s).
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_sensing_range")]
    pub sensing_range: f64,
    #[serde(default)]
    pub road: RoadConfig,
    /// Vehicle type name -> flow (veh/h).
    #[serde(default)]
    pub demand: BTreeMap<String, f64>,
    #[serde(default = "default_catalog")]
    pub vehicle_types: BTreeMap<String, VehicleType>,
    #[serde(default)]
    pub ego: EgoConfig,
    #[serde(default)]
    pub traffic: TrafficConfig,
    #[serde(default)]
    pub scripted: Vec<ScriptedVehicle>,
    #[serde(default = "default_perception")]
    pub perception: PerceptionConfig,
    /// Stop after this many ego episodes.
    #[serde(default)]
    pub max_episodes: Option<usize>,
}

fn default_warmup() -> f64 {
    50.0
}
fn default_dt() -> f64 {
    0.1
}
fn default_sensing_range() -> f64 {
    150.0
}
fn default_perception() -> PerceptionConfig {
    PerceptionConfig::GroundTruth
}

/// Artifact defaults for the five vehicle classes of the demand tables.
pub fn default_catalog() -> BTreeMap<String, VehicleType> {
    let t = |length, width, speed_min, speed_max| VehicleType {
        length,
        width,
        speed_min,
        speed_max,
    };
    BTreeMap::from([
        ("small_car".to_string(), t(3.8, 1.7, 24.0, 30.0)),
        ("medium_car".to_string(), t(4.5, 1.8, 24.0, 30.0)),
        ("large_car".to_string(), t(5.2, 2.0, 22.0, 28.0)),
        ("small_truck".to_string(), t(7.0, 2.3, 20.0, 25.0)),
        ("large_truck".to_string(), t(12.0, 2.5, 18.0, 23.0)),
    ])
}

/// Medium-density demand (veh/h per class, 3600 total).
pub fn medium_demand() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("medium_car".to_string(), 2400.0),
        ("small_car".to_string(), 600.0),
        ("large_car".to_string(), 400.0),
        ("small_truck".to_string(), 150.0),
        ("large_truck".to_string(), 50.0),
    ])
}

/// High-density demand (veh/h per class, 4530 total).
pub fn high_demand() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("medium_car".to_string(), 2800.0),
        ("small_car".to_string(), 800.0),
        ("large_car".to_string(), 600.0),
        ("small_truck".to_string(), 250.0),
        ("large_truck".to_string(), 80.0),
    ])
}

impl ScenarioConfig {
    fn base(name: &str, duration: f64) -> Self {
        Self {
            name: name.to_string(),
            duration,
            warmup: default_warmup(),
            seed: 0,
            dt: default_dt(),
            sensing_range: default_sensing_range(),
            road: RoadConfig::default(),
            demand: BTreeMap::new(),
            vehicle_types: default_catalog(),
            ego: EgoConfig::default(),
            traffic: TrafficConfig::default(),
            scripted: Vec::new(),
            perception: PerceptionConfig::GroundTruth,
            max_episodes: None,
        }
    }

    /// Four-lane freeway at medium demand with discretionary lane changes.
    pub fn medium_density() -> Self {
        let mut s = Self::base("medium", 220.0);
        s.demand = medium_demand();
        s.traffic.lane_change_rate = 0.05;
        s
    }

    /// Four-lane freeway at high demand with discretionary lane changes.
    pub fn high_density() -> Self {
        let mut s = Self::base("high", 220.0);
        s.demand = high_demand();
        s.traffic.lane_change_rate = 0.05;
        s
    }

    /// Single lane with a slow truck ahead of the ego.
    pub fn slow_leader() -> Self {
        let mut s = Self::base("slow_leader", 200.0);
        s.warmup = 0.0;
        s.road.lane_count = 1;
        s.max_episodes = Some(1);
        s.scripted.push(ScriptedVehicle {
            time: 0.0,
            anchor: Anchor::Ego,
            x: 60.0,
            lane: 0,
            speed: 15.0,
            vehicle_type: "small_truck".into(),
            cut_in: 0,
            cut_in_duration: 1.0,
            constant_speed: true,
        });
        s
    }

    /// Empty road where a slower car cuts in close ahead of the ego shortly
    /// after a routine replan.
    pub fn cut_in() -> Self {
        let mut s = Self::base("cut_in", 180.0);
        s.warmup = 0.0;
        s.max_episodes = Some(1);
        s.ego.lane = Some(1);
        s.scripted.push(ScriptedVehicle {
            time: 3.2,
            anchor: Anchor::Ego,
            x: 15.0,
            lane: 1,
            speed: 15.0,
            vehicle_type: "medium_car".into(),
            cut_in: -1,
            cut_in_duration: 1.0,
            constant_speed: true,
        });
        s
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let config: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            SimError::Config(msg) => SimError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, SimError> {
        toml::to_string(self).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn road_geometry(&self) -> Result<RoadGeometry, SimError> {
        RoadGeometry::new(self.road.lane_width, self.road.lane_count, self.road.segment_length).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        self.road_geometry()?;
        if !(self.duration > self.warmup && self.warmup >= 0.0) {
            return bad(format!("duration {} must exceed warmup {} >= 0", self.duration, self.warmup));
        }
        if !(self.dt > 0.0 && self.sensing_range > 0.0) {
            return bad("dt and sensing_range must be positive".into());
        }
        for (name, flow) in &self.demand {
            if !(*flow >= 0.0 && flow.is_finite()) {
                return bad(format!("flow for {name} must be >= 0"));
            }
            if !self.vehicle_types.contains_key(name) {
                return bad(format!("demand refers to unknown vehicle type {name}"));
            }
        }
        for (name, t) in &self.vehicle_types {
            if !(t.length > 0.0 && t.width > 0.0 && t.speed_min >= 0.0 && t.speed_min <= t.speed_max) {
                return bad(format!("invalid vehicle type {name}"));
            }
            if t.width > self.road.lane_width {
                return bad(format!("vehicle type {name} is wider than a lane"));
            }
        }
        for s in &self.scripted {
            if !self.vehicle_types.contains_key(&s.vehicle_type) {
                return bad(format!("scripted vehicle uses unknown type {}", s.vehicle_type));
            }
            if !(s.time >= 0.0 && s.speed >= 0.0 && s.cut_in_duration > 0.0) {
                return bad("scripted vehicle needs time >= 0, speed >= 0 and a positive cut-in duration".into());
            }
        }
        let e = &self.ego;
        if !(e.length > 0.0 && e.width > 0.0 && e.nominal_speed > 0.0 && e.initial_speed >= 0.0 && e.segment > 0.0) {
            return bad("invalid ego configuration".into());
        }
        if e.segment >= self.road.segment_length {
            return bad("ego segment must be shorter than the road".into());
        }
        if e.lane.is_some_and(|l| l >= self.road.lane_count) {
            return bad("ego lane out of range".into());
        }
        let t = &self.traffic;
        if !(t.time_gap > 0.0 && t.acceleration > 0.0 && t.deceleration > 0.0 && t.min_gap >= 0.0 && t.spawn_gap >= 0.0) {
            return bad("invalid traffic parameters".into());
        }
        if !(t.lane_change_rate >= 0.0 && t.lane_change_duration > 0.0) {
            return bad("invalid lane-change parameters".into());
        }
        if let PerceptionConfig::Noisy { sigma_pos, sigma_dim } = self.perception {
            if !(sigma_pos >= 0.0 && sigma_dim >= 0.0) {
                return bad("noise sigmas must be >= 0".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demand_totals() {
        assert_eq!(medium_demand().values().sum::<f64>(), 3600.0);
        assert_eq!(high_demand().values().sum::<f64>(), 4530.0);
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for s in [
            ScenarioConfig::medium_density(),
            ScenarioConfig::high_density(),
            ScenarioConfig::slow_leader(),
            ScenarioConfig::cut_in(),
        ] {
            s.validate().unwrap();
            let text = s.to_toml().unwrap();
            assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), s);
        }
    }

    #[test]
    fn minimal_file() {
        let s = ScenarioConfig::from_toml("name = \"x\"\nduration = 100.0\n[demand]\nmedium_car = 1000.0\n").unwrap();
        assert_eq!(s.warmup, 50.0);
        assert_eq!(s.road.lane_count, 4);
        assert_eq!(s.vehicle_types.len(), 5);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ScenarioConfig::from_toml("name = \"x\"\nduration = \"long\"\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(ScenarioConfig::from_toml("name = \"x\"\nduration = 10.0\nwarmup = 20.0\n").is_err());
        assert!(ScenarioConfig::from_toml("name = \"x\"\nduration = 100.0\n[demand]\nbus = 10.0\n").is_err());
    }
}
