//! Declarative scenario description and its loader.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::profile::SpeedProfile;
use crate::error::{Error, Result};
use crate::longitudinal::{BehaviorParams, FollowingLaw, IdmParams};
use crate::platooning::{MergeAlgorithm, DEFAULT_TIME_GAP};
use crate::v2x::ChannelModel;
use crate::world::{MapSpec, VehicleId, DEFAULT_DT, RAMP_LANE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default)]
    pub map: MapSpec,
    #[serde(default)]
    pub platoon: Option<PlatoonSpec>,
    #[serde(default)]
    pub cavs: Vec<SingleCavSpec>,
    #[serde(default)]
    pub human_vehicles: Vec<HumanVehicleSpec>,
    #[serde(default)]
    pub background: Option<BackgroundSpec>,
    #[serde(default)]
    pub events: Vec<EventTrigger>,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub profiles: BTreeMap<String, ProfileSource>,
    /// Alternative fuzzy rule base for the merge selector.
    #[serde(default)]
    pub fuzzy_rules: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub dt: f64,
    pub total_steps: u64,
    /// Seeds the background traffic jitter.
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            total_steps: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlatoonSpec {
    pub members: u32,
    /// Leader id; followers take consecutive ids.
    pub first_id: u32,
    pub lane: i32,
    pub leader_station: f64,
    pub speed: f64,
    pub desired_time_gap: f64,
    /// Time gap used for the initial spacing; defaults to `desired_time_gap`.
    pub initial_time_gap: Option<f64>,
    pub length: f64,
    pub max_speed: f64,
    /// Leader cruise target and comfort bounds shared by all members.
    pub behavior: BehaviorParams,
    /// Leader spacing law behind vehicles that are not platoon members.
    pub following: FollowingLaw,
    /// Rate at which effective time gaps move toward their targets, s/s.
    pub gap_rate: f64,
}

impl Default for PlatoonSpec {
    fn default() -> Self {
        Self {
            members: 5,
            first_id: 1,
            lane: 0,
            leader_station: 100.0,
            speed: 25.0,
            desired_time_gap: DEFAULT_TIME_GAP,
            initial_time_gap: None,
            length: 5.0,
            max_speed: 40.0,
            behavior: BehaviorParams::default(),
            following: FollowingLaw::default(),
            gap_rate: 0.3,
        }
    }
}

impl PlatoonSpec {
    pub fn member_ids(&self) -> Vec<VehicleId> {
        (0..self.members)
            .map(|i| VehicleId(self.first_id + i))
            .collect()
    }

    /// Initial front-bumper stations, leader first.
    pub fn member_stations(&self) -> Vec<f64> {
        let gap = self.initial_time_gap.unwrap_or(self.desired_time_gap);
        let pitch = self.length + gap * self.speed;
        (0..self.members)
            .map(|i| self.leader_station - pitch * f64::from(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleCavSpec {
    pub id: VehicleId,
    #[serde(default = "ramp_lane")]
    pub lane: i32,
    pub station: f64,
    pub speed: f64,
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
    #[serde(default)]
    pub behavior: BehaviorParams,
    pub destination: f64,
    #[serde(default)]
    pub waypoints: Vec<f64>,
    #[serde(default)]
    pub merge_algorithm: MergeAlgorithm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanVehicleSpec {
    pub id: VehicleId,
    #[serde(default)]
    pub lane: i32,
    pub station: f64,
    /// Ignored when a profile is attached at spawn; the profile's first sample is used.
    #[serde(default)]
    pub speed: f64,
    #[serde(default = "default_length")]
    pub length: f64,
    /// Name of an entry in `profiles` replayed from t = 0.
    #[serde(default)]
    pub profile: Option<String>,
    /// Car-following model used while no profile is attached.
    #[serde(default)]
    pub idm: IdmParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundSpec {
    /// veh/h per lane.
    pub flow_rate: f64,
    /// Mainline lanes carrying traffic; empty means all of them.
    pub lanes: Vec<i32>,
    pub length: f64,
    /// Uniform headway jitter as a fraction of the mean headway.
    pub jitter: f64,
    /// Where vehicles enter during the run.
    pub entry_station: f64,
    /// Window populated at t = 0 as if the flow had been running already.
    pub fill_start: f64,
    pub fill_end: f64,
    /// Minimum distance kept from explicitly spawned vehicles when filling.
    pub clearance: f64,
    /// Cap on background vehicles alive at once.
    pub max_vehicles: u32,
    pub first_id: u32,
    pub idm: IdmParams,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            flow_rate: 1200.0,
            lanes: Vec::new(),
            length: 5.0,
            jitter: 0.2,
            entry_station: 0.0,
            fill_start: 0.0,
            fill_end: 0.0,
            clearance: 50.0,
            max_vehicles: 10,
            first_id: 1000,
            idm: IdmParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTrigger {
    pub when: TriggerCondition,
    pub action: EventAction,
}

/// Written as a single-key map, e.g. `{at_time: 20}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConditionDoc", into = "ConditionDoc")]
pub enum TriggerCondition {
    AtTime(f64),
    VehicleAtStation { id: VehicleId, station: f64 },
}

/// Written as a single-key map, e.g. `{set_target_speed: {id: 1, speed: 30}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ActionDoc", into = "ActionDoc")]
pub enum EventAction {
    SetSpeedProfile { id: VehicleId, profile: String },
    SetTargetSpeed { id: VehicleId, speed: f64 },
    EmitJoinRequest { id: VehicleId },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleStation {
    id: VehicleId,
    station: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleProfile {
    id: VehicleId,
    profile: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleSpeed {
    id: VehicleId,
    speed: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleOnly {
    id: VehicleId,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    at_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vehicle_at_station: Option<VehicleStation>,
}

impl TryFrom<ConditionDoc> for TriggerCondition {
    type Error = String;

    fn try_from(d: ConditionDoc) -> std::result::Result<Self, String> {
        match (d.at_time, d.vehicle_at_station) {
            (Some(t), None) => Ok(TriggerCondition::AtTime(t)),
            (None, Some(v)) => Ok(TriggerCondition::VehicleAtStation {
                id: v.id,
                station: v.station,
            }),
            _ => Err("expected exactly one of at_time, vehicle_at_station".into()),
        }
    }
}

impl From<TriggerCondition> for ConditionDoc {
    fn from(c: TriggerCondition) -> Self {
        match c {
            TriggerCondition::AtTime(t) => ConditionDoc {
                at_time: Some(t),
                ..Default::default()
            },
            TriggerCondition::VehicleAtStation { id, station } => ConditionDoc {
                vehicle_at_station: Some(VehicleStation { id, station }),
                ..Default::default()
            },
        }
    }
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    set_speed_profile: Option<VehicleProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    set_target_speed: Option<VehicleSpeed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emit_join_request: Option<VehicleOnly>,
}

impl TryFrom<ActionDoc> for EventAction {
    type Error = String;

    fn try_from(d: ActionDoc) -> std::result::Result<Self, String> {
        match (d.set_speed_profile, d.set_target_speed, d.emit_join_request) {
            (Some(p), None, None) => Ok(EventAction::SetSpeedProfile {
                id: p.id,
                profile: p.profile,
            }),
            (None, Some(s), None) => Ok(EventAction::SetTargetSpeed {
                id: s.id,
                speed: s.speed,
            }),
            (None, None, Some(j)) => Ok(EventAction::EmitJoinRequest { id: j.id }),
            _ => Err(
                "expected exactly one of set_speed_profile, set_target_speed, emit_join_request"
                    .into(),
            ),
        }
    }
}

impl From<EventAction> for ActionDoc {
    fn from(a: EventAction) -> Self {
        match a {
            EventAction::SetSpeedProfile { id, profile } => ActionDoc {
                set_speed_profile: Some(VehicleProfile { id, profile }),
                ..Default::default()
            },
            EventAction::SetTargetSpeed { id, speed } => ActionDoc {
                set_target_speed: Some(VehicleSpeed { id, speed }),
                ..Default::default()
            },
            EventAction::EmitJoinRequest { id } => ActionDoc {
                emit_join_request: Some(VehicleOnly { id }),
                ..Default::default()
            },
        }
    }
}

impl EventAction {
    pub fn vehicle(&self) -> VehicleId {
        match self {
            EventAction::SetSpeedProfile { id, .. }
            | EventAction::SetTargetSpeed { id, .. }
            | EventAction::EmitJoinRequest { id } => *id,
        }
    }
}

/// A profile given inline as `[[t, v], ...]` or as a CSV path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSource {
    Inline(SpeedProfile),
    Csv { csv: PathBuf },
}

/// Route of one vehicle: where it starts, must pass through, and leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingTask {
    pub vehicle: VehicleId,
    pub origin_station: f64,
    pub origin_lane: i32,
    pub destination: f64,
    pub waypoints: Vec<f64>,
}

impl DrivingTask {
    pub fn validate(&self) -> Result<()> {
        if !(self.destination > self.origin_station) {
            return Err(Error::Config(format!(
                "vehicle {}: destination {} must lie ahead of origin {}",
                self.vehicle, self.destination, self.origin_station
            )));
        }
        let mut prev = self.origin_station;
        for w in &self.waypoints {
            if !(*w > prev && *w < self.destination) {
                return Err(Error::Config(format!(
                    "vehicle {}: waypoints must increase between origin and destination",
                    self.vehicle
                )));
            }
            prev = *w;
        }
        Ok(())
    }
}

fn ramp_lane() -> i32 {
    RAMP_LANE
}

fn default_length() -> f64 {
    5.0
}

fn default_max_speed() -> f64 {
    40.0
}

fn cfg_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

impl ScenarioConfig {
    pub fn driving_tasks(&self) -> Vec<DrivingTask> {
        self.cavs
            .iter()
            .map(|c| DrivingTask {
                vehicle: c.id,
                origin_station: c.station,
                origin_lane: c.lane,
                destination: c.destination,
                waypoints: c.waypoints.clone(),
            })
            .collect()
    }

    /// Explicitly placed vehicles as (id, lane, front station, length).
    pub fn explicit_spawns(&self) -> Vec<(VehicleId, i32, f64, f64)> {
        let mut out = Vec::new();
        if let Some(p) = &self.platoon {
            for (id, s) in p.member_ids().into_iter().zip(p.member_stations()) {
                out.push((id, p.lane, s, p.length));
            }
        }
        for c in &self.cavs {
            out.push((c.id, c.lane, c.station, c.length));
        }
        for h in &self.human_vehicles {
            out.push((h.id, h.lane, h.station, h.length));
        }
        out
    }

    pub fn profile(&self, name: &str) -> Option<&SpeedProfile> {
        match self.profiles.get(name)? {
            ProfileSource::Inline(p) => Some(p),
            ProfileSource::Csv { .. } => None,
        }
    }

    /// Loads CSV profiles relative to `base_dir` so every profile is inline.
    pub fn resolve_paths(&mut self, base_dir: &Path) -> Result<()> {
        for (name, src) in self.profiles.iter_mut() {
            if let ProfileSource::Csv { csv } = src {
                let path = base_dir.join(&*csv);
                let profile = SpeedProfile::load(&path)
                    .map_err(|e| cfg_err(&format!("profiles.{name}"), e))?;
                *src = ProfileSource::Inline(profile);
            }
        }
        if let Some(rules) = &mut self.fuzzy_rules {
            if rules.is_relative() {
                *rules = base_dir.join(&*rules);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let sim = &self.sim;
        if !(sim.dt > 0.0 && sim.dt.is_finite()) {
            return Err(cfg_err(
                "sim.dt",
                format!("must be positive, got {}", sim.dt),
            ));
        }
        self.map.validate().map_err(|e| cfg_err("map", e))?;
        self.channel.validate().map_err(|e| cfg_err("channel", e))?;

        let lane_ok = |lane: i32| self.map.has_lane(lane);
        let mut ids = BTreeSet::new();
        let mut claim = |id: VehicleId, path: String| -> Result<()> {
            if !ids.insert(id) {
                return Err(cfg_err(&path, format!("duplicate vehicle id {id}")));
            }
            Ok(())
        };

        if let Some(p) = &self.platoon {
            if p.members == 0 {
                return Err(cfg_err("platoon.members", "must be at least 1"));
            }
            if !(p.desired_time_gap > 0.0) {
                return Err(cfg_err("platoon.desired_time_gap", "must be > 0"));
            }
            if p.initial_time_gap.is_some_and(|g| !(g > 0.0)) {
                return Err(cfg_err("platoon.initial_time_gap", "must be > 0"));
            }
            if !lane_ok(p.lane) || p.lane == RAMP_LANE {
                return Err(cfg_err(
                    "platoon.lane",
                    format!("{} is not a mainline lane", p.lane),
                ));
            }
            if !(p.speed >= 0.0) || !(p.max_speed > 0.0) || !(p.length > 0.0) || !(p.gap_rate > 0.0)
            {
                return Err(cfg_err(
                    "platoon",
                    "speed must be >= 0; max_speed, length and gap_rate > 0",
                ));
            }
            p.behavior
                .validate()
                .map_err(|e| cfg_err("platoon.behavior", e))?;
            for id in p.member_ids() {
                claim(id, "platoon".into())?;
            }
        }
        for (i, c) in self.cavs.iter().enumerate() {
            let path = format!("cavs[{i}]");
            claim(c.id, path.clone())?;
            if !lane_ok(c.lane) {
                return Err(cfg_err(
                    &format!("{path}.lane"),
                    format!("unknown lane {}", c.lane),
                ));
            }
            if !(c.speed >= 0.0) || !(c.max_speed > 0.0) || !(c.length > 0.0) {
                return Err(cfg_err(
                    &path,
                    "speed must be >= 0; max_speed and length > 0",
                ));
            }
            c.behavior
                .validate()
                .map_err(|e| cfg_err(&format!("{path}.behavior"), e))?;
        }
        for (i, h) in self.human_vehicles.iter().enumerate() {
            let path = format!("human_vehicles[{i}]");
            claim(h.id, path.clone())?;
            if !lane_ok(h.lane) {
                return Err(cfg_err(
                    &format!("{path}.lane"),
                    format!("unknown lane {}", h.lane),
                ));
            }
            if !(h.speed >= 0.0) || !(h.length > 0.0) {
                return Err(cfg_err(&path, "speed must be >= 0 and length > 0"));
            }
            h.idm
                .validate()
                .map_err(|e| cfg_err(&format!("{path}.idm"), e))?;
            if let Some(name) = &h.profile {
                if !self.profiles.contains_key(name) {
                    return Err(cfg_err(
                        &format!("{path}.profile"),
                        format!("unknown profile '{name}'"),
                    ));
                }
            }
        }
        for task in self.driving_tasks() {
            task.validate()?;
        }

        if let Some(b) = &self.background {
            if !(b.flow_rate >= 0.0 && b.flow_rate.is_finite()) {
                return Err(cfg_err(
                    "background.flow_rate",
                    format!("must be >= 0, got {}", b.flow_rate),
                ));
            }
            if !(0.0..1.0).contains(&b.jitter) {
                return Err(cfg_err("background.jitter", "must be in [0, 1)"));
            }
            if !(b.length > 0.0) {
                return Err(cfg_err("background.length", "must be > 0"));
            }
            if let Some(l) = b.lanes.iter().find(|l| !lane_ok(**l) || **l == RAMP_LANE) {
                return Err(cfg_err(
                    "background.lanes",
                    format!("{l} is not a mainline lane"),
                ));
            }
            if b.fill_end < b.fill_start {
                return Err(cfg_err(
                    "background.fill_end",
                    "must not be below fill_start",
                ));
            }
            b.idm.validate().map_err(|e| cfg_err("background.idm", e))?;
            if ids.iter().any(|id| id.0 >= b.first_id) {
                return Err(cfg_err(
                    "background.first_id",
                    "must exceed every explicit vehicle id",
                ));
            }
        }

        let cav_ids: BTreeSet<VehicleId> = self.cavs.iter().map(|c| c.id).collect();
        for (i, ev) in self.events.iter().enumerate() {
            let path = format!("events[{i}]");
            if let TriggerCondition::AtTime(t) = ev.when {
                if !(t >= 0.0) {
                    return Err(cfg_err(&format!("{path}.when.at_time"), "must be >= 0"));
                }
            }
            if let TriggerCondition::VehicleAtStation { id, .. } = ev.when {
                if !ids.contains(&id) {
                    return Err(cfg_err(
                        &format!("{path}.when"),
                        format!("unknown vehicle {id}"),
                    ));
                }
            }
            let target = ev.action.vehicle();
            if !ids.contains(&target) {
                return Err(cfg_err(
                    &format!("{path}.action"),
                    format!("unknown vehicle {target}"),
                ));
            }
            match &ev.action {
                EventAction::SetSpeedProfile { profile, .. }
                    if !self.profiles.contains_key(profile) =>
                {
                    return Err(cfg_err(
                        &format!("{path}.action"),
                        format!("unknown profile '{profile}'"),
                    ));
                }
                EventAction::SetTargetSpeed { speed, .. } if !(*speed >= 0.0) => {
                    return Err(cfg_err(&format!("{path}.action"), "speed must be >= 0"));
                }
                EventAction::EmitJoinRequest { id } if !cav_ids.contains(id) => {
                    return Err(cfg_err(
                        &format!("{path}.action"),
                        format!("vehicle {id} is not a single CAV"),
                    ));
                }
                EventAction::EmitJoinRequest { .. } if self.platoon.is_none() => {
                    return Err(cfg_err(&format!("{path}.action"), "no platoon to join"));
                }
                _ => {}
            }
        }
        if let Some((name, _)) = self
            .profiles
            .iter()
            .find(|(_, p)| matches!(p, ProfileSource::Csv { .. }))
        {
            return Err(cfg_err(
                &format!("profiles.{name}"),
                "csv profile was not loaded",
            ));
        }

        check_spawn_overlap(&self.explicit_spawns())
    }
}

fn check_spawn_overlap(spawns: &[(VehicleId, i32, f64, f64)]) -> Result<()> {
    let mut by_lane: BTreeMap<i32, Vec<&(VehicleId, i32, f64, f64)>> = BTreeMap::new();
    for s in spawns {
        by_lane.entry(s.1).or_default().push(s);
    }
    for lane in by_lane.values_mut() {
        lane.sort_by(|a, b| a.2.total_cmp(&b.2));
        for pair in lane.windows(2) {
            let (behind, ahead) = (pair[0], pair[1]);
            if ahead.2 - ahead.3 < behind.2 {
                return Err(Error::Config(format!(
                    "spawns overlap: vehicle {} at {} and vehicle {} at {} in lane {}",
                    behind.0, behind.2, ahead.0, ahead.2, behind.1
                )));
            }
        }
    }
    Ok(())
}

/// Parses and validates a scenario document. Relative paths resolve against `base_dir`.
pub fn load_config_str(text: &str, base_dir: &Path) -> Result<ScenarioConfig> {
    let de = serde_yaml::Deserializer::from_str(text);
    let mut cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        if path == "." || inner.starts_with(&path) {
            Error::Config(inner)
        } else {
            Error::Config(format!("{path}: {inner}"))
        }
    })?;
    cfg.resolve_paths(base_dir)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a document whose relative paths resolve against the working directory.
pub fn load_config(text: &str) -> Result<ScenarioConfig> {
    load_config_str(text, Path::new("."))
}

pub fn load_config_file(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_config_str(&text, base).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
