//! The three benchmark scenarios shipped with the simulator.

use std::collections::BTreeMap;

use super::config::*;
use super::profile::{shipped_stop_and_go, SpeedProfile};
use crate::error::{Error, Result};
use crate::longitudinal::BehaviorParams;
use crate::platooning::MergeAlgorithm;
use crate::v2x::ChannelModel;
use crate::world::{MapSpec, VehicleId, RAMP_LANE};

/// (name, one-line description) of every builtin scenario.
pub const CATALOG: [(&str, &str); 3] = [
    (
        "cycle1",
        "5-CAV platoon, leader steps 25 -> 30 -> 25 m/s, no traffic",
    ),
    (
        "cycle2",
        "5-CAV platoon behind a human driver replaying a stop-and-go profile",
    ),
    (
        "merge_join",
        "ramp CAV merges into a 5-CAV mainline platoon among background traffic",
    ),
];

pub const CYCLE2_HV: VehicleId = VehicleId(100);
pub const MERGE_JOINER: VehicleId = VehicleId(10);

pub fn builtin_cycle1() -> ScenarioConfig {
    let at = |t: f64, speed: f64| EventTrigger {
        when: TriggerCondition::AtTime(t),
        action: EventAction::SetTargetSpeed {
            id: VehicleId(1),
            speed,
        },
    };
    ScenarioConfig {
        name: "cycle1".into(),
        description: CATALOG[0].1.into(),
        sim: SimParams::default(),
        map: MapSpec::default(),
        platoon: Some(PlatoonSpec::default()),
        cavs: Vec::new(),
        human_vehicles: Vec::new(),
        background: None,
        // 25 m/s for 20 s, ramp to 30 and hold 20 s, ramp back to 25 and hold
        events: vec![at(20.0, 30.0), at(42.5, 25.0)],
        channel: ChannelModel::default(),
        profiles: BTreeMap::new(),
        fuzzy_rules: None,
    }
}

pub fn builtin_cycle2(profile: SpeedProfile) -> ScenarioConfig {
    let v0 = profile.speed_at(0.0);
    let platoon = PlatoonSpec {
        speed: v0,
        ..PlatoonSpec::default()
    };
    // leader starts at its own spacing-law equilibrium behind the human driver
    let hv_station = platoon.leader_station + platoon.following.headway * v0 + 5.0;
    ScenarioConfig {
        name: "cycle2".into(),
        description: CATALOG[1].1.into(),
        sim: SimParams::default(),
        map: MapSpec::default(),
        platoon: Some(platoon),
        cavs: Vec::new(),
        human_vehicles: vec![HumanVehicleSpec {
            id: CYCLE2_HV,
            lane: 0,
            station: hv_station,
            speed: v0,
            length: 5.0,
            profile: Some("stop_and_go".into()),
            idm: Default::default(),
        }],
        background: None,
        events: Vec::new(),
        channel: ChannelModel::default(),
        profiles: BTreeMap::from([("stop_and_go".to_string(), ProfileSource::Inline(profile))]),
        fuzzy_rules: None,
    }
}

pub fn builtin_merge_join(algorithm: MergeAlgorithm) -> ScenarioConfig {
    let map = MapSpec::default();
    ScenarioConfig {
        name: "merge_join".into(),
        description: CATALOG[2].1.into(),
        sim: SimParams {
            total_steps: 1400,
            ..SimParams::default()
        },
        platoon: Some(PlatoonSpec {
            leader_station: 880.0,
            ..PlatoonSpec::default()
        }),
        cavs: vec![SingleCavSpec {
            id: MERGE_JOINER,
            lane: RAMP_LANE,
            station: 720.0,
            speed: 28.0,
            length: 5.0,
            max_speed: 32.0,
            behavior: BehaviorParams::default().with_target(28.0),
            destination: 2700.0,
            waypoints: Vec::new(),
            merge_algorithm: algorithm,
        }],
        human_vehicles: Vec::new(),
        background: Some(BackgroundSpec {
            fill_end: 700.0,
            max_vehicles: 9,
            ..BackgroundSpec::default()
        }),
        events: vec![EventTrigger {
            when: TriggerCondition::VehicleAtStation {
                id: MERGE_JOINER,
                station: map.ramp_merge_start - 200.0,
            },
            action: EventAction::EmitJoinRequest { id: MERGE_JOINER },
        }],
        map,
        channel: ChannelModel::default(),
        profiles: BTreeMap::new(),
        fuzzy_rules: None,
    }
}

/// Builtin scenario by name. `cycle2` uses `profile` when given, else the shipped one.
pub fn builtin(name: &str, profile: Option<SpeedProfile>) -> Result<ScenarioConfig> {
    match name {
        "cycle1" => Ok(builtin_cycle1()),
        "cycle2" => Ok(builtin_cycle2(profile.unwrap_or_else(shipped_stop_and_go))),
        "merge_join" => Ok(builtin_merge_join(MergeAlgorithm::Heuristic)),
        other => Err(Error::Config(format!(
            "unknown scenario '{other}' (builtins: cycle1, cycle2, merge_join)"
        ))),
    }
}
