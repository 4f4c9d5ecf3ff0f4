//! Map geometry, vehicle bodies and the fixed-step kinematic core.
//!
//! Stations measure the front bumper along the lane centerline. Lanes are
//! indexed from the right-most mainline lane (`0`); the on-ramp acceleration
//! lane sits to its right as [`RAMP_LANE`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longitudinal::{fit_cubic, CubicCurve};

/// Lane index of the on-ramp acceleration lane.
pub const RAMP_LANE: i32 = -1;

/// Default simulation step, seconds.
pub const DEFAULT_DT: f64 = 0.05;

/// Default lane-change duration, seconds.
pub const DEFAULT_LANE_CHANGE_DURATION: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSpec {
    pub mainline_length: f64,
    pub mainline_lanes: u32,
    pub ramp_merge_start: f64,
    pub accel_lane_end: f64,
    pub lane_width: f64,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self {
            mainline_length: 2800.0,
            mainline_lanes: 2,
            ramp_merge_start: 2000.0,
            accel_lane_end: 2300.0,
            lane_width: 3.5,
        }
    }
}

impl MapSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mainline_length > 0.0) {
            return Err(Error::Config("map.mainline_length must be > 0".into()));
        }
        if self.mainline_lanes < 1 {
            return Err(Error::Config("map.mainline_lanes must be >= 1".into()));
        }
        if !(0.0 < self.ramp_merge_start
            && self.ramp_merge_start < self.accel_lane_end
            && self.accel_lane_end <= self.mainline_length)
        {
            return Err(Error::Config(
                "map: require 0 < ramp_merge_start < accel_lane_end <= mainline_length".into(),
            ));
        }
        if !(self.lane_width > 0.0) {
            return Err(Error::Config("map.lane_width must be > 0".into()));
        }
        Ok(())
    }

    pub fn has_lane(&self, lane: i32) -> bool {
        lane == RAMP_LANE || (0..self.mainline_lanes as i32).contains(&lane)
    }

    /// Lateral coordinate of a lane center, positive to the left.
    pub fn lane_center(&self, lane: i32) -> f64 {
        lane as f64 * self.lane_width
    }

    pub fn in_merge_zone(&self, station: f64) -> bool {
        (self.ramp_merge_start..=self.accel_lane_end).contains(&station)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    Cav,
    HumanDriven,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleBody {
    pub id: VehicleId,
    pub length: f64,
    pub kind: VehicleKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicState {
    pub station: f64,
    pub lane: i32,
    pub lateral_offset: f64,
    pub speed: f64,
    pub acceleration: f64,
}

impl KinematicState {
    pub fn new(station: f64, lane: i32, speed: f64) -> Self {
        Self {
            station,
            lane,
            lateral_offset: 0.0,
            speed,
            acceleration: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.station.is_finite()
            && self.lateral_offset.is_finite()
            && self.speed.is_finite()
            && self.acceleration.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    pub step_index: u64,
    pub dt: f64,
}

impl SimClock {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("dt must be > 0, got {dt}")));
        }
        Ok(Self { step_index: 0, dt })
    }

    /// Elapsed time. Always `step_index * dt`, never an accumulated sum.
    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.dt
    }
}

/// An in-progress lane change following a cubic lateral curve over station.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneChange {
    pub from_lane: i32,
    pub to_lane: i32,
    /// Lateral position relative to the origin lane center, as a function of station.
    pub curve: CubicCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub body: VehicleBody,
    pub state: KinematicState,
    pub lane_change: Option<LaneChange>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LaneCommand {
    /// Begin a lane change to `to_lane`, completing after roughly `duration` seconds.
    Change { to_lane: i32, duration: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub clock: SimClock,
    pub map: MapSpec,
    pub vehicles: Vec<Vehicle>,
}

impl WorldState {
    pub fn new(map: MapSpec, dt: f64) -> Result<Self> {
        map.validate()?;
        Ok(Self {
            clock: SimClock::new(dt)?,
            map,
            vehicles: Vec::new(),
        })
    }

    pub fn spawn(&mut self, body: VehicleBody, state: KinematicState) -> Result<()> {
        if !(body.length > 0.0) {
            return Err(Error::Config(format!(
                "vehicle {} length must be > 0",
                body.id
            )));
        }
        if self.vehicles.iter().any(|v| v.body.id == body.id) {
            return Err(Error::Config(format!("duplicate vehicle id {}", body.id)));
        }
        if !state.is_finite() {
            return Err(Error::InvalidState(format!(
                "vehicle {} has non-finite state",
                body.id
            )));
        }
        if !self.map.has_lane(state.lane) {
            return Err(Error::Config(format!(
                "vehicle {} spawned on unknown lane {}",
                body.id, state.lane
            )));
        }
        self.vehicles.push(Vehicle {
            body,
            state,
            lane_change: None,
        });
        Ok(())
    }

    pub fn remove(&mut self, id: VehicleId) -> Option<Vehicle> {
        let idx = self.vehicles.iter().position(|v| v.body.id == id)?;
        Some(self.vehicles.remove(idx))
    }

    pub fn get(&self, id: VehicleId) -> Option<&Vehicle> {
        self.vehicles.iter().find(|v| v.body.id == id)
    }

    /// Nearest vehicle strictly ahead of `id` in the same lane.
    pub fn lane_leader(&self, id: VehicleId) -> Option<&Vehicle> {
        let me = self.get(id)?;
        self.nearest_ahead(me.state.lane, me.state.station, Some(id))
    }

    /// Nearest vehicle in `lane` whose station is greater than `station`.
    pub fn nearest_ahead(
        &self,
        lane: i32,
        station: f64,
        exclude: Option<VehicleId>,
    ) -> Option<&Vehicle> {
        self.vehicles
            .iter()
            .filter(|v| {
                Some(v.body.id) != exclude && v.state.lane == lane && v.state.station > station
            })
            .min_by(|a, b| a.state.station.total_cmp(&b.state.station))
    }

    /// Nearest vehicle in `lane` whose station is not greater than `station`.
    pub fn nearest_behind(
        &self,
        lane: i32,
        station: f64,
        exclude: Option<VehicleId>,
    ) -> Option<&Vehicle> {
        self.vehicles
            .iter()
            .filter(|v| {
                Some(v.body.id) != exclude && v.state.lane == lane && v.state.station <= station
            })
            .max_by(|a, b| a.state.station.total_cmp(&b.state.station))
    }

    /// Reports the first pair of same-lane vehicles whose bodies overlap.
    pub fn find_overlap(&self) -> Option<(VehicleId, VehicleId, f64)> {
        let mut by_lane: BTreeMap<i32, Vec<&Vehicle>> = BTreeMap::new();
        for v in &self.vehicles {
            by_lane.entry(v.state.lane).or_default().push(v);
        }
        for lane in by_lane.values_mut() {
            lane.sort_by(|a, b| a.state.station.total_cmp(&b.state.station));
            for pair in lane.windows(2) {
                let gap = bumper_gap(
                    (&pair[0].body, &pair[0].state),
                    (&pair[1].body, &pair[1].state),
                );
                if gap < 0.0 {
                    return Some((pair[0].body.id, pair[1].body.id, gap));
                }
            }
        }
        None
    }
}

/// One fixed step of constant-acceleration kinematics.
///
/// Speed is clamped at zero; position uses the unclamped constant-acceleration
/// update, except that a vehicle at rest with a braking command stays put.
pub fn advance(state: &KinematicState, accel_command: f64, dt: f64) -> Result<KinematicState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidState(format!(
            "dt must be positive and finite, got {dt}"
        )));
    }
    if !accel_command.is_finite() || !state.is_finite() {
        return Err(Error::InvalidState("non-finite kinematic input".into()));
    }
    let raw_speed = state.speed + accel_command * dt;
    let (station, speed) = if raw_speed >= 0.0 {
        (
            state.station + state.speed * dt + accel_command * dt * dt / 2.0,
            raw_speed,
        )
    } else {
        // stops within the step: integrate only up to the stopping time
        let t_stop = if accel_command < 0.0 {
            -state.speed / accel_command
        } else {
            0.0
        };
        (state.station + state.speed * t_stop / 2.0, 0.0)
    };
    Ok(KinematicState {
        station,
        lane: state.lane,
        lateral_offset: state.lateral_offset,
        speed,
        acceleration: accel_command,
    })
}

/// Front-bumper-to-rear-bumper distance; negative when the bodies overlap.
pub fn bumper_gap(
    follower: (&VehicleBody, &KinematicState),
    leader: (&VehicleBody, &KinematicState),
) -> f64 {
    leader.1.station - follower.1.station - leader.0.length
}

/// Advances every vehicle by one step and applies any lane-change directives.
pub fn step_world(
    world: &WorldState,
    accel_commands: &BTreeMap<VehicleId, f64>,
    lane_commands: &BTreeMap<VehicleId, LaneCommand>,
) -> Result<WorldState> {
    let dt = world.clock.dt;
    let mut next = world.clone();
    for vehicle in &mut next.vehicles {
        let id = vehicle.body.id;
        let accel = *accel_commands.get(&id).ok_or_else(|| {
            Error::Config(format!("missing acceleration command for vehicle {id}"))
        })?;

        if let Some(LaneCommand::Change { to_lane, duration }) = lane_commands.get(&id) {
            if vehicle.lane_change.is_none() && *to_lane != vehicle.state.lane {
                if !world.map.has_lane(*to_lane) {
                    return Err(Error::Config(format!(
                        "vehicle {id}: unknown target lane {to_lane}"
                    )));
                }
                vehicle.lane_change = Some(start_lane_change(
                    &world.map,
                    &vehicle.state,
                    *to_lane,
                    *duration,
                )?);
            }
        }

        vehicle.state = advance(&vehicle.state, accel, dt)?;
        if let Some(change) = &vehicle.lane_change {
            let (lane, offset, done) = lateral_progress(&world.map, change, vehicle.state.station);
            vehicle.state.lane = lane;
            vehicle.state.lateral_offset = offset;
            if done {
                vehicle.lane_change = None;
            }
        }
    }
    next.clock.step_index += 1;
    Ok(next)
}

fn start_lane_change(
    map: &MapSpec,
    state: &KinematicState,
    to_lane: i32,
    duration: f64,
) -> Result<LaneChange> {
    let shift = map.lane_center(to_lane) - map.lane_center(state.lane);
    // at standstill the curve still needs a non-degenerate domain
    let length = (state.speed * duration).max(1.0);
    let curve = fit_cubic(
        state.lateral_offset,
        0.0,
        shift,
        0.0,
        state.station,
        state.station + length,
    )?;
    Ok(LaneChange {
        from_lane: state.lane,
        to_lane,
        curve,
    })
}

/// Returns (lane, offset from that lane's center, finished).
fn lateral_progress(map: &MapSpec, change: &LaneChange, station: f64) -> (i32, f64, bool) {
    let shift = map.lane_center(change.to_lane) - map.lane_center(change.from_lane);
    if station >= change.curve.x_end {
        return (change.to_lane, 0.0, true);
    }
    let y = change.curve.eval(station.max(change.curve.x_start));
    if (y - shift).abs() < y.abs() {
        (change.to_lane, y - shift, false)
    } else {
        (change.from_lane, y, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(id: u32, length: f64) -> VehicleBody {
        VehicleBody {
            id: VehicleId(id),
            length,
            kind: VehicleKind::Cav,
        }
    }

    #[test]
    fn advance_constant_speed() {
        let s = advance(&KinematicState::new(0.0, 0, 25.0), 0.0, 0.05).unwrap();
        assert!((s.station - 1.25).abs() < 1e-12);
        assert_eq!(s.speed, 25.0);
    }

    #[test]
    fn advance_accelerating() {
        let s = advance(&KinematicState::new(0.0, 0, 25.0), 2.0, 0.05).unwrap();
        assert!((s.station - 1.2525).abs() < 1e-12);
        assert!((s.speed - 25.1).abs() < 1e-12);
        assert_eq!(s.acceleration, 2.0);
    }

    #[test]
    fn advance_rest_stays_at_rest() {
        let s = advance(&KinematicState::new(0.0, 0, 0.0), 0.0, 0.05).unwrap();
        assert_eq!(s.station, 0.0);
        assert_eq!(s.speed, 0.0);
    }

    #[test]
    fn advance_clamps_speed_at_zero() {
        let s = advance(&KinematicState::new(10.0, 0, 0.1), -3.0, 0.05).unwrap();
        assert_eq!(s.speed, 0.0);
        assert!(s.station >= 10.0);
    }

    #[test]
    fn advance_rejects_non_finite() {
        assert!(matches!(
            advance(&KinematicState::new(0.0, 0, 1.0), f64::NAN, 0.05),
            Err(Error::InvalidState(_))
        ));
        assert!(advance(&KinematicState::new(f64::INFINITY, 0, 1.0), 0.0, 0.05).is_err());
        assert!(advance(&KinematicState::new(0.0, 0, 1.0), 0.0, 0.0).is_err());
    }

    #[test]
    fn bumper_gap_examples() {
        let (l, f) = (body(1, 5.0), body(2, 5.0));
        let gap = |leader_at: f64, follower_at: f64| {
            bumper_gap(
                (&f, &KinematicState::new(follower_at, 0, 0.0)),
                (&l, &KinematicState::new(leader_at, 0, 0.0)),
            )
        };
        assert_eq!(gap(100.0, 80.0), 15.0);
        assert_eq!(gap(5.0, 0.0), 0.0);
        assert_eq!(gap(3.0, 0.0), -2.0);
    }

    #[test]
    fn step_empty_world_advances_clock() {
        let w = WorldState::new(MapSpec::default(), 0.05).unwrap();
        let n = step_world(&w, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        assert_eq!(n.clock.step_index, 1);
        assert!(n.vehicles.is_empty());
    }

    #[test]
    fn step_single_vehicle() {
        let mut w = WorldState::new(MapSpec::default(), 0.05).unwrap();
        w.spawn(body(0, 5.0), KinematicState::new(10.0, 0, 20.0))
            .unwrap();
        let cmds = BTreeMap::from([(VehicleId(0), 0.0)]);
        let n = step_world(&w, &cmds, &BTreeMap::new()).unwrap();
        assert!((n.vehicles[0].state.station - 11.0).abs() < 1e-12);
    }

    #[test]
    fn step_lockstep_keeps_gap() {
        let mut w = WorldState::new(MapSpec::default(), 0.05).unwrap();
        w.spawn(body(0, 5.0), KinematicState::new(50.0, 0, 20.0))
            .unwrap();
        w.spawn(body(1, 5.0), KinematicState::new(30.0, 0, 20.0))
            .unwrap();
        let cmds = BTreeMap::from([(VehicleId(0), 1.0), (VehicleId(1), 1.0)]);
        for _ in 0..100 {
            w = step_world(&w, &cmds, &BTreeMap::new()).unwrap();
        }
        let gap = w.vehicles[0].state.station - w.vehicles[1].state.station;
        assert!((gap - 20.0).abs() < 1e-9);
    }

    #[test]
    fn step_missing_command_is_config_error() {
        let mut w = WorldState::new(MapSpec::default(), 0.05).unwrap();
        w.spawn(body(0, 5.0), KinematicState::new(10.0, 0, 20.0))
            .unwrap();
        assert!(matches!(
            step_world(&w, &BTreeMap::new(), &BTreeMap::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lane_change_reaches_target_lane() {
        let mut w = WorldState::new(MapSpec::default(), 0.05).unwrap();
        w.spawn(body(0, 5.0), KinematicState::new(1900.0, RAMP_LANE, 25.0))
            .unwrap();
        let cmds = BTreeMap::from([(VehicleId(0), 0.0)]);
        let change = BTreeMap::from([(
            VehicleId(0),
            LaneCommand::Change {
                to_lane: 0,
                duration: 3.0,
            },
        )]);
        w = step_world(&w, &cmds, &change).unwrap();
        let mut crossed_at = None;
        for step in 1..80 {
            w = step_world(&w, &cmds, &BTreeMap::new()).unwrap();
            if crossed_at.is_none() && w.vehicles[0].state.lane == 0 {
                crossed_at = Some(step);
            }
        }
        // crosses the lane boundary at the midpoint of the 3 s maneuver
        let crossed = crossed_at.unwrap();
        assert!((28..=32).contains(&crossed), "crossed at {crossed}");
        assert_eq!(w.vehicles[0].state.lane, 0);
        assert_eq!(w.vehicles[0].state.lateral_offset, 0.0);
        assert!(w.vehicles[0].lane_change.is_none());
    }

    #[test]
    fn clock_is_exact() {
        let mut c = SimClock::new(0.05).unwrap();
        c.step_index = 2000;
        assert_eq!(c.time(), 2000.0 * 0.05);
    }

    #[test]
    fn map_validation() {
        assert!(MapSpec::default().validate().is_ok());
        let bad = MapSpec {
            ramp_merge_start: 2400.0,
            ..MapSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn overlap_detected() {
        let mut w = WorldState::new(MapSpec::default(), 0.05).unwrap();
        w.spawn(body(0, 5.0), KinematicState::new(13.0, 0, 0.0))
            .unwrap();
        w.spawn(body(1, 5.0), KinematicState::new(10.0, 0, 0.0))
            .unwrap();
        let (f, l, gap) = w.find_overlap().unwrap();
        assert_eq!((f, l), (VehicleId(1), VehicleId(0)));
        assert_eq!(gap, -2.0);
    }
}
