//! Platoon membership protocol.
//!
//! Followers regulate a constant time gap to their immediate predecessor by
//! projecting a target position one step ahead and converting the implied
//! displacement into a target speed, which the comfort-bounded controller in
//! [`crate::longitudinal`] then tracks.

pub mod fuzzy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{KinematicState, MapSpec, VehicleId};

pub use fuzzy::{FuzzyRuleBase, SlotFeatures};

/// Default inter-vehicular time gap inside a platoon, seconds.
pub const DEFAULT_TIME_GAP: f64 = 0.6;
/// Extra time gap added on top of two platoon gaps when opening a slot.
pub const DEFAULT_JOINER_ALLOWANCE: f64 = 0.3;
/// Predecessor data older than this many steps puts a follower in degraded mode.
pub const STALENESS_BOUND_STEPS: u64 = 2;
/// Distance to the meeting point at which the joiner may begin its merge.
pub const MEETING_TOLERANCE: f64 = 10.0;
/// Lateral tolerance to the target lane center for completing a join.
pub const LATERAL_TOLERANCE: f64 = 0.2;
/// Relative time-gap error below which a join counts as settled.
pub const TIME_GAP_TOLERANCE: f64 = 0.2;
/// Look-ahead used to project the slot midpoint to a meeting station.
pub const MEETING_LOOKAHEAD: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemberMode {
    LeaderDrive,
    Maintaining,
    OpeningGap,
    SingleSearching,
    MoveToMeetingPoint,
    JoiningMerge,
}

impl MemberMode {
    pub const ALL: [MemberMode; 6] = [
        MemberMode::LeaderDrive,
        MemberMode::Maintaining,
        MemberMode::OpeningGap,
        MemberMode::SingleSearching,
        MemberMode::MoveToMeetingPoint,
        MemberMode::JoiningMerge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MemberMode::LeaderDrive => "leader_drive",
            MemberMode::Maintaining => "maintaining",
            MemberMode::OpeningGap => "opening_gap",
            MemberMode::SingleSearching => "single_searching",
            MemberMode::MoveToMeetingPoint => "move_to_meeting_point",
            MemberMode::JoiningMerge => "joining_merge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Legal protocol edges. Staying in the same mode is always allowed.
pub fn check_transition(from: MemberMode, to: MemberMode) -> Result<()> {
    use MemberMode::*;
    let legal = from == to
        || matches!(
            (from, to),
            (SingleSearching, MoveToMeetingPoint)
                | (MoveToMeetingPoint, JoiningMerge)
                | (JoiningMerge, Maintaining)
                | (MoveToMeetingPoint, SingleSearching)
                | (JoiningMerge, SingleSearching)
                | (Maintaining, OpeningGap)
                | (OpeningGap, Maintaining)
        );
    if legal {
        Ok(())
    } else {
        Err(Error::Protocol(format!(
            "illegal transition {} -> {}",
            from.as_str(),
            to.as_str()
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeAlgorithm {
    #[default]
    Heuristic,
    Fuzzy,
}

impl MergeAlgorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeAlgorithm::Heuristic => "heuristic",
            MergeAlgorithm::Fuzzy => "fuzzy",
        }
    }
}

impl std::str::FromStr for MergeAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(MergeAlgorithm::Heuristic),
            "fuzzy" => Ok(MergeAlgorithm::Fuzzy),
            other => Err(Error::Config(format!("unknown merge algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinRequest {
    pub requester: VehicleId,
    pub state: KinematicState,
    pub length: f64,
    pub destination: f64,
    pub route: String,
    pub algorithm: MergeAlgorithm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinPlan {
    pub requester: VehicleId,
    pub front_vehicle_index: usize,
    pub front_vehicle: VehicleId,
    pub meeting_station: f64,
    pub gap_opener_index: Option<usize>,
    pub gap_opener: Option<VehicleId>,
    pub target_lane: i32,
    pub algorithm: MergeAlgorithm,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JoinDecision {
    Accept(JoinPlan),
    Reject(String),
}

/// Ordered platoon membership. Index 0 is the leader.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatoonRoster {
    members: Vec<VehicleId>,
    modes: Vec<MemberMode>,
    /// Effective time gap each member currently regulates to.
    gaps: Vec<f64>,
    /// Time gap each member is relaxing toward.
    target_gaps: Vec<f64>,
    desired_time_gap: f64,
    joiner_allowance: f64,
    active_join: Option<JoinPlan>,
}

impl PlatoonRoster {
    pub fn new(members: Vec<VehicleId>, desired_time_gap: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("platoon needs at least one member".into()));
        }
        if !(desired_time_gap > 0.0) {
            return Err(Error::Config("platoon desired_time_gap must be > 0".into()));
        }
        let n = members.len();
        let mut modes = vec![MemberMode::Maintaining; n];
        modes[0] = MemberMode::LeaderDrive;
        Ok(Self {
            members,
            modes,
            gaps: vec![desired_time_gap; n],
            target_gaps: vec![desired_time_gap; n],
            desired_time_gap,
            joiner_allowance: DEFAULT_JOINER_ALLOWANCE,
            active_join: None,
        })
    }

    pub fn members(&self) -> &[VehicleId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn leader(&self) -> VehicleId {
        self.members[0]
    }

    pub fn index_of(&self, id: VehicleId) -> Option<usize> {
        self.members.iter().position(|m| *m == id)
    }

    pub fn contains(&self, id: VehicleId) -> bool {
        self.index_of(id).is_some()
    }

    pub fn mode(&self, index: usize) -> MemberMode {
        self.modes[index]
    }

    pub fn desired_time_gap(&self) -> f64 {
        self.desired_time_gap
    }

    pub fn effective_gap(&self, index: usize) -> f64 {
        self.gaps[index]
    }

    pub fn active_join(&self) -> Option<&JoinPlan> {
        self.active_join.as_ref()
    }

    /// Total time gap an opener widens to.
    pub fn opening_gap(&self) -> f64 {
        2.0 * self.desired_time_gap + self.joiner_allowance
    }

    /// Moves each member's effective gap toward its target at `rate` seconds per second.
    pub fn relax_gaps(&mut self, dt: f64, rate: f64) {
        let step = rate * dt;
        for (gap, target) in self.gaps.iter_mut().zip(&self.target_gaps) {
            let diff = target - *gap;
            *gap = if diff.abs() <= step {
                *target
            } else {
                *gap + step * diff.signum()
            };
        }
    }

    /// Checks that the roster is in on-road order: stations strictly decreasing with index.
    pub fn check_order(&self, station_of: impl Fn(VehicleId) -> Option<f64>) -> Result<()> {
        let stations: Vec<f64> = self
            .members
            .iter()
            .map(|id| {
                station_of(*id).ok_or_else(|| Error::InvalidState(format!("member {id} missing")))
            })
            .collect::<Result<_>>()?;
        for (i, pair) in stations.windows(2).enumerate() {
            if pair[1] >= pair[0] {
                return Err(Error::InvalidState(format!(
                    "roster order broken: member {} at {:.3} is not behind member {} at {:.3}",
                    self.members[i + 1],
                    pair[1],
                    self.members[i],
                    pair[0]
                )));
            }
        }
        Ok(())
    }

    fn set_mode(&mut self, index: usize, mode: MemberMode) -> Result<()> {
        check_transition(self.modes[index], mode)?;
        self.modes[index] = mode;
        Ok(())
    }

    /// Commands the member at `opener_index` to widen its gap. Returns the
    /// opener's new target gap, or `None` for a tail join with nobody to command.
    pub fn open_gap(&mut self, opener_index: Option<usize>) -> Result<Option<f64>> {
        let Some(i) = opener_index else {
            return Ok(None);
        };
        if i == 0 || i >= self.len() {
            return Err(Error::Protocol(format!("member {i} cannot open a gap")));
        }
        let target = self.opening_gap();
        if self.modes[i] == MemberMode::OpeningGap {
            return Ok(Some(self.target_gaps[i]));
        }
        self.set_mode(i, MemberMode::OpeningGap)?;
        self.target_gaps[i] = target;
        Ok(Some(target))
    }

    /// Reverts an opener to normal gap keeping.
    pub fn close_gap(&mut self, opener_index: usize) -> Result<()> {
        if self.modes[opener_index] == MemberMode::OpeningGap {
            self.set_mode(opener_index, MemberMode::Maintaining)?;
        }
        self.target_gaps[opener_index] = self.desired_time_gap;
        Ok(())
    }

    /// Drops the in-progress join and reverts the opener.
    pub fn abort_join(&mut self) -> Result<Option<JoinPlan>> {
        let Some(plan) = self.active_join.take() else {
            return Ok(None);
        };
        if let Some(opener) = plan.gap_opener.and_then(|id| self.index_of(id)) {
            self.close_gap(opener)?;
        }
        Ok(Some(plan))
    }

    /// Inserts the joiner directly behind the plan's front vehicle and clears the join.
    pub fn complete_join(&mut self, joiner: VehicleId) -> Result<usize> {
        let plan = self
            .active_join
            .take()
            .ok_or_else(|| Error::Protocol("no join in progress".into()))?;
        if plan.requester != joiner {
            let requester = plan.requester;
            self.active_join = Some(plan);
            return Err(Error::Protocol(format!(
                "vehicle {joiner} is not the active joiner {requester}"
            )));
        }
        let front = self
            .index_of(plan.front_vehicle)
            .ok_or_else(|| Error::Protocol("front vehicle left the platoon".into()))?;
        let at = front + 1;
        self.members.insert(at, joiner);
        self.modes.insert(at, MemberMode::Maintaining);
        // the joiner starts from the gap it actually settled at
        self.gaps.insert(at, self.desired_time_gap);
        self.target_gaps.insert(at, self.desired_time_gap);
        if let Some(opener) = plan.gap_opener.and_then(|id| self.index_of(id)) {
            self.close_gap(opener)?;
        }
        Ok(at)
    }
}

/// One-step-ahead target position keeping `gap` seconds behind the predecessor.
pub fn follower_target_position(
    pos_prev: f64,
    len_prev: f64,
    pos_self_prev: f64,
    gap: f64,
    dt: f64,
) -> f64 {
    let r = gap / dt;
    (pos_prev - len_prev + pos_self_prev * r) / (1.0 + r)
}

/// Speed implied by moving from `pos_prev_step` to `pos_now` in one step.
pub fn follower_desired_speed(pos_now: f64, pos_prev_step: f64, dt: f64) -> f64 {
    ((pos_now - pos_prev_step) / dt).max(0.0)
}

/// Predecessor information a follower holds, as received over V2X.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredecessorSnapshot {
    /// Predicted station of the predecessor's front bumper at the next step.
    pub next_station: f64,
    pub length: f64,
    /// Steps elapsed since the underlying message was sent.
    pub age_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowerCommand {
    pub target_speed: f64,
    pub degraded: bool,
}

/// Gap-regulation target speed for roster member `member_index`.
pub fn step_follower(
    roster: &PlatoonRoster,
    member_index: usize,
    predecessor: Option<&PredecessorSnapshot>,
    own: &KinematicState,
    dt: f64,
    last_target: f64,
) -> Result<FollowerCommand> {
    if member_index == 0 || member_index >= roster.len() {
        return Err(Error::Protocol(format!(
            "member {member_index} has no predecessor"
        )));
    }
    match predecessor {
        Some(p) if p.age_steps <= STALENESS_BOUND_STEPS => {
            let gap = roster.effective_gap(member_index);
            let target_pos =
                follower_target_position(p.next_station, p.length, own.station, gap, dt);
            Ok(FollowerCommand {
                target_speed: follower_desired_speed(target_pos, own.station, dt),
                degraded: false,
            })
        }
        _ => Ok(FollowerCommand {
            target_speed: last_target,
            degraded: true,
        }),
    }
}

/// A position in the road plane: station and lateral coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePoint {
    pub x: f64,
    pub y: f64,
}

impl PlanePoint {
    pub fn of(state: &KinematicState, map: &MapSpec) -> Self {
        Self {
            x: state.station,
            y: map.lane_center(state.lane) + state.lateral_offset,
        }
    }

    fn distance(&self, other: &PlanePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Nearest member by Euclidean distance; ties go to the smaller index.
pub fn select_merge_position_heuristic(
    requester: PlanePoint,
    members: &[PlanePoint],
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in members.iter().enumerate() {
        let d = requester.distance(m);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Protocol("cannot select a merge position in an empty platoon".into()))
}

/// What the leader knows when deciding on a join.
#[derive(Debug, Clone)]
pub struct JoinContext<'a> {
    /// Member (state, length) in roster order, as received over V2X.
    pub members: &'a [(KinematicState, f64)],
    /// Bumper gap behind each member in the platoon lane; `f64::INFINITY` if empty.
    pub rear_gaps: &'a [f64],
    pub map: &'a MapSpec,
    pub rules: &'a FuzzyRuleBase,
}

pub fn handle_join_request(
    roster: &mut PlatoonRoster,
    request: &JoinRequest,
    ctx: &JoinContext<'_>,
    algorithm: MergeAlgorithm,
) -> Result<JoinDecision> {
    if roster.contains(request.requester) {
        return Err(Error::Protocol(format!(
            "join request from existing member {}",
            request.requester
        )));
    }
    if roster.active_join.is_some() {
        return Ok(JoinDecision::Reject("busy".into()));
    }
    if ctx.members.len() != roster.len() || ctx.rear_gaps.len() != roster.len() {
        return Err(Error::Protocol("join context does not match roster".into()));
    }
    if request.state.station > ctx.map.accel_lane_end {
        return Ok(JoinDecision::Reject("no feasible meeting point".into()));
    }
    if request.destination <= ctx.map.accel_lane_end {
        return Ok(JoinDecision::Reject(
            "destination before the end of the merge zone".into(),
        ));
    }

    let front = match algorithm {
        MergeAlgorithm::Heuristic => {
            let points: Vec<PlanePoint> = ctx
                .members
                .iter()
                .map(|(s, _)| PlanePoint::of(s, ctx.map))
                .collect();
            select_merge_position_heuristic(PlanePoint::of(&request.state, ctx.map), &points)?
        }
        MergeAlgorithm::Fuzzy => {
            let slots = slot_features(
                &request.state,
                ctx.members,
                ctx.rear_gaps,
                roster.desired_time_gap(),
            );
            ctx.rules.select(&slots)?
        }
    };

    let (front_state, front_len) = ctx.members[front];
    let slot_rear = front_state.station - front_len;
    let slot_front_of_next = match ctx.members.get(front + 1) {
        Some((s, _)) => s.station,
        None => slot_rear - roster.opening_gap() * front_state.speed,
    };
    let midpoint = 0.5 * (slot_rear + slot_front_of_next);
    let meeting_station = (midpoint + MEETING_LOOKAHEAD * front_state.speed)
        .clamp(ctx.map.ramp_merge_start, ctx.map.accel_lane_end);

    let opener_index = (front + 1 < roster.len()).then_some(front + 1);
    let plan = JoinPlan {
        requester: request.requester,
        front_vehicle_index: front,
        front_vehicle: roster.members[front],
        meeting_station,
        gap_opener_index: opener_index,
        gap_opener: opener_index.map(|i| roster.members[i]),
        target_lane: front_state.lane,
        algorithm,
    };
    roster.open_gap(opener_index)?;
    roster.active_join = Some(plan.clone());
    Ok(JoinDecision::Accept(plan))
}

/// Fuzzy-selector inputs for every candidate slot (slot `i` is directly behind member `i`).
pub fn slot_features(
    requester: &KinematicState,
    members: &[(KinematicState, f64)],
    rear_gaps: &[f64],
    time_gap: f64,
) -> Vec<SlotFeatures> {
    members
        .iter()
        .zip(rear_gaps)
        .map(|((front, len), rear_gap)| {
            let slot_station = front.station - len - time_gap * front.speed;
            let ahead = slot_station - requester.station;
            let direction = if ahead >= 0.0 { 1.0 } else { -1.0 };
            SlotFeatures {
                offset: ahead.abs(),
                approach_speed: direction * (requester.speed - front.speed),
                rear_gap: *rear_gap,
            }
        })
        .collect()
}

/// Outcome of one joiner protocol update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JoinStep {
    Stay(MemberMode),
    Advance(MemberMode),
    Abort,
}

/// Vehicles around the joiner in the target lane, as (state, length).
#[derive(Debug, Clone, Copy)]
pub struct SlotView {
    pub front: Option<(KinematicState, f64)>,
    pub rear: Option<(KinematicState, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct JoinFsmParams {
    pub min_margin: f64,
    pub time_gap: f64,
}

impl Default for JoinFsmParams {
    fn default() -> Self {
        Self {
            min_margin: 3.0,
            time_gap: DEFAULT_TIME_GAP,
        }
    }
}

/// Whether the joiner's body fits between the slot vehicles with `margin` on each side.
pub fn slot_fits(joiner: &KinematicState, joiner_len: f64, slot: &SlotView, margin: f64) -> bool {
    let front_ok = slot
        .front
        .is_none_or(|(f, len)| f.station - len - joiner.station >= margin);
    let rear_ok = slot
        .rear
        .is_none_or(|(r, _)| joiner.station - joiner_len - r.station >= margin);
    front_ok && rear_ok
}

/// Advances the joiner's protocol state. `accepted` signals a freshly received acceptance.
pub fn update_join_fsm(
    mode: MemberMode,
    joiner: &KinematicState,
    joiner_len: f64,
    plan: &JoinPlan,
    slot: &SlotView,
    map: &MapSpec,
    params: &JoinFsmParams,
) -> Result<JoinStep> {
    use MemberMode::*;
    let merged = joiner.lane == plan.target_lane;
    match mode {
        SingleSearching => Ok(JoinStep::Advance(MoveToMeetingPoint)),
        MoveToMeetingPoint | JoiningMerge if !merged && joiner.station > map.accel_lane_end => {
            Ok(JoinStep::Abort)
        }
        MoveToMeetingPoint => {
            let near = joiner.station > plan.meeting_station - MEETING_TOLERANCE;
            if near
                && map.in_merge_zone(joiner.station)
                && slot_fits(joiner, joiner_len, slot, params.min_margin)
            {
                Ok(JoinStep::Advance(JoiningMerge))
            } else {
                Ok(JoinStep::Stay(MoveToMeetingPoint))
            }
        }
        JoiningMerge => {
            let lateral_ok = merged && joiner.lateral_offset.abs() < LATERAL_TOLERANCE;
            let gap_ok = match slot.front {
                Some((f, len)) if joiner.speed > 0.0 => {
                    let tg = (f.station - len - joiner.station) / joiner.speed;
                    ((tg - params.time_gap) / params.time_gap).abs() < TIME_GAP_TOLERANCE
                }
                Some(_) => false,
                None => true,
            };
            if lateral_ok && gap_ok {
                Ok(JoinStep::Advance(Maintaining))
            } else {
                Ok(JoinStep::Stay(JoiningMerge))
            }
        }
        other => Err(Error::Protocol(format!(
            "{} is not a joiner mode",
            other.as_str()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DT: f64 = 0.05;

    fn ids(n: u32) -> Vec<VehicleId> {
        (0..n).map(VehicleId).collect()
    }

    #[test]
    fn target_position_examples() {
        assert!((follower_target_position(100.0, 5.0, 78.75, 0.6, DT) - 80.0).abs() < 1e-12);
        assert!(
            (follower_target_position(100.0, 5.0, 92.0, 0.6, DT) - 1199.0 / 13.0).abs() < 1e-12
        );
    }

    #[test]
    fn target_position_fixed_point() {
        let (v, gap) = (25.0, 0.6);
        let self_prev = 500.0;
        let self_now = self_prev + v * DT;
        let pred_now = self_now + v * gap + 5.0;
        let pos = follower_target_position(pred_now, 5.0, self_prev, gap, DT);
        assert!((pos - self_now).abs() < 1e-9);
    }

    #[test]
    fn desired_speed_examples() {
        assert!((follower_desired_speed(1199.0 / 13.0, 92.0, DT) - 60.0 / 13.0).abs() < 1e-9);
        assert!((follower_desired_speed(80.0, 78.75, DT) - 25.0).abs() < 1e-9);
        assert_eq!(follower_desired_speed(80.0, 80.0, DT), 0.0);
        assert_eq!(follower_desired_speed(79.0, 80.0, DT), 0.0);
    }

    #[test]
    fn step_follower_examples() {
        let roster = PlatoonRoster::new(ids(3), 0.6).unwrap();
        let own = KinematicState::new(500.0, 0, 25.0);
        let fresh = |next_station| PredecessorSnapshot {
            next_station,
            length: 5.0,
            age_steps: 0,
        };
        // equilibrium: gap after the step equals v·gap
        let cmd = step_follower(
            &roster,
            1,
            Some(&fresh(500.0 + 1.25 + 15.0 + 5.0)),
            &own,
            DT,
            25.0,
        )
        .unwrap();
        assert!((cmd.target_speed - 25.0).abs() < 1e-9);
        assert!(!cmd.degraded);

        let own = KinematicState::new(92.0, 0, 25.0);
        let cmd = step_follower(&roster, 1, Some(&fresh(100.0)), &own, DT, 25.0).unwrap();
        assert!((cmd.target_speed - 60.0 / 13.0).abs() < 1e-9);

        let own = KinematicState::new(400.0, 0, 25.0);
        let cmd = step_follower(&roster, 1, Some(&fresh(500.0)), &own, DT, 25.0).unwrap();
        assert!(cmd.target_speed > 25.0);
    }

    #[test]
    fn step_follower_degrades_on_stale_data() {
        let roster = PlatoonRoster::new(ids(2), 0.6).unwrap();
        let own = KinematicState::new(0.0, 0, 20.0);
        let stale = PredecessorSnapshot {
            next_station: 50.0,
            length: 5.0,
            age_steps: 3,
        };
        let cmd = step_follower(&roster, 1, Some(&stale), &own, DT, 19.0).unwrap();
        assert_eq!(
            cmd,
            FollowerCommand {
                target_speed: 19.0,
                degraded: true
            }
        );
        let cmd = step_follower(&roster, 1, None, &own, DT, 19.0).unwrap();
        assert!(cmd.degraded);
        assert!(step_follower(&roster, 0, None, &own, DT, 19.0).is_err());
    }

    #[test]
    fn heuristic_examples() {
        let members: Vec<PlanePoint> = (0..5)
            .map(|i| PlanePoint {
                x: 100.0 - 20.0 * i as f64,
                y: 0.0,
            })
            .collect();
        let abreast_of_two = PlanePoint { x: 60.0, y: -3.5 };
        assert_eq!(
            select_merge_position_heuristic(abreast_of_two, &members).unwrap(),
            2
        );
        let between = PlanePoint { x: 70.0, y: -3.5 };
        assert_eq!(
            select_merge_position_heuristic(between, &members).unwrap(),
            1
        );
        assert!(select_merge_position_heuristic(between, &[]).is_err());
    }

    #[test]
    fn open_gap_examples() {
        let mut r = PlatoonRoster::new(ids(5), 0.6).unwrap();
        assert!((r.open_gap(Some(3)).unwrap().unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(r.mode(3), MemberMode::OpeningGap);
        // idempotent
        assert!((r.open_gap(Some(3)).unwrap().unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(r.open_gap(None).unwrap(), None);
        r.close_gap(3).unwrap();
        assert_eq!(r.mode(3), MemberMode::Maintaining);
        for _ in 0..200 {
            r.relax_gaps(DT, 0.3);
        }
        assert_eq!(r.effective_gap(3), 0.6);
    }

    #[test]
    fn relax_gaps_ramps() {
        let mut r = PlatoonRoster::new(ids(3), 0.6).unwrap();
        r.open_gap(Some(1)).unwrap();
        r.relax_gaps(1.0, 0.3);
        assert!((r.effective_gap(1) - 0.9).abs() < 1e-12);
        for _ in 0..10 {
            r.relax_gaps(1.0, 0.3);
        }
        assert_eq!(r.effective_gap(1), 1.5);
        assert_eq!(r.effective_gap(2), 0.6);
    }

    fn merge_setup() -> (
        PlatoonRoster,
        Vec<(KinematicState, f64)>,
        Vec<f64>,
        MapSpec,
        FuzzyRuleBase,
    ) {
        let roster = PlatoonRoster::new(ids(5), 0.6).unwrap();
        let members: Vec<(KinematicState, f64)> = (0..5)
            .map(|i| (KinematicState::new(1880.0 - 20.0 * i as f64, 0, 25.0), 5.0))
            .collect();
        let mut rear = vec![15.0; 5];
        rear[4] = f64::INFINITY;
        (
            roster,
            members,
            rear,
            MapSpec::default(),
            FuzzyRuleBase::builtin(),
        )
    }

    fn request(id: u32, station: f64, speed: f64) -> JoinRequest {
        JoinRequest {
            requester: VehicleId(id),
            state: KinematicState::new(station, -1, speed),
            length: 5.0,
            destination: 2800.0,
            route: "mainline".into(),
            algorithm: MergeAlgorithm::Heuristic,
        }
    }

    #[test]
    fn join_request_heuristic_picks_nearest() {
        let (mut roster, members, rear, map, rules) = merge_setup();
        let ctx = JoinContext {
            members: &members,
            rear_gaps: &rear,
            map: &map,
            rules: &rules,
        };
        let decision = handle_join_request(
            &mut roster,
            &request(9, 1840.0, 28.0),
            &ctx,
            MergeAlgorithm::Heuristic,
        )
        .unwrap();
        let JoinDecision::Accept(plan) = decision else {
            panic!("rejected")
        };
        assert_eq!(plan.front_vehicle_index, 2);
        assert_eq!(plan.gap_opener_index, Some(3));
        assert_eq!(roster.mode(3), MemberMode::OpeningGap);
        assert!(map.in_merge_zone(plan.meeting_station));
    }

    #[test]
    fn join_request_fuzzy_prefers_reachable_slot_ahead() {
        let (mut roster, members, rear, map, rules) = merge_setup();
        let ctx = JoinContext {
            members: &members,
            rear_gaps: &rear,
            map: &map,
            rules: &rules,
        };
        let decision = handle_join_request(
            &mut roster,
            &request(9, 1840.0, 28.0),
            &ctx,
            MergeAlgorithm::Fuzzy,
        )
        .unwrap();
        let JoinDecision::Accept(plan) = decision else {
            panic!("rejected")
        };
        assert_eq!(plan.front_vehicle_index, 0);
        assert_eq!(plan.gap_opener_index, Some(1));
    }

    #[test]
    fn join_request_rejections() {
        let (mut roster, members, rear, map, rules) = merge_setup();
        let ctx = JoinContext {
            members: &members,
            rear_gaps: &rear,
            map: &map,
            rules: &rules,
        };
        let late = handle_join_request(
            &mut roster,
            &request(9, 2350.0, 25.0),
            &ctx,
            MergeAlgorithm::Heuristic,
        )
        .unwrap();
        assert_eq!(
            late,
            JoinDecision::Reject("no feasible meeting point".into())
        );

        handle_join_request(
            &mut roster,
            &request(9, 1840.0, 25.0),
            &ctx,
            MergeAlgorithm::Heuristic,
        )
        .unwrap();
        let busy = handle_join_request(
            &mut roster,
            &request(10, 1840.0, 25.0),
            &ctx,
            MergeAlgorithm::Heuristic,
        )
        .unwrap();
        assert_eq!(busy, JoinDecision::Reject("busy".into()));

        let err = handle_join_request(
            &mut roster,
            &request(1, 1840.0, 25.0),
            &ctx,
            MergeAlgorithm::Heuristic,
        );
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn tail_join_has_no_opener() {
        let (mut roster, members, rear, map, rules) = merge_setup();
        let ctx = JoinContext {
            members: &members,
            rear_gaps: &rear,
            map: &map,
            rules: &rules,
        };
        let decision = handle_join_request(
            &mut roster,
            &request(9, 1790.0, 25.0),
            &ctx,
            MergeAlgorithm::Heuristic,
        )
        .unwrap();
        let JoinDecision::Accept(plan) = decision else {
            panic!()
        };
        assert_eq!(plan.front_vehicle_index, 4);
        assert_eq!(plan.gap_opener_index, None);
        assert!((0..5)
            .skip(1)
            .all(|i| roster.mode(i) == MemberMode::Maintaining));
    }

    fn plan() -> JoinPlan {
        JoinPlan {
            requester: VehicleId(9),
            front_vehicle_index: 1,
            front_vehicle: VehicleId(1),
            meeting_station: 2050.0,
            gap_opener_index: Some(2),
            gap_opener: Some(VehicleId(2)),
            target_lane: 0,
            algorithm: MergeAlgorithm::Heuristic,
        }
    }

    #[test]
    fn fsm_meeting_point_to_merge() {
        let map = MapSpec::default();
        let joiner = KinematicState::new(2045.0, -1, 25.0);
        let open = SlotView {
            front: Some((KinematicState::new(2065.0, 0, 25.0), 5.0)),
            rear: Some((KinematicState::new(2020.0, 0, 25.0), 5.0)),
        };
        let step = update_join_fsm(
            MemberMode::MoveToMeetingPoint,
            &joiner,
            5.0,
            &plan(),
            &open,
            &map,
            &JoinFsmParams::default(),
        )
        .unwrap();
        assert_eq!(step, JoinStep::Advance(MemberMode::JoiningMerge));

        let closed = SlotView {
            front: open.front,
            rear: Some((KinematicState::new(2039.0, 0, 25.0), 5.0)),
        };
        let step = update_join_fsm(
            MemberMode::MoveToMeetingPoint,
            &joiner,
            5.0,
            &plan(),
            &closed,
            &map,
            &JoinFsmParams::default(),
        )
        .unwrap();
        assert_eq!(step, JoinStep::Stay(MemberMode::MoveToMeetingPoint));
    }

    #[test]
    fn fsm_aborts_past_accel_lane_end() {
        let map = MapSpec::default();
        let joiner = KinematicState::new(2301.0, -1, 25.0);
        let slot = SlotView {
            front: None,
            rear: None,
        };
        for mode in [MemberMode::MoveToMeetingPoint, MemberMode::JoiningMerge] {
            let step = update_join_fsm(
                mode,
                &joiner,
                5.0,
                &plan(),
                &slot,
                &map,
                &JoinFsmParams::default(),
            )
            .unwrap();
            assert_eq!(step, JoinStep::Abort);
        }
    }

    #[test]
    fn fsm_completes_when_settled() {
        let map = MapSpec::default();
        let mut joiner = KinematicState::new(2200.0, 0, 25.0);
        joiner.lateral_offset = 0.1;
        let slot = SlotView {
            front: Some((KinematicState::new(2220.0, 0, 25.0), 5.0)),
            rear: None,
        };
        let step = update_join_fsm(
            MemberMode::JoiningMerge,
            &joiner,
            5.0,
            &plan(),
            &slot,
            &map,
            &JoinFsmParams::default(),
        )
        .unwrap();
        assert_eq!(step, JoinStep::Advance(MemberMode::Maintaining));
        joiner.lateral_offset = 0.5;
        let step = update_join_fsm(
            MemberMode::JoiningMerge,
            &joiner,
            5.0,
            &plan(),
            &slot,
            &map,
            &JoinFsmParams::default(),
        )
        .unwrap();
        assert_eq!(step, JoinStep::Stay(MemberMode::JoiningMerge));
    }

    #[test]
    fn fsm_rejects_non_joiner_modes() {
        let map = MapSpec::default();
        let s = KinematicState::new(0.0, 0, 0.0);
        let slot = SlotView {
            front: None,
            rear: None,
        };
        for mode in [
            MemberMode::LeaderDrive,
            MemberMode::Maintaining,
            MemberMode::OpeningGap,
        ] {
            assert!(update_join_fsm(
                mode,
                &s,
                5.0,
                &plan(),
                &slot,
                &map,
                &JoinFsmParams::default()
            )
            .is_err());
        }
    }

    #[test]
    fn completed_join_keeps_station_order() {
        let (mut roster, members, rear, map, rules) = merge_setup();
        let ctx = JoinContext {
            members: &members,
            rear_gaps: &rear,
            map: &map,
            rules: &rules,
        };
        handle_join_request(
            &mut roster,
            &request(9, 1840.0, 25.0),
            &ctx,
            MergeAlgorithm::Heuristic,
        )
        .unwrap();
        let at = roster.complete_join(VehicleId(9)).unwrap();
        assert_eq!(at, 3);
        assert_eq!(roster.mode(4), MemberMode::Maintaining);
        let mut stations: std::collections::BTreeMap<VehicleId, f64> = members
            .iter()
            .enumerate()
            .map(|(i, (s, _))| (VehicleId(i as u32), s.station))
            .collect();
        // joiner settled between members 2 and 3, which has opened up behind it
        stations.insert(VehicleId(9), 1815.0);
        stations.insert(VehicleId(3), 1790.0);
        stations.insert(VehicleId(4), 1770.0);
        roster.check_order(|id| stations.get(&id).copied()).unwrap();
        assert!(roster.active_join().is_none());
    }

    #[test]
    fn abort_reverts_opener() {
        let (mut roster, members, rear, map, rules) = merge_setup();
        let ctx = JoinContext {
            members: &members,
            rear_gaps: &rear,
            map: &map,
            rules: &rules,
        };
        handle_join_request(
            &mut roster,
            &request(9, 1840.0, 25.0),
            &ctx,
            MergeAlgorithm::Heuristic,
        )
        .unwrap();
        roster.abort_join().unwrap().unwrap();
        assert_eq!(roster.mode(3), MemberMode::Maintaining);
        for _ in 0..100 {
            roster.relax_gaps(DT, 0.3);
        }
        assert_eq!(roster.effective_gap(3), 0.6);
    }

    fn mode_strategy() -> impl Strategy<Value = MemberMode> {
        prop::sample::select(MemberMode::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn only_listed_edges_are_legal(from in mode_strategy(), to in mode_strategy()) {
            use MemberMode::*;
            let listed = [
                (SingleSearching, MoveToMeetingPoint),
                (MoveToMeetingPoint, JoiningMerge),
                (JoiningMerge, Maintaining),
                (MoveToMeetingPoint, SingleSearching),
                (JoiningMerge, SingleSearching),
                (Maintaining, OpeningGap),
                (OpeningGap, Maintaining),
            ];
            let expected = from == to || listed.contains(&(from, to));
            prop_assert_eq!(check_transition(from, to).is_ok(), expected);
        }

        #[test]
        fn heuristic_invariant_to_translation(xs in prop::collection::vec(-500.0f64..500.0, 1..8),
                                              rx in -500.0f64..500.0, ry in -5.0f64..5.0,
                                              dx in -1000.0f64..1000.0, dy in -10.0f64..10.0) {
            let pts: Vec<PlanePoint> = xs.iter().map(|x| PlanePoint { x: *x, y: 0.0 }).collect();
            let moved: Vec<PlanePoint> = pts.iter().map(|p| PlanePoint { x: p.x + dx, y: p.y + dy }).collect();
            let a = select_merge_position_heuristic(PlanePoint { x: rx, y: ry }, &pts).unwrap();
            let b = select_merge_position_heuristic(PlanePoint { x: rx + dx, y: ry + dy }, &moved).unwrap();
            // translation can perturb exact ties only at rounding level
            let da = (pts[a].x - rx).hypot(ry);
            let db = (pts[b].x - rx).hypot(ry);
            prop_assert!((da - db).abs() < 1e-9);
        }

        #[test]
        fn heuristic_permutation_invariant(xs in prop::collection::vec(-500.0f64..500.0, 1..8),
                                           rx in -500.0f64..500.0, seed in any::<u64>()) {
            let pts: Vec<PlanePoint> = xs.iter().map(|x| PlanePoint { x: *x, y: 0.0 }).collect();
            let mut order: Vec<usize> = (0..pts.len()).collect();
            let mut s = seed;
            for i in (1..order.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let shuffled: Vec<PlanePoint> = order.iter().map(|&i| pts[i]).collect();
            let r = PlanePoint { x: rx, y: 1.0 };
            let a = select_merge_position_heuristic(r, &pts).unwrap();
            let b = select_merge_position_heuristic(r, &shuffled).unwrap();
            prop_assert_eq!(pts[a].x, shuffled[b].x);
        }
    }
}
