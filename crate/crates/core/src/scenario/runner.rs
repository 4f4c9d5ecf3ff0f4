//! The fixed-step simulation loop: sense, share, plan, control, advance.

use std::collections::{BTreeMap, BTreeSet};

use super::config::*;
use super::profile::SpeedProfile;
use crate::error::{Error, Result};
use crate::evaluation::trace::{EventKind, EventLog, TraceRecord, VehicleTrace};
use crate::longitudinal::{
    desired_accel, idm_accel, idm_free_accel, leader_following_speed, plan_trajectory,
    BehaviorParams, FollowingLaw, IdmParams, Trajectory, DEFAULT_HORIZON_STEPS,
};
use crate::platooning::fuzzy::FuzzyRuleBase;
use crate::platooning::{
    check_transition, handle_join_request, step_follower, update_join_fsm, JoinContext,
    JoinDecision, JoinFsmParams, JoinPlan, JoinRequest, JoinStep, MemberMode, MergeAlgorithm,
    PlatoonRoster, PredecessorSnapshot, SlotView,
};
use crate::v2x::{
    splitmix64, JoinResponse, Mailboxes, MessageBus, Payload, Recipients, StatusPayload, Transport,
    V2XMessage,
};
use crate::world::{
    bumper_gap, step_world, KinematicState, LaneCommand, VehicleBody, VehicleId, VehicleKind,
    WorldState, DEFAULT_LANE_CHANGE_DURATION,
};

/// Steps of history included in an invariant-violation dump.
const DUMP_STEPS: u64 = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub name: String,
    pub dt: f64,
    pub total_steps: u64,
    /// One trace per vehicle that ever existed, ordered by id.
    pub traces: Vec<VehicleTrace>,
    pub events: EventLog,
    /// Platoon membership at the end of the run.
    pub roster: Vec<VehicleId>,
}

impl RunOutput {
    pub fn trace(&self, id: VehicleId) -> Option<&VehicleTrace> {
        self.traces.iter().find(|t| t.id == id)
    }
}

/// Runs a scenario over the lossy message bus described by its channel model.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput> {
    run_with_bus(config).map(|(out, _)| out)
}

/// Like [`run`], also returning the bus so its delivery log can be exported.
pub fn run_with_bus(config: &ScenarioConfig) -> Result<(RunOutput, MessageBus)> {
    run_with(config, MessageBus::new(config.channel)?)
}

pub fn run_with<T: Transport>(config: &ScenarioConfig, transport: T) -> Result<(RunOutput, T)> {
    config.validate()?;
    let mut sim = Sim::new(config, transport)?;
    for _ in 0..config.sim.total_steps {
        sim.step()?;
    }
    Ok(sim.finish())
}

#[derive(Debug, Clone)]
struct Single {
    mode: MemberMode,
    plan: Option<JoinPlan>,
    algorithm: MergeAlgorithm,
    destination: f64,
    requested: bool,
}

#[derive(Debug, Clone)]
enum Role {
    Member,
    Single(Single),
    Human {
        /// Profile and the simulation time its t = 0 maps to.
        profile: Option<(SpeedProfile, f64)>,
        idm: IdmParams,
    },
}

#[derive(Debug, Clone)]
struct Agent {
    length: f64,
    kind: VehicleKind,
    behavior: BehaviorParams,
    max_speed: f64,
    last_target: f64,
    role: Role,
}

/// What one CAV has heard from the others, with the step each item was sent.
#[derive(Debug, Clone, Default)]
struct Knowledge {
    status: BTreeMap<VehicleId, (StatusPayload, u64)>,
    plans: BTreeMap<VehicleId, (Trajectory, u64)>,
}

#[derive(Debug, Clone)]
struct Background {
    spec: BackgroundSpec,
    lanes: Vec<i32>,
    seed: u64,
    next_time: Vec<f64>,
    next_draw: Vec<u64>,
    next_id: u32,
    alive: BTreeSet<VehicleId>,
}

/// Injection draws use a stream disjoint from the initial fill.
const INJECT_STREAM: u64 = 1 << 32;

impl Background {
    fn mean_headway(&self) -> f64 {
        3600.0 / self.spec.flow_rate
    }

    fn headway(&self, lane_index: usize, draw: u64) -> f64 {
        jittered_headway(
            self.seed,
            lane_index,
            draw,
            self.mean_headway(),
            self.spec.jitter,
        )
    }
}

/// One jittered headway from the seeded stream of `lane_index`.
pub fn jittered_headway(seed: u64, lane_index: usize, draw: u64, mean: f64, jitter: f64) -> f64 {
    let key = seed ^ splitmix64(lane_index as u64 ^ 0x5EED_0000_0000_0000) ^ splitmix64(draw);
    let u = (splitmix64(key) >> 11) as f64 / (1u64 << 53) as f64;
    mean * (1.0 + jitter * (2.0 * u - 1.0))
}

/// Spawn times of the first `count` vehicles on one lane, starting from t = 0.
pub fn spawn_schedule(
    seed: u64,
    lane_index: usize,
    flow_rate: f64,
    jitter: f64,
    count: usize,
) -> Vec<f64> {
    let mean = 3600.0 / flow_rate;
    let mut t = 0.0;
    (0..count as u64)
        .map(|j| {
            t += jittered_headway(seed, lane_index, INJECT_STREAM + j, mean, jitter);
            t
        })
        .collect()
}

struct Sim<'a, T: Transport> {
    cfg: &'a ScenarioConfig,
    world: WorldState,
    bus: T,
    roster: Option<PlatoonRoster>,
    following: FollowingLaw,
    gap_rate: f64,
    agents: BTreeMap<VehicleId, Agent>,
    knowledge: BTreeMap<VehicleId, Knowledge>,
    traces: BTreeMap<VehicleId, VehicleTrace>,
    events: EventLog,
    fired: Vec<bool>,
    background: Option<Background>,
    rules: FuzzyRuleBase,
    pending_requests: Vec<VehicleId>,
    lane_commands: BTreeMap<VehicleId, LaneCommand>,
    degraded: BTreeSet<VehicleId>,
}

impl<'a, T: Transport> Sim<'a, T> {
    fn new(cfg: &'a ScenarioConfig, bus: T) -> Result<Self> {
        let rules = match &cfg.fuzzy_rules {
            Some(path) => FuzzyRuleBase::load(path)?,
            None => FuzzyRuleBase::builtin(),
        };
        let mut sim = Sim {
            cfg,
            world: WorldState::new(cfg.map.clone(), cfg.sim.dt)?,
            bus,
            roster: None,
            following: FollowingLaw::default(),
            gap_rate: 0.3,
            agents: BTreeMap::new(),
            knowledge: BTreeMap::new(),
            traces: BTreeMap::new(),
            events: EventLog::default(),
            fired: vec![false; cfg.events.len()],
            background: None,
            rules,
            pending_requests: Vec::new(),
            lane_commands: BTreeMap::new(),
            degraded: BTreeSet::new(),
        };

        if let Some(p) = &cfg.platoon {
            let ids = p.member_ids();
            // roster first so the initial records carry member modes
            sim.roster = Some(PlatoonRoster::new(ids.clone(), p.desired_time_gap)?);
            for (id, station) in ids.iter().zip(p.member_stations()) {
                let agent = Agent {
                    length: p.length,
                    kind: VehicleKind::Cav,
                    behavior: p.behavior,
                    max_speed: p.max_speed,
                    last_target: p.speed,
                    role: Role::Member,
                };
                sim.add_vehicle(*id, agent, KinematicState::new(station, p.lane, p.speed))?;
            }
            sim.following = p.following;
            sim.gap_rate = p.gap_rate;
        }
        for c in &cfg.cavs {
            let agent = Agent {
                length: c.length,
                kind: VehicleKind::Cav,
                behavior: c.behavior,
                max_speed: c.max_speed,
                last_target: c.speed,
                role: Role::Single(Single {
                    mode: MemberMode::SingleSearching,
                    plan: None,
                    algorithm: c.merge_algorithm,
                    destination: c.destination,
                    requested: false,
                }),
            };
            sim.add_vehicle(c.id, agent, KinematicState::new(c.station, c.lane, c.speed))?;
        }
        for h in &cfg.human_vehicles {
            let profile = match &h.profile {
                Some(name) => Some((sim.profile(name)?.clone(), 0.0)),
                None => None,
            };
            let speed = profile.as_ref().map_or(h.speed, |(p, _)| p.speed_at(0.0));
            let agent = Agent {
                length: h.length,
                kind: VehicleKind::HumanDriven,
                behavior: BehaviorParams::default(),
                max_speed: f64::INFINITY,
                last_target: speed,
                role: Role::Human {
                    profile,
                    idm: h.idm,
                },
            };
            sim.add_vehicle(h.id, agent, KinematicState::new(h.station, h.lane, speed))?;
        }
        if let Some(b) = &cfg.background {
            sim.init_background(b)?;
        }
        Ok(sim)
    }

    fn profile(&self, name: &str) -> Result<&SpeedProfile> {
        self.cfg
            .profile(name)
            .ok_or_else(|| Error::Config(format!("profile '{name}' is not loaded")))
    }

    fn add_vehicle(&mut self, id: VehicleId, agent: Agent, state: KinematicState) -> Result<()> {
        self.world.spawn(
            VehicleBody {
                id,
                length: agent.length,
                kind: agent.kind,
            },
            state,
        )?;
        if agent.kind == VehicleKind::Cav {
            self.bus.register(id);
            self.knowledge.insert(id, Knowledge::default());
        }
        let mut trace = VehicleTrace::new(id, agent.length, agent.kind);
        let mode = self.mode_of(id, &agent);
        trace.push(record(self.world.clock.step_index, &state, mode))?;
        self.traces.insert(id, trace);
        self.agents.insert(id, agent);
        Ok(())
    }

    fn init_background(&mut self, spec: &BackgroundSpec) -> Result<()> {
        let lanes: Vec<i32> = if spec.lanes.is_empty() {
            (0..self.cfg.map.mainline_lanes as i32).collect()
        } else {
            spec.lanes.clone()
        };
        let mut bg = Background {
            spec: spec.clone(),
            seed: self.cfg.sim.seed,
            next_time: vec![f64::INFINITY; lanes.len()],
            next_draw: vec![INJECT_STREAM; lanes.len()],
            next_id: spec.first_id,
            alive: BTreeSet::new(),
            lanes,
        };
        if spec.flow_rate > 0.0 {
            for li in 0..bg.lanes.len() {
                bg.next_time[li] = bg.headway(li, INJECT_STREAM);
                bg.next_draw[li] = INJECT_STREAM + 1;
            }
            // fill the window as if the flow had been running: walk upstream from fill_end
            let v0 = spec.idm.desired_speed;
            let explicit = self.cfg.explicit_spawns();
            let mut candidates = Vec::new();
            for (li, &lane) in bg.lanes.iter().enumerate() {
                let mut p = spec.fill_end;
                let mut draw = 0;
                let mut rank = 0usize;
                while p >= spec.fill_start && spec.fill_end > spec.fill_start {
                    let clear = explicit
                        .iter()
                        .filter(|s| s.1 == lane)
                        .all(|s| (s.2 - p).abs() >= spec.clearance + spec.length.max(s.3));
                    if clear {
                        candidates.push((rank, li, p));
                        rank += 1;
                    }
                    p -= v0 * bg.headway(li, draw);
                    draw += 1;
                }
            }
            candidates.sort_by_key(|c| (c.0, c.1));
            for (_, li, p) in candidates.into_iter().take(spec.max_vehicles as usize) {
                let id = VehicleId(bg.next_id);
                bg.next_id += 1;
                bg.alive.insert(id);
                self.add_vehicle(
                    id,
                    background_agent(spec),
                    KinematicState::new(p, bg.lanes[li], v0),
                )?;
            }
        }
        self.background = Some(bg);
        Ok(())
    }

    fn mode_of(&self, id: VehicleId, agent: &Agent) -> Option<MemberMode> {
        match &agent.role {
            Role::Member => {
                let roster = self.roster.as_ref()?;
                roster.index_of(id).map(|i| roster.mode(i))
            }
            Role::Single(s) => Some(s.mode),
            Role::Human { .. } => None,
        }
    }

    fn state(&self, id: VehicleId) -> Result<KinematicState> {
        self.world
            .get(id)
            .map(|v| v.state)
            .ok_or_else(|| Error::InvalidState(format!("vehicle {id} is not on the road")))
    }

    fn step(&mut self) -> Result<()> {
        let k = self.world.clock.step_index;
        let t = self.world.clock.time();
        self.lane_commands.clear();
        self.fire_triggers(k, t)?;
        self.inject_background(k, t)?;
        self.share(k)?;
        let boxes = self.bus.deliver(k);
        self.receive(k, boxes)?;
        self.send_requests(k)?;
        self.update_joiners(k)?;
        let accels = self.control(k, t)?;
        self.world = step_world(&self.world, &accels, &self.lane_commands)?;
        if let Some(r) = &mut self.roster {
            r.relax_gaps(self.cfg.sim.dt, self.gap_rate);
        }
        self.despawn()?;
        self.record_all()?;
        self.check_invariants()
    }

    fn fire_triggers(&mut self, k: u64, t: f64) -> Result<()> {
        let eps = self.cfg.sim.dt * 1e-6;
        for (i, ev) in self.cfg.events.iter().enumerate() {
            if self.fired[i] {
                continue;
            }
            let due = match &ev.when {
                TriggerCondition::AtTime(at) => t + eps >= *at,
                TriggerCondition::VehicleAtStation { id, station } => self
                    .world
                    .get(*id)
                    .is_some_and(|v| v.state.station >= *station),
            };
            if !due {
                continue;
            }
            self.fired[i] = true;
            let target = ev.action.vehicle();
            let detail = match &ev.action {
                EventAction::SetTargetSpeed { id, speed } => {
                    if let Some(a) = self.agents.get_mut(id) {
                        a.behavior.target_speed = *speed;
                    }
                    format!("set_target_speed {speed}")
                }
                EventAction::SetSpeedProfile { id, profile } => {
                    let p = self.profile(profile)?.clone();
                    match self.agents.get_mut(id).map(|a| &mut a.role) {
                        Some(Role::Human { profile: slot, .. }) => *slot = Some((p, t)),
                        _ => {
                            return Err(Error::Config(format!(
                                "events[{i}]: vehicle {id} is not human-driven"
                            )))
                        }
                    }
                    format!("set_speed_profile {profile}")
                }
                EventAction::EmitJoinRequest { id } => {
                    self.pending_requests.push(*id);
                    "emit_join_request".to_string()
                }
            };
            self.events.push(
                k,
                EventKind::TriggerFired,
                Some(target),
                format!("events[{i}] {detail}"),
            );
        }
        Ok(())
    }

    fn inject_background(&mut self, k: u64, t: f64) -> Result<()> {
        let Some(mut bg) = self.background.take() else {
            return Ok(());
        };
        let eps = self.cfg.sim.dt * 1e-6;
        let spec = bg.spec.clone();
        let v0 = spec.idm.desired_speed;
        for li in 0..bg.lanes.len() {
            if t + eps < bg.next_time[li] {
                continue;
            }
            let lane = bg.lanes[li];
            if bg.alive.len() >= spec.max_vehicles as usize {
                // window is full: this arrival never enters
                bg.next_time[li] += bg.headway(li, bg.next_draw[li]);
                bg.next_draw[li] += 1;
                continue;
            }
            let needed = spec.idm.min_gap + 0.5 * v0 * spec.idm.desired_headway;
            let clear = self.world.vehicles.iter().all(|v| {
                v.state.lane != lane
                    || v.state.station < spec.entry_station
                    || v.state.station - v.body.length - spec.entry_station >= needed
            });
            if !clear {
                continue;
            }
            let id = VehicleId(bg.next_id);
            bg.next_id += 1;
            bg.alive.insert(id);
            self.add_vehicle(
                id,
                background_agent(&spec),
                KinematicState::new(spec.entry_station, lane, v0),
            )?;
            self.events
                .push(k, EventKind::Spawned, Some(id), format!("lane {lane}"));
            bg.next_time[li] += bg.headway(li, bg.next_draw[li]);
            bg.next_draw[li] += 1;
        }
        self.background = Some(bg);
        Ok(())
    }

    fn share(&mut self, k: u64) -> Result<()> {
        let dt = self.cfg.sim.dt;
        let mut outgoing = Vec::new();
        for v in &self.world.vehicles {
            let id = v.body.id;
            let agent = &self.agents[&id];
            if agent.kind != VehicleKind::Cav {
                continue;
            }
            let status = StatusPayload {
                state: v.state,
                length: agent.length,
                mode: self.mode_of(id, agent),
            };
            let curve = v.lane_change.as_ref().map(|lc| &lc.curve);
            let plan = plan_trajectory(
                &v.state,
                &agent.behavior.with_target(agent.last_target),
                DEFAULT_HORIZON_STEPS,
                dt,
                curve,
            )?;
            outgoing.push(V2XMessage::new(
                id,
                Recipients::Broadcast,
                Payload::Status(status),
                k,
            ));
            outgoing.push(V2XMessage::new(
                id,
                Recipients::Broadcast,
                Payload::PlannedTrajectory(plan),
                k,
            ));
        }
        for m in outgoing {
            self.bus.send(m)?;
        }
        Ok(())
    }

    fn receive(&mut self, k: u64, boxes: Mailboxes) -> Result<()> {
        let mut protocol = Vec::new();
        for (recipient, envelopes) in boxes {
            for env in envelopes {
                let sender = env.message.sender;
                let tx = env.message.tx_step;
                let Some(know) = self.knowledge.get_mut(&recipient) else {
                    continue;
                };
                match env.message.payload {
                    Payload::Status(s) => {
                        if know.status.get(&sender).is_none_or(|(_, old)| *old <= tx) {
                            know.status.insert(sender, (s, tx));
                        }
                    }
                    Payload::PlannedTrajectory(p) => {
                        if know.plans.get(&sender).is_none_or(|(_, old)| *old <= tx) {
                            know.plans.insert(sender, (p, tx));
                        }
                    }
                    Payload::JoinRequest(req) => {
                        protocol.push((recipient, Payload::JoinRequest(req)))
                    }
                    Payload::JoinResponse(resp) => {
                        protocol.push((recipient, Payload::JoinResponse(resp)))
                    }
                    Payload::GapOpenCommand { .. } => {}
                }
            }
        }
        for (recipient, payload) in protocol {
            match payload {
                Payload::JoinRequest(req) => self.handle_request(k, recipient, req)?,
                Payload::JoinResponse(resp) => self.handle_response(k, recipient, resp)?,
                _ => unreachable!("only protocol payloads are queued"),
            }
        }
        Ok(())
    }

    fn handle_request(&mut self, k: u64, leader: VehicleId, req: JoinRequest) -> Result<()> {
        let Some(roster) = &self.roster else {
            return Ok(());
        };
        if roster.leader() != leader {
            return Ok(());
        }
        let know = &self.knowledge[&leader];
        let mut members = Vec::with_capacity(roster.len());
        let mut missing = None;
        for (i, id) in roster.members().iter().enumerate() {
            if i == 0 {
                members.push((self.state(*id)?, self.agents[id].length));
            } else if let Some((s, _)) = know.status.get(id) {
                members.push((s.state, s.length));
            } else {
                missing = Some(*id);
            }
        }
        let decision = if let Some(id) = missing {
            JoinDecision::Reject(format!("no status from member {id}"))
        } else {
            let mut rear_gaps: Vec<f64> = members
                .windows(2)
                .map(|w| w[0].0.station - w[0].1 - w[1].0.station)
                .collect();
            let (tail, tail_len) = members[members.len() - 1];
            let tail_id = *roster.members().last().expect("roster is never empty");
            rear_gaps.push(
                self.world
                    .nearest_behind(tail.lane, tail.station, Some(tail_id))
                    .map_or(f64::INFINITY, |v| tail.station - tail_len - v.state.station),
            );
            let ctx = JoinContext {
                members: &members,
                rear_gaps: &rear_gaps,
                map: &self.cfg.map,
                rules: &self.rules,
            };
            let roster = self.roster.as_mut().expect("checked above");
            handle_join_request(roster, &req, &ctx, req.algorithm)?
        };
        match decision {
            JoinDecision::Accept(plan) => {
                self.events.push(
                    k,
                    EventKind::JoinApproved,
                    Some(req.requester),
                    format!(
                        "{} front={} opener={} meeting={:.1}",
                        plan.algorithm.as_str(),
                        plan.front_vehicle,
                        plan.gap_opener
                            .map_or("none".to_string(), |o| o.to_string()),
                        plan.meeting_station
                    ),
                );
                if let Some(opener) = plan.gap_opener {
                    self.bus.send(V2XMessage::new(
                        leader,
                        Recipients::To(vec![opener]),
                        Payload::GapOpenCommand {
                            joiner: req.requester,
                            open: true,
                        },
                        k,
                    ))?;
                }
                self.bus.send(V2XMessage::new(
                    leader,
                    Recipients::To(vec![req.requester]),
                    Payload::JoinResponse(JoinResponse::Accept(plan)),
                    k,
                ))?;
            }
            JoinDecision::Reject(reason) => {
                self.events.push(
                    k,
                    EventKind::JoinRejected,
                    Some(req.requester),
                    reason.clone(),
                );
                self.bus.send(V2XMessage::new(
                    leader,
                    Recipients::To(vec![req.requester]),
                    Payload::JoinResponse(JoinResponse::Reject(reason)),
                    k,
                ))?;
            }
        }
        Ok(())
    }

    fn handle_response(&mut self, _k: u64, id: VehicleId, resp: JoinResponse) -> Result<()> {
        let state = self.state(id)?;
        let map = self.cfg.map.clone();
        let Some(agent) = self.agents.get_mut(&id) else {
            return Ok(());
        };
        let length = agent.length;
        let Role::Single(single) = &mut agent.role else {
            return Ok(());
        };
        single.requested = false;
        if let JoinResponse::Accept(plan) = resp {
            if single.mode != MemberMode::SingleSearching || plan.requester != id {
                return Ok(());
            }
            let slot = SlotView {
                front: None,
                rear: None,
            };
            let params = JoinFsmParams::default();
            if let JoinStep::Advance(next) =
                update_join_fsm(single.mode, &state, length, &plan, &slot, &map, &params)?
            {
                check_transition(single.mode, next)?;
                single.mode = next;
                single.plan = Some(plan);
            }
        }
        Ok(())
    }

    fn send_requests(&mut self, k: u64) -> Result<()> {
        let Some(leader) = self.roster.as_ref().map(|r| r.leader()) else {
            self.pending_requests.clear();
            return Ok(());
        };
        for id in std::mem::take(&mut self.pending_requests) {
            let state = self.state(id)?;
            let Some(agent) = self.agents.get_mut(&id) else {
                continue;
            };
            let length = agent.length;
            let Role::Single(single) = &mut agent.role else {
                continue;
            };
            if single.mode != MemberMode::SingleSearching
                || single.plan.is_some()
                || single.requested
            {
                continue;
            }
            single.requested = true;
            let req = JoinRequest {
                requester: id,
                state,
                length,
                destination: single.destination,
                route: format!("lane {} to station {}", state.lane, single.destination),
                algorithm: single.algorithm,
            };
            self.events.push(
                k,
                EventKind::JoinRequested,
                Some(id),
                single.algorithm.as_str().to_string(),
            );
            self.bus.send(V2XMessage::new(
                id,
                Recipients::To(vec![leader]),
                Payload::JoinRequest(req),
                k,
            ))?;
        }
        Ok(())
    }

    fn slot_view(&self, id: VehicleId, state: &KinematicState, lane: i32) -> SlotView {
        let pick = |v: &crate::world::Vehicle| (v.state, v.body.length);
        SlotView {
            front: self
                .world
                .nearest_ahead(lane, state.station, Some(id))
                .map(pick),
            rear: self
                .world
                .nearest_behind(lane, state.station, Some(id))
                .map(pick),
        }
    }

    fn update_joiners(&mut self, k: u64) -> Result<()> {
        let joiners: Vec<VehicleId> = self
            .agents
            .iter()
            .filter(|(_, a)| matches!(&a.role, Role::Single(s) if s.plan.is_some()))
            .map(|(id, _)| *id)
            .collect();
        let params = JoinFsmParams {
            time_gap: self.roster.as_ref().map_or(0.6, |r| r.desired_time_gap()),
            ..JoinFsmParams::default()
        };
        for id in joiners {
            let state = self.state(id)?;
            let agent = &self.agents[&id];
            let Role::Single(single) = &agent.role else {
                continue;
            };
            let plan = single.plan.clone().expect("filtered on plan");
            let slot = self.slot_view(id, &state, plan.target_lane);
            let step = update_join_fsm(
                single.mode,
                &state,
                agent.length,
                &plan,
                &slot,
                &self.cfg.map,
                &params,
            )?;
            let mode = single.mode;
            match step {
                JoinStep::Stay(_) => {}
                JoinStep::Advance(MemberMode::JoiningMerge) => {
                    check_transition(mode, MemberMode::JoiningMerge)?;
                    self.set_single_mode(id, MemberMode::JoiningMerge);
                    self.lane_commands.insert(
                        id,
                        LaneCommand::Change {
                            to_lane: plan.target_lane,
                            duration: DEFAULT_LANE_CHANGE_DURATION,
                        },
                    );
                    self.events.push(
                        k,
                        EventKind::MergeStarted,
                        Some(id),
                        format!("lane {}", plan.target_lane),
                    );
                }
                JoinStep::Advance(MemberMode::Maintaining) => {
                    check_transition(mode, MemberMode::Maintaining)?;
                    let roster = self.roster.as_mut().ok_or_else(|| {
                        Error::Protocol("join completed without a platoon".into())
                    })?;
                    let index = roster.complete_join(id)?;
                    self.agents.get_mut(&id).expect("joiner exists").role = Role::Member;
                    self.events.push(
                        k,
                        EventKind::JoinCompleted,
                        Some(id),
                        format!("index {index}"),
                    );
                }
                JoinStep::Advance(other) => {
                    return Err(Error::Protocol(format!(
                        "unexpected joiner advance to {}",
                        other.as_str()
                    )));
                }
                JoinStep::Abort => {
                    check_transition(mode, MemberMode::SingleSearching)?;
                    if let Some(roster) = &mut self.roster {
                        roster.abort_join()?;
                    }
                    if let Role::Single(s) =
                        &mut self.agents.get_mut(&id).expect("joiner exists").role
                    {
                        s.mode = MemberMode::SingleSearching;
                        s.plan = None;
                    }
                    if let Some(opener) = plan.gap_opener {
                        if self.world.get(opener).is_some() {
                            self.bus.send(V2XMessage::new(
                                id,
                                Recipients::To(vec![opener]),
                                Payload::GapOpenCommand {
                                    joiner: id,
                                    open: false,
                                },
                                k,
                            ))?;
                        }
                    }
                    self.events.push(
                        k,
                        EventKind::JoinAborted,
                        Some(id),
                        "passed the end of the merge zone",
                    );
                }
            }
        }
        Ok(())
    }

    fn set_single_mode(&mut self, id: VehicleId, mode: MemberMode) {
        if let Some(Agent {
            role: Role::Single(s),
            ..
        }) = self.agents.get_mut(&id)
        {
            s.mode = mode;
        }
    }

    /// Bumper gap and speed of the nearest vehicle ahead in the same lane.
    fn lane_ahead(&self, id: VehicleId) -> Option<(VehicleId, f64, f64)> {
        let me = self.world.get(id)?;
        let lead = self.world.lane_leader(id)?;
        let gap = bumper_gap((&me.body, &me.state), (&lead.body, &lead.state));
        Some((lead.body.id, gap, lead.state.speed))
    }

    fn cruise_target(&self, id: VehicleId, agent: &Agent, state: &KinematicState) -> f64 {
        let cruise = agent.behavior.target_speed.min(agent.max_speed);
        match self.lane_ahead(id) {
            Some((_, gap, lead_speed)) => cruise.min(leader_following_speed(
                gap,
                lead_speed,
                state.speed,
                &self.following,
                cruise,
            )),
            None => cruise,
        }
    }

    fn control(&mut self, k: u64, t: f64) -> Result<BTreeMap<VehicleId, f64>> {
        let dt = self.cfg.sim.dt;
        let mut accels = BTreeMap::new();
        let mut targets = Vec::new();
        let mut newly_degraded = Vec::new();
        let mut recovered = Vec::new();
        for v in &self.world.vehicles {
            let id = v.body.id;
            let state = v.state;
            let agent = &self.agents[&id];
            let target = match &agent.role {
                Role::Human { profile, idm } => {
                    let accel = match profile {
                        Some((p, start)) => (p.speed_at(t + dt - start) - state.speed) / dt,
                        None => match self.lane_ahead(id) {
                            Some((_, gap, lead_speed)) => {
                                idm_accel(gap, state.speed, state.speed - lead_speed, idm)
                            }
                            None => idm_free_accel(state.speed, idm),
                        },
                    };
                    accels.insert(id, accel);
                    continue;
                }
                Role::Member => {
                    let roster = self.roster.as_ref().expect("members imply a roster");
                    let index = roster.index_of(id).ok_or_else(|| {
                        Error::InvalidState(format!("member {id} missing from roster"))
                    })?;
                    if index == 0 {
                        self.cruise_target(id, agent, &state)
                    } else {
                        let (target, degraded) =
                            self.follower_target(k, id, index, agent, &state)?;
                        if degraded && !self.degraded.contains(&id) {
                            newly_degraded.push(id);
                        } else if !degraded && self.degraded.contains(&id) {
                            recovered.push(id);
                        }
                        target
                    }
                }
                Role::Single(single) => match (&single.plan, single.mode) {
                    (Some(plan), MemberMode::MoveToMeetingPoint | MemberMode::JoiningMerge) => {
                        self.joiner_target(k, id, agent, &state, plan)
                    }
                    _ => self.cruise_target(id, agent, &state),
                },
            };
            let target = target.clamp(0.0, agent.max_speed);
            accels.insert(
                id,
                desired_accel(&agent.behavior.with_target(target), state.speed, dt),
            );
            targets.push((id, target));
        }
        for (id, target) in targets {
            self.agents.get_mut(&id).expect("agent exists").last_target = target;
        }
        for id in newly_degraded {
            self.degraded.insert(id);
            self.events.push(
                k,
                EventKind::Degraded,
                Some(id),
                "predecessor data stale; holding last target",
            );
        }
        for id in recovered {
            self.degraded.remove(&id);
        }
        Ok(accels)
    }

    fn follower_target(
        &self,
        k: u64,
        id: VehicleId,
        index: usize,
        agent: &Agent,
        state: &KinematicState,
    ) -> Result<(f64, bool)> {
        let dt = self.cfg.sim.dt;
        let roster = self.roster.as_ref().expect("members imply a roster");
        let pred = roster.members()[index - 1];
        let know = &self.knowledge[&id];
        let snapshot = match (know.plans.get(&pred), know.status.get(&pred)) {
            (Some((plan, tx)), Some((status, _))) => {
                let age = k.saturating_sub(*tx);
                let point = plan
                    .at_step(1 + age as usize)
                    .or_else(|| plan.points.last());
                point.map(|p| PredecessorSnapshot {
                    next_station: p.station,
                    length: status.length,
                    age_steps: age,
                })
            }
            _ => None,
        };
        let cmd = step_follower(
            roster,
            index,
            snapshot.as_ref(),
            state,
            dt,
            agent.last_target,
        )?;
        let mut target = cmd.target_speed;

        // anything that cut in between us and the predecessor is regulated against directly
        if let Some(lead) = self.world.lane_leader(id) {
            if lead.body.id != pred {
                let next = lead.state.station + lead.state.speed * dt;
                let pos = crate::platooning::follower_target_position(
                    next,
                    lead.body.length,
                    state.station,
                    roster.desired_time_gap(),
                    dt,
                );
                target = target.min(crate::platooning::follower_desired_speed(
                    pos,
                    state.station,
                    dt,
                ));
            }
        }
        Ok((target, cmd.degraded))
    }

    fn joiner_target(
        &self,
        k: u64,
        id: VehicleId,
        agent: &Agent,
        state: &KinematicState,
        plan: &JoinPlan,
    ) -> f64 {
        let dt = self.cfg.sim.dt;
        let time_gap = self.roster.as_ref().map_or(0.6, |r| r.desired_time_gap());
        let law = FollowingLaw {
            gain: self.following.gain,
            headway: time_gap,
        };
        let mut target = match self.knowledge[&id].status.get(&plan.front_vehicle) {
            Some((front, tx)) => {
                let age = k.saturating_sub(*tx) as f64;
                let station = front.state.station + front.state.speed * age * dt;
                let gap = station - front.length - state.station;
                leader_following_speed(gap, front.state.speed, state.speed, &law, agent.max_speed)
            }
            None => agent.behavior.target_speed,
        };
        if let Some((lead, gap, lead_speed)) = self.lane_ahead(id) {
            if lead != plan.front_vehicle {
                target = target.min(leader_following_speed(
                    gap,
                    lead_speed,
                    state.speed,
                    &law,
                    agent.max_speed,
                ));
            }
        }
        target
    }

    fn despawn(&mut self) -> Result<()> {
        let end = self.cfg.map.mainline_length;
        let k = self.world.clock.step_index;
        let leaving: Vec<VehicleId> = self
            .world
            .vehicles
            .iter()
            .filter(|v| v.state.station > end)
            .filter(|v| match &self.agents[&v.body.id].role {
                Role::Member => false,
                Role::Single(s) => s.plan.is_none(),
                Role::Human { .. } => true,
            })
            .map(|v| v.body.id)
            .collect();
        for id in leaving {
            self.world.remove(id);
            if self.agents[&id].kind == VehicleKind::Cav {
                self.bus.unregister(id);
            }
            if let Some(bg) = &mut self.background {
                bg.alive.remove(&id);
            }
            self.events
                .push(k, EventKind::Despawned, Some(id), "left the map");
        }
        Ok(())
    }

    fn record_all(&mut self) -> Result<()> {
        let step = self.world.clock.step_index;
        for v in &self.world.vehicles {
            let id = v.body.id;
            let mode = self.mode_of(id, &self.agents[&id]);
            self.traces
                .get_mut(&id)
                .expect("every vehicle has a trace")
                .push(record(step, &v.state, mode))?;
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<()> {
        let step = self.world.clock.step_index;
        if let Some((behind, ahead, gap)) = self.world.find_overlap() {
            return Err(self.violation(
                step,
                format!("vehicles {behind} and {ahead} overlap (gap {gap:.3} m)"),
            ));
        }
        if let Some(roster) = &self.roster {
            if let Err(e) = roster.check_order(|id| self.world.get(id).map(|v| v.state.station)) {
                return Err(self.violation(step, e.to_string()));
            }
        }
        Ok(())
    }

    fn violation(&self, step: u64, message: String) -> Error {
        let from = step.saturating_sub(DUMP_STEPS - 1);
        let mut dump = String::from("step,id,lane,station_m,speed_mps,accel_mps2,mode\n");
        for s in from..=step {
            for trace in self.traces.values() {
                if let Some(r) = trace.at(s) {
                    dump.push_str(&format!(
                        "{s},{},{},{:.3},{:.3},{:.3},{}\n",
                        trace.id,
                        r.lane,
                        r.station,
                        r.speed,
                        r.accel,
                        r.mode.map_or("", |m| m.as_str())
                    ));
                }
            }
        }
        Error::Invariant {
            step,
            message,
            dump,
        }
    }

    fn finish(self) -> (RunOutput, T) {
        let out = RunOutput {
            name: self.cfg.name.clone(),
            dt: self.cfg.sim.dt,
            total_steps: self.cfg.sim.total_steps,
            traces: self.traces.into_values().collect(),
            events: self.events,
            roster: self
                .roster
                .map(|r| r.members().to_vec())
                .unwrap_or_default(),
        };
        (out, self.bus)
    }
}

fn background_agent(spec: &BackgroundSpec) -> Agent {
    Agent {
        length: spec.length,
        kind: VehicleKind::HumanDriven,
        behavior: BehaviorParams::default(),
        max_speed: f64::INFINITY,
        last_target: spec.idm.desired_speed,
        role: Role::Human {
            profile: None,
            idm: spec.idm,
        },
    }
}

fn record(step: u64, s: &KinematicState, mode: Option<MemberMode>) -> TraceRecord {
    TraceRecord {
        step,
        station: s.station,
        lane: s.lane,
        lateral_offset: s.lateral_offset,
        speed: s.speed,
        accel: s.acceleration,
        mode,
    }
}
