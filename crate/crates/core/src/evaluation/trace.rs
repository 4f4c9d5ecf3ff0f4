//! Per-vehicle recorded traces, the event log, and their CSV forms.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::platooning::MemberMode;
use crate::world::{VehicleId, VehicleKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub station: f64,
    pub lane: i32,
    pub lateral_offset: f64,
    pub speed: f64,
    pub accel: f64,
    pub mode: Option<MemberMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrace {
    pub id: VehicleId,
    pub length: f64,
    pub kind: VehicleKind,
    pub records: Vec<TraceRecord>,
}

impl VehicleTrace {
    pub fn new(id: VehicleId, length: f64, kind: VehicleKind) -> Self {
        Self {
            id,
            length,
            kind,
            records: Vec::new(),
        }
    }

    pub fn first_step(&self) -> Option<u64> {
        self.records.first().map(|r| r.step)
    }

    /// Record at absolute `step`, if the vehicle was present.
    pub fn at(&self, step: u64) -> Option<&TraceRecord> {
        let first = self.first_step()?;
        let idx = step.checked_sub(first)?;
        self.records.get(idx as usize)
    }

    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step != last.step + 1 {
                return Err(Error::InvalidState(format!(
                    "trace for {} jumps from step {} to {}",
                    self.id, last.step, record.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn is_cav(&self) -> bool {
        self.kind == VehicleKind::Cav
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    TriggerFired,
    JoinRequested,
    JoinApproved,
    JoinRejected,
    MergeStarted,
    JoinCompleted,
    JoinAborted,
    Degraded,
    Spawned,
    Despawned,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::TriggerFired => "trigger_fired",
            EventKind::JoinRequested => "join_requested",
            EventKind::JoinApproved => "join_approved",
            EventKind::JoinRejected => "join_rejected",
            EventKind::MergeStarted => "merge_started",
            EventKind::JoinCompleted => "join_completed",
            EventKind::JoinAborted => "join_aborted",
            EventKind::Degraded => "degraded",
            EventKind::Spawned => "spawned",
            EventKind::Despawned => "despawned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub step: u64,
    pub kind: EventKind,
    pub vehicle: Option<VehicleId>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(
        &mut self,
        step: u64,
        kind: EventKind,
        vehicle: Option<VehicleId>,
        detail: impl Into<String>,
    ) {
        self.events.push(Event {
            step,
            kind,
            vehicle,
            detail: detail.into(),
        });
    }

    pub fn first(&self, kind: EventKind, vehicle: Option<VehicleId>) -> Option<&Event> {
        self.events
            .iter()
            .find(|e| e.kind == kind && (vehicle.is_none() || e.vehicle == vehicle))
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "event", "vehicle", "detail"])?;
        for e in &self.events {
            w.write_record([
                e.step.to_string(),
                e.kind.as_str().to_string(),
                e.vehicle.map(|v| v.to_string()).unwrap_or_default(),
                e.detail.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const TRACE_HEADER: [&str; 9] = [
    "step",
    "time_s",
    "id",
    "station_m",
    "lane",
    "lat_offset_m",
    "speed_mps",
    "accel_mps2",
    "mode",
];

/// Writes one trace as CSV. Floats use shortest round-trip formatting.
pub fn write_trace_csv<W: Write>(trace: &VehicleTrace, dt: f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in &trace.records {
        w.write_record([
            r.step.to_string(),
            (r.step as f64 * dt).to_string(),
            trace.id.to_string(),
            r.station.to_string(),
            r.lane.to_string(),
            r.lateral_offset.to_string(),
            r.speed.to_string(),
            r.accel.to_string(),
            r.mode.map(|m| m.as_str()).unwrap_or("").to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace written by [`write_trace_csv`]. Length and kind are not part
/// of the trace file and must be supplied.
pub fn read_trace_csv<R: Read>(input: R, length: f64, kind: VehicleKind) -> Result<VehicleTrace> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut trace: Option<VehicleTrace> = None;
    for row in rdr.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let parse = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Error::Evaluation(format!("bad {} value '{}'", TRACE_HEADER[i], field(i)))
            })
        };
        let id = VehicleId(
            field(2)
                .parse()
                .map_err(|_| Error::Evaluation(format!("bad id '{}'", field(2))))?,
        );
        let t = trace.get_or_insert_with(|| VehicleTrace::new(id, length, kind));
        let mode = match field(8) {
            "" => None,
            s => Some(
                MemberMode::parse(s).ok_or_else(|| Error::Evaluation(format!("bad mode '{s}'")))?,
            ),
        };
        t.push(TraceRecord {
            step: field(0)
                .parse()
                .map_err(|_| Error::Evaluation(format!("bad step '{}'", field(0))))?,
            station: parse(3)?,
            lane: field(4)
                .parse()
                .map_err(|_| Error::Evaluation(format!("bad lane '{}'", field(4))))?,
            lateral_offset: parse(5)?,
            speed: parse(6)?,
            accel: parse(7)?,
            mode,
        })?;
    }
    trace.ok_or_else(|| Error::Evaluation("empty trace file".into()))
}
