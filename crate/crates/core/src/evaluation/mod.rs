//! Safety, stability and efficiency metrics computed from recorded traces.
//!
//! All standard deviations are population (divide by N) statistics. TTC is
//! defined only while the follower is faster than its leader.

pub mod plot;
pub mod report;
pub mod trace;

use std::ops::Range;

use crate::error::{Error, Result};
use crate::platooning::MemberMode;
use crate::world::VehicleId;
use trace::{EventKind, EventLog, TraceRecord, VehicleTrace};

pub use report::{MetricsReport, VehicleMetrics};

/// Warning threshold below which a TTC sample counts as hazardous, s.
pub const TTC_THRESHOLD: f64 = 2.5;

/// Closing speeds at or below this are treated as zero, m/s. Keeps rounding
/// noise in an exactly matched follower from producing 1e12 s TTC samples.
pub const CLOSING_EPS: f64 = 1e-6;

/// Time to collision at constant speeds; `None` unless the gap is closing.
pub fn ttc(bumper_gap: f64, follower_speed: f64, leader_speed: f64) -> Option<f64> {
    let closing = follower_speed - leader_speed;
    (closing > CLOSING_EPS && bumper_gap > 0.0).then(|| bumper_gap / closing)
}

fn check_aligned(follower: &VehicleTrace, leader: &VehicleTrace) -> Result<()> {
    if follower.first_step() != leader.first_step()
        || follower.records.len() != leader.records.len()
    {
        return Err(Error::Evaluation(format!(
            "traces of {} and {} are not aligned on steps",
            follower.id, leader.id
        )));
    }
    Ok(())
}

/// Per-step TTC of `follower` behind a fixed `leader`.
pub fn ttc_series(follower: &VehicleTrace, leader: &VehicleTrace) -> Result<Vec<Option<f64>>> {
    check_aligned(follower, leader)?;
    Ok(follower
        .records
        .iter()
        .zip(&leader.records)
        .map(|(f, l)| ttc(l.station - f.station - leader.length, f.speed, l.speed))
        .collect())
}

/// Mean of the defined samples; `None` if there are none.
pub fn attc(series: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = series.iter().flatten().copied().collect();
    mean_std(&defined).map(|(m, _)| m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HazardCount {
    /// Maximal runs of consecutive sub-threshold steps.
    pub episodes: u32,
    /// Individual sub-threshold steps.
    pub steps: u32,
}

pub fn hazard_frequency(series: &[Option<f64>], threshold: f64) -> HazardCount {
    let mut out = HazardCount::default();
    let mut in_episode = false;
    for s in series {
        let hazardous = s.is_some_and(|v| v < threshold);
        if hazardous {
            out.steps += 1;
            if !in_episode {
                out.episodes += 1;
            }
        }
        in_episode = hazardous;
    }
    out
}

/// Two-pass population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Streaming (Welford) mean and population variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then_some(self.mean)
    }

    pub fn std(&self) -> Option<f64> {
        (self.n > 0).then(|| (self.m2 / self.n as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGapStats {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub series: Vec<f64>,
}

impl TimeGapStats {
    fn from_series(series: Vec<f64>) -> Self {
        let ms = mean_std(&series);
        Self {
            mean: ms.map(|m| m.0),
            std: ms.map(|m| m.1),
            series,
        }
    }
}

/// Bumper gap over follower speed at every step where the follower moves.
pub fn time_gap_stats(follower: &VehicleTrace, leader: &VehicleTrace) -> Result<TimeGapStats> {
    check_aligned(follower, leader)?;
    let series = follower
        .records
        .iter()
        .zip(&leader.records)
        .filter(|(f, _)| f.speed > 0.0)
        .map(|(f, l)| (l.station - f.station - leader.length) / f.speed)
        .collect();
    Ok(TimeGapStats::from_series(series))
}

/// Mean and std of the acceleration channel over `window` (absolute steps), or the whole trace.
pub fn accel_stats(trace: &VehicleTrace, window: Option<Range<u64>>) -> Result<(f64, f64)> {
    let values: Vec<f64> = trace
        .records
        .iter()
        .filter(|r| window.as_ref().is_none_or(|w| w.contains(&r.step)))
        .map(|r| r.accel)
        .collect();
    mean_std(&values)
        .ok_or_else(|| Error::Evaluation(format!("empty acceleration window for {}", trace.id)))
}

/// Approval and completion steps of the first approved join of `joiner`.
pub fn join_window(events: &EventLog, joiner: Option<VehicleId>) -> Option<(u64, Option<u64>)> {
    let approved = events.first(EventKind::JoinApproved, joiner)?;
    let completed = events
        .of_kind(EventKind::JoinCompleted)
        .find(|e| e.vehicle == approved.vehicle && e.step >= approved.step)
        .map(|e| e.step);
    Some((approved.step, completed))
}

/// Seconds from join approval to join completion; `None` if either is missing.
pub fn time_to_complete_maneuver(
    events: &EventLog,
    joiner: Option<VehicleId>,
    dt: f64,
) -> Option<f64> {
    let (approved, completed) = join_window(events, joiner)?;
    completed.map(|c| (c - approved) as f64 * dt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficMetrics {
    /// veh·s
    pub total_delay: f64,
    /// veh/h crossing the measurement station.
    pub throughput: f64,
}

pub fn traffic_metrics(
    traces: &[VehicleTrace],
    free_flow_speed: f64,
    measurement_station: f64,
    dt: f64,
) -> Result<TrafficMetrics> {
    if !(free_flow_speed > 0.0) {
        return Err(Error::Evaluation("free-flow speed must be > 0".into()));
    }
    let mut delay = 0.0;
    let mut crossings = 0u32;
    let (mut first, mut last) = (u64::MAX, 0u64);
    for t in traces {
        let (Some(a), Some(b)) = (t.records.first(), t.records.last()) else {
            continue;
        };
        first = first.min(a.step);
        last = last.max(b.step);
        let travel = (b.step - a.step) as f64 * dt;
        delay += (travel - (b.station - a.station) / free_flow_speed).max(0.0);
        if a.station < measurement_station && b.station >= measurement_station {
            crossings += 1;
        }
    }
    let period = if last > first {
        (last - first) as f64 * dt
    } else {
        0.0
    };
    let throughput = if period > 0.0 {
        f64::from(crossings) * 3600.0 / period
    } else {
        0.0
    };
    Ok(TrafficMetrics {
        total_delay: delay,
        throughput,
    })
}

/// One step of a vehicle paired with whatever is directly ahead of it in its lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    pub step: u64,
    pub leader: Option<VehicleId>,
    pub gap: f64,
    pub speed: f64,
    pub leader_speed: f64,
    pub mode: Option<MemberMode>,
}

/// Pairs every record of `follower` with the nearest same-lane vehicle ahead at that step.
pub fn lane_pairs(traces: &[VehicleTrace], follower: &VehicleTrace) -> Vec<PairSample> {
    follower
        .records
        .iter()
        .map(|f| {
            let lead: Option<(&VehicleTrace, &TraceRecord)> = traces
                .iter()
                .filter(|t| t.id != follower.id)
                .filter_map(|t| t.at(f.step).map(|r| (t, r)))
                .filter(|(_, r)| r.lane == f.lane && r.station > f.station)
                .min_by(|a, b| a.1.station.total_cmp(&b.1.station));
            match lead {
                Some((t, r)) => PairSample {
                    step: f.step,
                    leader: Some(t.id),
                    gap: r.station - f.station - t.length,
                    speed: f.speed,
                    leader_speed: r.speed,
                    mode: f.mode,
                },
                None => PairSample {
                    step: f.step,
                    leader: None,
                    gap: f64::INFINITY,
                    speed: f.speed,
                    leader_speed: 0.0,
                    mode: f.mode,
                },
            }
        })
        .collect()
}

fn keeps_gap(mode: Option<MemberMode>) -> bool {
    matches!(mode, Some(MemberMode::Maintaining | MemberMode::OpeningGap))
}

/// Per-vehicle metrics for every CAV in `traces`.
pub fn evaluate(traces: &[VehicleTrace], events: &EventLog, dt: f64) -> MetricsReport {
    let window = join_window(events, None);
    let joiner = events
        .first(EventKind::JoinApproved, None)
        .and_then(|e| e.vehicle);
    let rows = traces
        .iter()
        .filter(|t| t.is_cav())
        .map(|t| {
            let pairs = lane_pairs(traces, t);
            let ttcs: Vec<Option<f64>> = pairs
                .iter()
                .map(|p| p.leader.and_then(|_| ttc(p.gap, p.speed, p.leader_speed)))
                .collect();
            let hazards = hazard_frequency(&ttcs, TTC_THRESHOLD);
            let gaps: Vec<f64> = pairs
                .iter()
                .filter(|p| p.leader.is_some() && keeps_gap(p.mode) && p.speed > 0.0)
                .map(|p| p.gap / p.speed)
                .collect();
            let tg = TimeGapStats::from_series(gaps);
            let accel_std = accel_stats(t, None).map(|s| s.1).unwrap_or(0.0);
            let maneuver_accel_std = window.and_then(|(a, c)| {
                let end = c.map_or(u64::MAX, |c| c + 1);
                accel_stats(t, Some(a..end)).ok().map(|s| s.1)
            });
            let tcm = if Some(t.id) == joiner {
                time_to_complete_maneuver(events, joiner, dt)
            } else {
                None
            };
            VehicleMetrics {
                id: t.id,
                attc: attc(&ttcs),
                hazard_frequency: hazards.episodes,
                hazard_steps: hazards.steps,
                avg_time_gap: tg.mean,
                time_gap_std: tg.std,
                accel_std,
                tcm,
                maneuver_accel_std,
            }
        })
        .collect();
    MetricsReport { rows }
}

/// Smallest same-lane time gap over all vehicles between join approval and
/// completion (or the end of the run when the join never completes).
pub fn min_time_gap_during_join(traces: &[VehicleTrace], events: &EventLog) -> Option<f64> {
    let (approved, completed) = join_window(events, None)?;
    let end = completed.unwrap_or(u64::MAX);
    traces
        .iter()
        .flat_map(|t| lane_pairs(traces, t))
        .filter(|p| p.step >= approved && p.step <= end && p.leader.is_some() && p.speed > 0.0)
        .map(|p| p.gap / p.speed)
        .min_by(f64::total_cmp)
}
