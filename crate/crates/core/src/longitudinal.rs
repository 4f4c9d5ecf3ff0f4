//! Longitudinal and lateral planning primitives.
//!
//! Everything here is a pure function of its arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{advance, KinematicState};

/// Default rollout horizon in steps (3 s at 20 Hz).
pub const DEFAULT_HORIZON_STEPS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorParams {
    pub target_speed: f64,
    pub comfort_accel: f64,
    /// Negative.
    pub comfort_decel: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        Self {
            target_speed: 25.0,
            comfort_accel: 2.0,
            comfort_decel: -3.0,
        }
    }
}

impl BehaviorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.comfort_accel > 0.0) || !(self.comfort_decel < 0.0) || !(self.target_speed >= 0.0)
        {
            return Err(Error::Config(
                "behavior: require comfort_accel > 0, comfort_decel < 0, target_speed >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn with_target(self, target_speed: f64) -> Self {
        Self {
            target_speed,
            ..self
        }
    }
}

/// Cubic `y = a0 + a1·u + a2·u² + a3·u³` with `u = x - x_start`.
///
/// Coefficients live in the shifted coordinate so that curves placed
/// kilometres down the road stay well conditioned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicCurve {
    pub coeffs: [f64; 4],
    pub x_start: f64,
    pub x_end: f64,
}

impl CubicCurve {
    pub fn eval(&self, x: f64) -> f64 {
        let u = x - self.x_start;
        let [a0, a1, a2, a3] = self.coeffs;
        a0 + u * (a1 + u * (a2 + u * a3))
    }

    pub fn slope(&self, x: f64) -> f64 {
        let u = x - self.x_start;
        let [_, a1, a2, a3] = self.coeffs;
        a1 + u * (2.0 * a2 + u * 3.0 * a3)
    }
}

/// Fits the cubic matching value and slope at both ends of `[x_start, x_end]`.
pub fn fit_cubic(
    y_start: f64,
    slope_start: f64,
    y_end: f64,
    slope_end: f64,
    x_start: f64,
    x_end: f64,
) -> Result<CubicCurve> {
    if !(x_end > x_start) || !x_start.is_finite() || !x_end.is_finite() {
        return Err(Error::InvalidState(format!(
            "degenerate cubic domain [{x_start}, {x_end}]"
        )));
    }
    let h = x_end - x_start;
    let mut system = [
        [1.0, 0.0, 0.0, 0.0, y_start],
        [0.0, 1.0, 0.0, 0.0, slope_start],
        [1.0, h, h * h, h * h * h, y_end],
        [0.0, 1.0, 2.0 * h, 3.0 * h * h, slope_end],
    ];
    let coeffs = solve4(&mut system)?;
    Ok(CubicCurve {
        coeffs,
        x_start,
        x_end,
    })
}

/// Gaussian elimination with partial pivoting on an augmented 4×5 matrix.
fn solve4(m: &mut [[f64; 5]; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap_or(col);
        if m[pivot][col].abs() < 1e-300 {
            return Err(Error::InvalidState("singular cubic system".into()));
        }
        m.swap(col, pivot);
        let pivot_row = m[col];
        for row in m.iter_mut().skip(col + 1) {
            let factor = row[col] / pivot_row[col];
            for (x, p) in row.iter_mut().zip(pivot_row).skip(col) {
                *x -= factor * p;
            }
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let tail: f64 = (row + 1..4).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][4] - tail) / m[row][row];
    }
    Ok(x)
}

/// Comfort-bounded acceleration toward the target speed.
pub fn desired_accel(params: &BehaviorParams, current_speed: f64, dt: f64) -> f64 {
    let demand = (params.target_speed - current_speed) / dt;
    if params.target_speed >= current_speed {
        demand.min(params.comfort_accel)
    } else {
        demand.max(params.comfort_decel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    /// Seconds since the start of the rollout.
    pub time: f64,
    pub station: f64,
    pub lateral_offset: f64,
    pub speed: f64,
    /// Command applied from this point to the next.
    pub accel: f64,
}

/// A rollout sampled at the simulation step. Point 0 is the initial state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point `steps` after the initial one, if within the horizon.
    pub fn at_step(&self, steps: usize) -> Option<&TrajectoryPoint> {
        self.points.get(steps)
    }
}

/// Rolls the vehicle forward applying the comfort-bounded controller each step.
pub fn plan_trajectory(
    state: &KinematicState,
    params: &BehaviorParams,
    horizon_steps: usize,
    dt: f64,
    lateral: Option<&CubicCurve>,
) -> Result<Trajectory> {
    if horizon_steps == 0 {
        return Err(Error::InvalidState(
            "trajectory horizon must be >= 1 step".into(),
        ));
    }
    let lateral_at = |station: f64, fallback: f64| match lateral {
        Some(curve) => curve.eval(station.clamp(curve.x_start, curve.x_end)),
        None => fallback,
    };
    let mut points = Vec::with_capacity(horizon_steps + 1);
    let mut current = *state;
    for i in 0..=horizon_steps {
        let accel = desired_accel(params, current.speed, dt);
        points.push(TrajectoryPoint {
            time: i as f64 * dt,
            station: current.station,
            lateral_offset: lateral_at(current.station, state.lateral_offset),
            speed: current.speed,
            accel,
        });
        if i < horizon_steps {
            current = advance(&current, accel, dt)?;
        }
    }
    Ok(Trajectory { points })
}

/// Proportional spacing law used by a platoon leader behind a non-member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FollowingLaw {
    /// 1/s
    pub gain: f64,
    /// s
    pub headway: f64,
}

impl Default for FollowingLaw {
    fn default() -> Self {
        Self {
            gain: 0.5,
            headway: 1.5,
        }
    }
}

/// Target speed regulating the bumper gap toward `headway · own_speed`,
/// clamped to `[0, max_speed]`.
pub fn leader_following_speed(
    gap: f64,
    leader_speed: f64,
    own_speed: f64,
    law: &FollowingLaw,
    max_speed: f64,
) -> f64 {
    let raw = leader_speed + law.gain * (gap - law.headway * own_speed);
    raw.clamp(0.0, max_speed.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub min_gap: f64,
    pub desired_headway: f64,
    pub max_accel: f64,
    /// Positive.
    pub comfort_brake: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 25.0,
            min_gap: 2.0,
            desired_headway: 1.5,
            max_accel: 1.5,
            comfort_brake: 2.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.desired_speed,
            self.min_gap,
            self.desired_headway,
            self.max_accel,
            self.comfort_brake,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !all_positive {
            return Err(Error::Config("idm parameters must all be > 0".into()));
        }
        Ok(())
    }
}

/// Intelligent Driver Model acceleration. `closing_speed` is own speed minus
/// leader speed. Output is floored at `-2·comfort_brake`.
pub fn idm_accel(gap: f64, speed: f64, closing_speed: f64, p: &IdmParams) -> f64 {
    let floor = -2.0 * p.comfort_brake;
    if !(gap > 0.0) {
        return floor;
    }
    let dynamic = speed * p.desired_headway
        + speed * closing_speed / (2.0 * (p.max_accel * p.comfort_brake).sqrt());
    let s_star = p.min_gap + dynamic.max(0.0);
    let a = p.max_accel * (1.0 - (speed / p.desired_speed).powi(4) - (s_star / gap).powi(2));
    a.max(floor)
}

/// IDM acceleration with no leader in sight.
pub fn idm_free_accel(speed: f64, p: &IdmParams) -> f64 {
    (p.max_accel * (1.0 - (speed / p.desired_speed).powi(4))).max(-2.0 * p.comfort_brake)
}
