//! Deterministic kinematic highway shared by the ego vehicle and the background traffic.
//!
//! Vehicle 0 is always the autonomous vehicle (AV); vehicles `1..=N` are the
//! background vehicles (BVs). Coordinates: `x` is lateral (0 at the right road
//! edge), `y` is longitudinal, `theta = 0` points along the road.

use alloc::vec::Vec;
use core::f64::consts::PI;

use thiserror::Error;

/// Kinematic state `[x, y, v, theta]` of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl VehicleState {
    pub const fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        Self { x, y, v, theta }
    }
}

/// Per-step increments `[dv, dtheta]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActionCmd {
    pub dv: f64,
    pub dtheta: f64,
}

impl ActionCmd {
    pub const ZERO: ActionCmd = ActionCmd { dv: 0.0, dtheta: 0.0 };

    pub const fn new(dv: f64, dtheta: f64) -> Self {
        Self { dv, dtheta }
    }
}

/// Symmetric bounds on the per-step increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionBounds {
    pub dv_max: f64,
    pub dtheta_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self { dv_max: 0.5, dtheta_max: 0.05 }
    }
}

impl ActionBounds {
    pub fn clamp(&self, a: ActionCmd) -> ActionCmd {
        ActionCmd {
            dv: clamp_finite(a.dv, self.dv_max),
            dtheta: clamp_finite(a.dtheta, self.dtheta_max),
        }
    }

    /// Maps a command to the normalized box `[-1, 1]^2`.
    pub fn normalize(&self, a: ActionCmd) -> [f64; 2] {
        [a.dv / self.dv_max, a.dtheta / self.dtheta_max]
    }

    /// Inverse of [`ActionBounds::normalize`].
    pub fn denormalize(&self, t: [f64; 2]) -> ActionCmd {
        ActionCmd { dv: t[0] * self.dv_max, dtheta: t[1] * self.dtheta_max }
    }
}

fn clamp_finite(value: f64, bound: f64) -> f64 {
    if value.is_nan() {
        0.0
    } else {
        value.clamp(-bound, bound)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadConfig {
    pub lane_count: u32,
    pub lane_width: f64,
    pub length: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self { lane_count: 3, lane_width: 3.5, length: 400.0 }
    }
}

impl RoadConfig {
    pub fn width(&self) -> f64 {
        f64::from(self.lane_count) * self.lane_width
    }

    pub fn lane_center(&self, lane: u32) -> f64 {
        (f64::from(lane) + 0.5) * self.lane_width
    }

    /// Lane whose strip contains `x`, clamped to the road.
    pub fn lane_of(&self, x: f64) -> u32 {
        let raw = libm::floor(x / self.lane_width);
        if raw <= 0.0 {
            0
        } else {
            (raw as u32).min(self.lane_count - 1)
        }
    }

    pub fn on_road(&self, x: f64) -> bool {
        (0.0..=self.width()).contains(&x)
    }
}

/// Reward constants, discounting, horizon and vehicle footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub v_max_av: f64,
    pub r_a: f64,
    pub r_b: f64,
    pub gamma: f64,
    pub horizon: u32,
    pub dt: f64,
    pub footprint_length: f64,
    pub footprint_width: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            v_max_av: 40.0,
            r_a: 10.0,
            r_b: 10.0,
            gamma: 0.99,
            horizon: 100,
            dt: 0.1,
            footprint_length: 5.0,
            footprint_width: 2.0,
        }
    }
}

/// Everything the simulator needs to advance and score a world.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimConfig {
    pub road: RoadConfig,
    pub reward: RewardConfig,
    pub bounds: ActionBounds,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: &'static str },
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, field: &'static str, reason: &'static str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid { field, reason })
            }
        };
        let r = &self.reward;
        check(self.road.lane_count >= 1, "lane_count", "must be at least 1")?;
        check(self.road.lane_width > 0.0, "lane_width", "must be positive")?;
        check(self.road.length > 0.0, "road_length", "must be positive")?;
        check(r.v_max_av > 0.0, "v_max_av", "must be positive")?;
        check(r.r_a > 0.0, "r_a", "must be positive")?;
        check(r.r_b > 0.0, "r_b", "must be positive")?;
        check(r.gamma > 0.0 && r.gamma <= 1.0, "gamma", "must lie in (0, 1]")?;
        check(r.horizon > 0, "horizon", "must be positive")?;
        check(r.dt > 0.0, "dt", "must be positive")?;
        check(r.footprint_length > 0.0, "footprint_length", "must be positive")?;
        check(r.footprint_width > 0.0, "footprint_width", "must be positive")?;
        check(self.bounds.dv_max > 0.0, "dv_max", "must be positive")?;
        check(self.bounds.dtheta_max > 0.0, "dtheta_max", "must be positive")?;
        Ok(())
    }
}

/// Snapshot of all participants at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub vehicles: Vec<VehicleState>,
    pub step_index: u32,
    pub elapsed_time: f64,
}

impl WorldState {
    pub fn new(vehicles: Vec<VehicleState>) -> Self {
        Self { vehicles, step_index: 0, elapsed_time: 0.0 }
    }

    pub fn av(&self) -> &VehicleState {
        &self.vehicles[0]
    }

    pub fn bv_count(&self) -> usize {
        self.vehicles.len().saturating_sub(1)
    }

    /// Flattened `[x, y, v, theta]` per vehicle, AV first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.vehicles.len());
        for s in &self.vehicles {
            out.extend_from_slice(&[s.x, s.y, s.v, s.theta]);
        }
        out
    }

    /// Rebuilds a world from [`WorldState::flatten`] output.
    pub fn from_flat(flat: &[f64], step_index: u32, dt: f64) -> Self {
        let vehicles = flat
            .chunks_exact(4)
            .map(|c| VehicleState::new(c[0], c[1], c[2], c[3]))
            .collect();
        Self { vehicles, step_index, elapsed_time: f64::from(step_index) * dt }
    }
}

/// Events detected on the post-step state.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepEvents {
    pub av_bv_collision: bool,
    pub bv_bv_collision: bool,
    pub off_road: Vec<bool>,
    pub reached_end: bool,
}

impl StepEvents {
    pub fn av_off_road(&self) -> bool {
        self.off_road.first().copied().unwrap_or(false)
    }
}

/// Why an episode stopped. Variants are listed in precedence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ending {
    AvBvCollision,
    BvBvCollision,
    OffRoad,
    RoadEnd,
    Horizon,
}

impl Ending {
    pub const ALL: [Ending; 5] = [
        Ending::AvBvCollision,
        Ending::BvBvCollision,
        Ending::OffRoad,
        Ending::RoadEnd,
        Ending::Horizon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ending::AvBvCollision => "av_bv_collision",
            Ending::BvBvCollision => "bv_bv_collision",
            Ending::OffRoad => "off_road",
            Ending::RoadEnd => "road_end",
            Ending::Horizon => "horizon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Ending::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("expected {expected} background-vehicle actions, got {got}")]
    ActionCountMismatch { expected: usize, got: usize },
    #[error("episode already reached its horizon at step {step}")]
    PastHorizon { step: u32 },
}

/// Wraps an angle into `[-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..=PI).contains(&theta) {
        return theta;
    }
    let wrapped = libm::remainder(theta, 2.0 * PI);
    if wrapped < -PI {
        wrapped + 2.0 * PI
    } else if wrapped > PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// Semi-implicit update: increments first, then position with the new speed and heading.
pub fn step_kinematics(state: VehicleState, action: ActionCmd, dt: f64) -> VehicleState {
    let v = (state.v + action.dv).max(0.0);
    let theta = wrap_angle(state.theta + action.dtheta);
    VehicleState {
        x: state.x + v * dt * libm::sin(theta),
        y: state.y + v * dt * libm::cos(theta),
        v,
        theta,
    }
}

fn corners(s: &VehicleState, half_len: f64, half_wid: f64) -> ([f64; 2], [f64; 2], [[f64; 2]; 4]) {
    // Longitudinal unit axis follows the heading; lateral axis is perpendicular.
    let (sin, cos) = (libm::sin(s.theta), libm::cos(s.theta));
    let long = [sin, cos];
    let lat = [cos, -sin];
    let mut pts = [[0.0; 2]; 4];
    for (k, (sl, sw)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)].iter().enumerate() {
        pts[k] = [
            s.x + sl * half_len * long[0] + sw * half_wid * lat[0],
            s.y + sl * half_len * long[1] + sw * half_wid * lat[1],
        ];
    }
    (long, lat, pts)
}

fn projection(axis: [f64; 2], pts: &[[f64; 2]; 4]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in pts {
        let d = axis[0] * p[0] + axis[1] * p[1];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// Separating-axis overlap test between two vehicle footprints.
///
/// Touching rectangles count as colliding.
pub fn check_collision(a: &VehicleState, b: &VehicleState, cfg: &RewardConfig) -> bool {
    let hl = 0.5 * cfg.footprint_length;
    let hw = 0.5 * cfg.footprint_width;
    // Cheap reject on the circumscribed circles.
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    if dx * dx + dy * dy > 4.0 * (hl * hl + hw * hw) {
        return false;
    }
    let (la, wa, pa) = corners(a, hl, hw);
    let (lb, wb, pb) = corners(b, hl, hw);
    for axis in [la, wa, lb, wb] {
        let (amin, amax) = projection(axis, &pa);
        let (bmin, bmax) = projection(axis, &pb);
        if amax < bmin || bmax < amin {
            return false;
        }
    }
    true
}

/// Advances every vehicle one step and detects events on the resulting state.
///
/// Actions are clamped to `cfg.bounds`. BVs that are off-road are ignored for
/// collision purposes until they return to the road.
pub fn step_world(
    world: &WorldState,
    a_av: ActionCmd,
    a_bv: &[ActionCmd],
    cfg: &SimConfig,
) -> Result<(WorldState, StepEvents), SimError> {
    let n_bv = world.bv_count();
    if a_bv.len() != n_bv {
        return Err(SimError::ActionCountMismatch { expected: n_bv, got: a_bv.len() });
    }
    if world.step_index >= cfg.reward.horizon {
        return Err(SimError::PastHorizon { step: world.step_index });
    }
    let dt = cfg.reward.dt;
    let vehicles: Vec<VehicleState> = world
        .vehicles
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a = if i == 0 { a_av } else { a_bv[i - 1] };
            step_kinematics(*s, cfg.bounds.clamp(a), dt)
        })
        .collect();
    let step_index = world.step_index + 1;
    let next = WorldState { vehicles, step_index, elapsed_time: f64::from(step_index) * dt };
    let events = detect_events(&next, cfg);
    Ok((next, events))
}

/// Collision, off-road and road-end flags for a world.
pub fn detect_events(world: &WorldState, cfg: &SimConfig) -> StepEvents {
    let off_road: Vec<bool> = world.vehicles.iter().map(|s| !cfg.road.on_road(s.x)).collect();
    let vs = &world.vehicles;
    let mut events = StepEvents {
        reached_end: vs.first().is_some_and(|av| av.y > cfg.road.length),
        ..StepEvents::default()
    };
    for i in 1..vs.len() {
        if off_road[i] {
            continue;
        }
        if !events.av_bv_collision && check_collision(&vs[0], &vs[i], &cfg.reward) {
            events.av_bv_collision = true;
        }
        if !events.bv_bv_collision {
            for j in (i + 1)..vs.len() {
                if !off_road[j] && check_collision(&vs[i], &vs[j], &cfg.reward) {
                    events.bv_bv_collision = true;
                    break;
                }
            }
        }
    }
    events.off_road = off_road;
    events
}

/// Per-step rewards with their components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rewards {
    pub av: f64,
    pub bv: f64,
    pub av_speed: f64,
    pub av_col: f64,
    pub bv_col: f64,
}

pub fn compute_rewards(events: &StepEvents, world_after: &WorldState, cfg: &RewardConfig) -> Rewards {
    let av_speed = world_after.av().v / cfg.v_max_av;
    let av_col = if events.av_bv_collision { -cfg.r_a } else { 0.0 };
    let bv_col = if events.bv_bv_collision { -cfg.r_b } else { 0.0 };
    Rewards {
        av: av_speed + av_col,
        bv: -av_speed - av_col + bv_col,
        av_speed,
        av_col,
        bv_col,
    }
}

pub fn is_terminal(world: &WorldState, events: &StepEvents, cfg: &RewardConfig) -> bool {
    classify_ending(world, events, cfg).is_some()
}

/// The ending an episode would record at this state, if it is terminal.
pub fn classify_ending(world: &WorldState, events: &StepEvents, cfg: &RewardConfig) -> Option<Ending> {
    if events.av_bv_collision {
        Some(Ending::AvBvCollision)
    } else if events.bv_bv_collision {
        Some(Ending::BvBvCollision)
    } else if events.av_off_road() {
        Some(Ending::OffRoad)
    } else if events.reached_end {
        Some(Ending::RoadEnd)
    } else if world.step_index >= cfg.horizon {
        Some(Ending::Horizon)
    } else {
        None
    }
}

/// Length of the per-vehicle feature block in [`observe`].
pub const FEATURES_PER_VEHICLE: usize = 4;

pub fn observation_dim(vehicle_count: usize) -> usize {
    FEATURES_PER_VEHICLE * vehicle_count
}

/// Scaled network input for a world.
///
/// The AV block is absolute (lane offset, progress, speed, heading); BV blocks
/// are relative to the AV so policies generalize along the road.
pub fn observe(world: &WorldState, cfg: &SimConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(observation_dim(world.vehicles.len()));
    observe_into(&world.vehicles, cfg, &mut out);
    out
}

/// [`observe`] on a flattened state.
pub fn observe_flat(flat: &[f64], cfg: &SimConfig) -> Vec<f64> {
    let vehicles: Vec<VehicleState> =
        flat.chunks_exact(4).map(|c| VehicleState::new(c[0], c[1], c[2], c[3])).collect();
    let mut out = Vec::with_capacity(flat.len());
    observe_into(&vehicles, cfg, &mut out);
    out
}

const RELATIVE_RANGE_M: f64 = 50.0;
const HEADING_SCALE: f64 = 0.2;

fn observe_into(vehicles: &[VehicleState], cfg: &SimConfig, out: &mut Vec<f64>) {
    let width = cfg.road.width();
    let vmax = cfg.reward.v_max_av;
    let Some(av) = vehicles.first() else { return };
    out.extend_from_slice(&[
        (av.x - 0.5 * width) / width,
        av.y / cfg.road.length,
        av.v / vmax,
        av.theta / HEADING_SCALE,
    ]);
    for bv in &vehicles[1..] {
        out.extend_from_slice(&[
            (bv.x - av.x) / width,
            (bv.y - av.y) / RELATIVE_RANGE_M,
            (bv.v - av.v) / vmax,
            bv.theta / HEADING_SCALE,
        ]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn zero_motion_is_a_fixed_point() {
        let s = VehicleState::new(1.75, 20.0, 0.0, 0.0);
        assert_eq!(step_kinematics(s, ActionCmd::ZERO, 0.1), s);
    }

    #[test]
    fn straight_motion_advances_y_by_v_dt() {
        let s = VehicleState::new(1.75, 20.0, 10.0, 0.0);
        let n = step_kinematics(s, ActionCmd::ZERO, 0.1);
        assert_eq!(n.y, 21.0);
        assert_eq!(n.x, 1.75);
    }

    #[test]
    fn quarter_turn_moves_laterally() {
        let s = VehicleState::new(1.75, 20.0, 10.0, 0.0);
        let n = step_kinematics(s, ActionCmd::new(0.0, PI / 2.0), 0.1);
        assert!((n.x - 2.75).abs() < 1e-12);
        assert!((n.y - 20.0).abs() < 1e-12);
    }

    #[test]
    fn speed_is_floored_at_zero() {
        let s = VehicleState::new(0.0, 0.0, 0.2, 0.0);
        assert_eq!(step_kinematics(s, ActionCmd::new(-0.5, 0.0), 0.1).v, 0.0);
    }

    #[test]
    fn angle_wrapping() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * PI / 2.0) - PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn collision_basics() {
        let r = RewardConfig::default();
        let a = VehicleState::new(1.75, 50.0, 20.0, 0.0);
        assert!(check_collision(&a, &a, &r));
        let far = VehicleState::new(1.75, 150.0, 20.0, 0.0);
        assert!(!check_collision(&a, &far, &r));
        let adjacent_lane = VehicleState::new(5.25, 50.0, 20.0, 0.0);
        assert!(!check_collision(&a, &adjacent_lane, &r));
        let bumper = VehicleState::new(1.75, 54.9, 20.0, 0.0);
        assert!(check_collision(&a, &bumper, &r));
    }

    #[test]
    fn rotated_footprint_overlaps_where_aligned_one_does_not() {
        let r = RewardConfig::default();
        let a = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        // Side by side with 0.2 m clearance.
        let b = VehicleState::new(2.2, 0.0, 0.0, 0.0);
        assert!(!check_collision(&a, &b, &r));
        let b_rot = VehicleState { theta: PI / 2.0, ..b };
        assert!(check_collision(&a, &b_rot, &r));
    }

    fn world(vs: &[VehicleState]) -> WorldState {
        WorldState::new(vs.to_vec())
    }

    #[test]
    fn stationary_world_only_advances_the_clock() {
        let w = world(&[
            VehicleState::new(1.75, 50.0, 0.0, 0.0),
            VehicleState::new(5.25, 80.0, 0.0, 0.0),
        ]);
        let (n, ev) = step_world(&w, ActionCmd::ZERO, &[ActionCmd::ZERO], &cfg()).unwrap();
        assert_eq!(n.vehicles, w.vehicles);
        assert_eq!(n.step_index, 1);
        assert!(!ev.av_bv_collision && !ev.bv_bv_collision && !ev.reached_end);
        assert!(ev.off_road.iter().all(|o| !o));
    }

    #[test]
    fn forced_av_bv_overlap_is_detected() {
        let w = world(&[
            VehicleState::new(1.75, 50.0, 10.0, 0.0),
            VehicleState::new(1.75, 56.0, 0.0, 0.0),
        ]);
        let (_, ev) = step_world(&w, ActionCmd::ZERO, &[ActionCmd::ZERO], &cfg()).unwrap();
        assert!(ev.av_bv_collision);
        assert!(!ev.bv_bv_collision);
    }

    #[test]
    fn forced_bv_bv_overlap_is_detected() {
        let w = world(&[
            VehicleState::new(1.75, 0.0, 0.0, 0.0),
            VehicleState::new(5.25, 150.0, 10.0, 0.0),
            VehicleState::new(5.25, 156.0, 0.0, 0.0),
        ]);
        let (_, ev) =
            step_world(&w, ActionCmd::ZERO, &[ActionCmd::ZERO, ActionCmd::ZERO], &cfg()).unwrap();
        assert!(ev.bv_bv_collision);
        assert!(!ev.av_bv_collision);
    }

    #[test]
    fn off_road_bv_is_not_a_collision_partner() {
        let w = world(&[
            VehicleState::new(1.75, 0.0, 0.0, 0.0),
            VehicleState::new(-3.0, 150.0, 0.0, 0.0),
            VehicleState::new(-3.0, 151.0, 0.0, 0.0),
        ]);
        let (_, ev) =
            step_world(&w, ActionCmd::ZERO, &[ActionCmd::ZERO, ActionCmd::ZERO], &cfg()).unwrap();
        assert!(!ev.bv_bv_collision);
        assert_eq!(ev.off_road, [false, true, true]);
        assert!(!is_terminal(&w, &ev, &cfg().reward));
    }

    #[test]
    fn action_count_mismatch_is_rejected() {
        let w = world(&[VehicleState::default(), VehicleState::new(5.25, 30.0, 0.0, 0.0)]);
        let err = step_world(&w, ActionCmd::ZERO, &[], &cfg()).unwrap_err();
        assert_eq!(err, SimError::ActionCountMismatch { expected: 1, got: 0 });
    }

    #[test]
    fn reward_examples() {
        let r = RewardConfig::default();
        let w = world(&[VehicleState::new(1.75, 0.0, 40.0, 0.0)]);
        let none = StepEvents { off_road: alloc::vec![false], ..Default::default() };
        let rw = compute_rewards(&none, &w, &r);
        assert_eq!((rw.av, rw.bv), (1.0, -1.0));

        let stopped = world(&[VehicleState::new(1.75, 0.0, 0.0, 0.0)]);
        let crash = StepEvents { av_bv_collision: true, ..none.clone() };
        let rw = compute_rewards(&crash, &stopped, &r);
        assert_eq!((rw.av, rw.bv), (-10.0, 10.0));

        let bvbv = StepEvents { bv_bv_collision: true, ..none };
        let rw = compute_rewards(&bvbv, &w, &r);
        assert_eq!((rw.av, rw.bv), (1.0, -11.0));
    }

    #[test]
    fn terminal_conditions() {
        let r = RewardConfig::default();
        let mut w = world(&[VehicleState::new(1.75, 0.0, 10.0, 0.0)]);
        let quiet = StepEvents { off_road: alloc::vec![false], ..Default::default() };
        w.step_index = 50;
        assert!(!is_terminal(&w, &quiet, &r));
        let bvbv = StepEvents { bv_bv_collision: true, ..quiet.clone() };
        assert!(is_terminal(&w, &bvbv, &r));
        w.step_index = r.horizon;
        assert!(is_terminal(&w, &quiet, &r));
        assert_eq!(classify_ending(&w, &quiet, &r), Some(Ending::Horizon));
    }

    #[test]
    fn av_off_road_ends_without_penalty() {
        let c = cfg();
        let w = world(&[VehicleState::new(-0.5, 0.0, 10.0, 0.0)]);
        let ev = detect_events(&w, &c);
        assert_eq!(classify_ending(&w, &ev, &c.reward), Some(Ending::OffRoad));
        assert_eq!(compute_rewards(&ev, &w, &c.reward).av_col, 0.0);
    }

    fn vehicle() -> impl Strategy<Value = VehicleState> {
        (-1.0..12.0f64, 0.0..200.0f64, 0.0..45.0f64, -PI..PI)
            .prop_map(|(x, y, v, t)| VehicleState::new(x, y, v, t))
    }

    fn action() -> impl Strategy<Value = ActionCmd> {
        (-2.0..2.0f64, -1.0..1.0f64).prop_map(|(dv, dt)| ActionCmd::new(dv, dt))
    }

    proptest! {
        #[test]
        fn collision_is_symmetric(a in vehicle(), b in vehicle()) {
            let r = RewardConfig::default();
            prop_assert_eq!(check_collision(&a, &b, &r), check_collision(&b, &a, &r));
        }

        #[test]
        fn stepping_is_deterministic_and_bounded(
            vs in proptest::collection::vec(vehicle(), 1..5),
            acts in proptest::collection::vec(action(), 5),
        ) {
            let c = cfg();
            let w = WorldState::new(vs.clone());
            let bv: Vec<ActionCmd> = acts[1..vs.len()].to_vec();
            let (n1, e1) = step_world(&w, acts[0], &bv, &c).unwrap();
            let (n2, e2) = step_world(&w, acts[0], &bv, &c).unwrap();
            prop_assert_eq!(&n1, &n2);
            prop_assert_eq!(&e1, &e2);
            for (before, after) in w.vehicles.iter().zip(&n1.vehicles) {
                prop_assert!(after.v >= 0.0);
                prop_assert!((-PI..=PI).contains(&after.theta));
                let disp = libm::hypot(after.x - before.x, after.y - before.y);
                prop_assert!(disp <= (before.v + c.bounds.dv_max) * c.reward.dt + 1e-12);
            }
            prop_assert_eq!(n1.elapsed_time, f64::from(n1.step_index) * c.reward.dt);
        }

        #[test]
        fn shared_reward_terms_cancel(v in 0.0..60.0f64, av_col: bool, bv_col: bool) {
            let r = RewardConfig::default();
            let w = WorldState::new(alloc::vec![VehicleState::new(1.75, 0.0, v, 0.0)]);
            let ev = StepEvents { av_bv_collision: av_col, bv_bv_collision: bv_col, off_road: alloc::vec![false], reached_end: false };
            let rw = compute_rewards(&ev, &w, &r);
            if bv_col {
                prop_assert!((rw.av + rw.bv - rw.bv_col).abs() <= 1e-12);
            } else {
                prop_assert_eq!(rw.av + rw.bv, 0.0);
            }
        }
    }
}
