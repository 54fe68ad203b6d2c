//! Rule-based background traffic: IDM car following with MOBIL lane choice
//! and a proportional lane-keeping steer.
//!
//! The learned baselines (non-game, simultaneous zero-sum, alternating) are
//! training schedules and live in [`crate::train`].

use alloc::vec::Vec;

use thiserror::Error;

use crate::sim::{ActionCmd, SimConfig, VehicleState, WorldState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleBvConfig {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub lane_change_advantage_threshold: f64,
    pub politeness: f64,
    /// Largest deceleration a lane change may impose on the new follower.
    pub safe_decel: f64,
    /// Lateral gain of the lane-keeping steer (1/s).
    pub steer_gain: f64,
}

impl Default for RuleBvConfig {
    fn default() -> Self {
        Self {
            desired_speed: 25.0,
            time_headway: 1.2,
            min_gap: 2.0,
            max_accel: 2.0,
            comfort_decel: 3.0,
            lane_change_advantage_threshold: 0.2,
            politeness: 0.3,
            safe_decel: 4.0,
            steer_gain: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleConfigError {
    #[error("invalid rule-based traffic setting `{0}`")]
    Invalid(&'static str),
}

impl RuleBvConfig {
    pub fn validate(&self) -> Result<(), RuleConfigError> {
        let positive = [
            (self.desired_speed, "desired_speed"),
            (self.time_headway, "time_headway"),
            (self.min_gap, "min_gap"),
            (self.max_accel, "max_accel"),
            (self.comfort_decel, "comfort_decel"),
            (self.lane_change_advantage_threshold, "lane_change_advantage_threshold"),
            (self.safe_decel, "safe_decel"),
            (self.steer_gain, "steer_gain"),
        ];
        for (v, name) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RuleConfigError::Invalid(name));
            }
        }
        if !(0.0..=1.0).contains(&self.politeness) {
            return Err(RuleConfigError::Invalid("politeness"));
        }
        Ok(())
    }

    /// IDM acceleration with gap `s` (bumper to bumper) to a leader at speed `v_lead`.
    pub fn idm(&self, v: f64, lead: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - libm::pow(v / self.desired_speed, 4.0);
        let interaction = match lead {
            Some((gap, v_lead)) => {
                let dv = v - v_lead;
                let s_star = self.min_gap
                    + (v * self.time_headway + v * dv / (2.0 * libm::sqrt(self.max_accel * self.comfort_decel))).max(0.0);
                let s = gap.max(0.1);
                (s_star / s) * (s_star / s)
            }
            None => 0.0,
        };
        self.max_accel * (free - interaction)
    }
}

const MAX_HEADING: f64 = 0.15;
const CHANGE_HEADING: f64 = 0.03;

/// Heading that closes lateral offset `lateral` at rate `steer_gain`.
fn keep_heading(rule: &RuleBvConfig, lateral: f64, v: f64) -> f64 {
    libm::atan(rule.steer_gain * lateral / v.max(1.0)).clamp(-MAX_HEADING, MAX_HEADING)
}

/// Lanes each vehicle occupies or is moving into. Off-road vehicles claim none.
struct Occupancy {
    lane: Vec<u32>,
    changing_to: Vec<Option<u32>>,
    active: Vec<bool>,
}

impl Occupancy {
    fn new(vs: &[VehicleState], rule: &RuleBvConfig, cfg: &SimConfig) -> Self {
        let lane: Vec<u32> = vs.iter().map(|s| cfg.road.lane_of(s.x)).collect();
        let changing_to = vs
            .iter()
            .zip(&lane)
            .map(|(s, &l)| {
                // Lane keeping tracks its heading within a step, so a persistent
                // deviation means a change is under way.
                let deviation = s.theta - keep_heading(rule, cfg.road.lane_center(l) - s.x, s.v);
                if deviation > CHANGE_HEADING && l + 1 < cfg.road.lane_count {
                    Some(l + 1)
                } else if deviation < -CHANGE_HEADING && l > 0 {
                    Some(l - 1)
                } else {
                    None
                }
            })
            .collect();
        let active = vs.iter().map(|s| cfg.road.on_road(s.x)).collect();
        Self { lane, changing_to, active }
    }

    fn claims(&self, vs: &[VehicleState], j: usize, lane: u32, cfg: &SimConfig) -> bool {
        let reach = 0.5 * (cfg.road.lane_width + cfg.reward.footprint_width);
        self.active[j]
            && (self.lane[j] == lane
                || self.changing_to[j] == Some(lane)
                || (vs[j].x - cfg.road.lane_center(lane)).abs() < reach)
    }

    /// Closest vehicles ahead of and behind `y` in `lane`, as `(index, bumper gap)`.
    fn neighbours(
        &self,
        vs: &[VehicleState],
        lane: u32,
        y: f64,
        skip: usize,
        cfg: &SimConfig,
    ) -> (Option<(usize, f64)>, Option<(usize, f64)>) {
        let len = cfg.reward.footprint_length;
        let mut ahead: Option<(usize, f64)> = None;
        let mut behind: Option<(usize, f64)> = None;
        for (j, o) in vs.iter().enumerate() {
            if j == skip || !self.claims(vs, j, lane, cfg) {
                continue;
            }
            let dy = o.y - y;
            let gap = dy.abs() - len;
            if dy >= 0.0 {
                if ahead.is_none_or(|(_, g)| gap < g) {
                    ahead = Some((j, gap));
                }
            } else if behind.is_none_or(|(_, g)| gap < g) {
                behind = Some((j, gap));
            }
        }
        (ahead, behind)
    }
}

/// Deterministic actions for every BV in `world`.
pub fn rule_bv_policy(world: &WorldState, rule: &RuleBvConfig, cfg: &SimConfig) -> Vec<ActionCmd> {
    let vs = &world.vehicles;
    let occ = Occupancy::new(vs, rule, cfg);
    let dt = cfg.reward.dt;
    (1..vs.len())
        .map(|i| {
            let me = vs[i];
            let lane = occ.lane[i];
            let lead_of = |l: u32| occ.neighbours(vs, l, me.y, i, cfg).0.map(|(j, g)| (g, vs[j].v));
            let accel_here = rule.idm(me.v, lead_of(lane));
            let mut target = occ.changing_to[i].unwrap_or(lane);
            let centred = (me.x - cfg.road.lane_center(lane)).abs() < 0.3 && me.theta.abs() < 0.02;
            if centred {
                target = lane;
                let mut best = rule.lane_change_advantage_threshold;
                for cand in [lane.checked_sub(1), Some(lane + 1).filter(|&l| l < cfg.road.lane_count)].into_iter().flatten() {
                    if cand > lane && far_lane_conflict(vs, &occ, i, cand, rule, cfg) {
                        continue;
                    }
                    if let Some(gain) = mobil_gain(vs, &occ, i, lane, cand, accel_here, rule, cfg) {
                        if gain > best {
                            best = gain;
                            target = cand;
                        }
                    }
                }
            }
            let accel = if target == lane { accel_here } else { accel_here.min(rule.idm(me.v, lead_of(target))) };
            let heading = keep_heading(rule, cfg.road.lane_center(target) - me.x, me.v);
            cfg.bounds.clamp(ActionCmd::new(accel * dt, heading - me.theta))
        })
        .collect()
}

/// Moves toward higher lane indices yield to anyone beside the target lane
/// on its far side, so two vehicles never merge into one gap from both sides.
fn far_lane_conflict(vs: &[VehicleState], occ: &Occupancy, i: usize, target: u32, rule: &RuleBvConfig, cfg: &SimConfig) -> bool {
    let far = target + 1;
    if far >= cfg.road.lane_count {
        return false;
    }
    let me = vs[i];
    let window = cfg.reward.footprint_length + rule.min_gap + me.v * rule.time_headway;
    (0..vs.len()).any(|j| j != i && occ.active[j] && occ.lane[j] == far && (vs[j].y - me.y).abs() < window)
}

/// MOBIL incentive for vehicle `i` moving from `from` to `to`, or `None` when unsafe.
#[allow(clippy::too_many_arguments)]
fn mobil_gain(
    vs: &[VehicleState],
    occ: &Occupancy,
    i: usize,
    from: u32,
    to: u32,
    accel_here: f64,
    rule: &RuleBvConfig,
    cfg: &SimConfig,
) -> Option<f64> {
    let me = vs[i];
    let (new_ahead, new_behind) = occ.neighbours(vs, to, me.y, i, cfg);
    if new_ahead.is_some_and(|(_, g)| g < rule.min_gap) || new_behind.is_some_and(|(_, g)| g < rule.min_gap) {
        return None;
    }
    let accel_there = rule.idm(me.v, new_ahead.map(|(j, g)| (g, vs[j].v)));
    let mut others = 0.0;
    if let Some((nb, gap_nb)) = new_behind {
        let follower = vs[nb];
        let before = rule.idm(follower.v, new_ahead.map(|(j, _)| (vs[j].y - follower.y - cfg.reward.footprint_length, vs[j].v)));
        let after = rule.idm(follower.v, Some((gap_nb, me.v)));
        if after < -rule.safe_decel {
            return None;
        }
        others += after - before;
    }
    let (old_ahead, old_behind) = occ.neighbours(vs, from, me.y, i, cfg);
    if let Some((ob, gap_ob)) = old_behind {
        let follower = vs[ob];
        let before = rule.idm(follower.v, Some((gap_ob, me.v)));
        let after = rule.idm(follower.v, old_ahead.map(|(j, _)| (vs[j].y - follower.y - cfg.reward.footprint_length, vs[j].v)));
        others += after - before;
    }
    Some(accel_there - accel_here + rule.politeness * others)
}
