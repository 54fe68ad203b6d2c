//! Initial-state scenarios, replay transitions and the shared replay buffer.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::rng::Rng;
use crate::sim::{check_collision, ActionCmd, SimConfig, VehicleState, WorldState};

/// Initial state of one episode. Vehicle 0 is the AV.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub initial_states: Vec<VehicleState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("scenario `{id}` has {count} vehicles; at least {min} required")]
    TooFewVehicles { id: String, count: usize, min: usize },
    #[error("scenario `{id}`: vehicles {first} and {second} overlap")]
    Overlap { id: String, first: usize, second: usize },
    #[error("scenario `{id}`: vehicle {index} is off the road")]
    OffRoad { id: String, index: usize },
    #[error("scenario `{id}`: vehicle {index} has invalid kinematics ({reason})")]
    BadState { id: String, index: usize, reason: &'static str },
    #[error("could not place {vehicle_count} vehicles without overlap after {attempts} attempts")]
    Capacity { vehicle_count: usize, attempts: usize },
}

impl Scenario {
    pub fn vehicle_count(&self) -> usize {
        self.initial_states.len()
    }

    pub fn world(&self) -> WorldState {
        WorldState::new(self.initial_states.clone())
    }

    /// Checks the on-road, valid-kinematics and collision-free invariants.
    pub fn validate(&self, cfg: &SimConfig) -> Result<(), ScenarioError> {
        self.validate_with_min(cfg, 2)
    }

    pub(crate) fn validate_with_min(&self, cfg: &SimConfig, min: usize) -> Result<(), ScenarioError> {
        let id = || self.id.clone();
        if self.initial_states.len() < min {
            return Err(ScenarioError::TooFewVehicles { id: id(), count: self.initial_states.len(), min });
        }
        for (index, s) in self.initial_states.iter().enumerate() {
            if ![s.x, s.y, s.v, s.theta].iter().all(|v| v.is_finite()) {
                return Err(ScenarioError::BadState { id: id(), index, reason: "non-finite value" });
            }
            if s.v < 0.0 {
                return Err(ScenarioError::BadState { id: id(), index, reason: "negative speed" });
            }
            if s.theta.abs() > core::f64::consts::PI {
                return Err(ScenarioError::BadState { id: id(), index, reason: "heading outside [-pi, pi]" });
            }
            if !cfg.road.on_road(s.x) {
                return Err(ScenarioError::OffRoad { id: id(), index });
            }
        }
        for i in 0..self.initial_states.len() {
            for j in (i + 1)..self.initial_states.len() {
                if check_collision(&self.initial_states[i], &self.initial_states[j], &cfg.reward) {
                    return Err(ScenarioError::Overlap { id: id(), first: i, second: j });
                }
            }
        }
        Ok(())
    }
}

/// Placement rules for synthetic scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Minimum bumper-to-bumper gap between vehicles sharing a lane (m).
    pub min_gap: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Longitudinal window the vehicles are spread over, starting at the road origin (m).
    pub window: f64,
    pub max_attempts: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { min_gap: 10.0, speed_min: 15.0, speed_max: 30.0, window: 80.0, max_attempts: 1000 }
    }
}

/// Samples a collision-free scenario with `vehicle_count >= 2` vehicles at lane centers.
pub fn sample_synthetic(
    rng: &mut Rng,
    vehicle_count: usize,
    cfg: &SimConfig,
    spec: &SyntheticSpec,
) -> Result<Scenario, ScenarioError> {
    if vehicle_count < 2 {
        return Err(ScenarioError::TooFewVehicles { id: String::from("synthetic"), count: vehicle_count, min: 2 });
    }
    sample_placement(rng, vehicle_count, cfg, spec)
}

/// Placement routine behind [`sample_synthetic`]; also accepts a single vehicle
/// (the drive-alone sanity environment).
pub fn sample_placement(
    rng: &mut Rng,
    vehicle_count: usize,
    cfg: &SimConfig,
    spec: &SyntheticSpec,
) -> Result<Scenario, ScenarioError> {
    let pitch = spec.min_gap + cfg.reward.footprint_length;
    let lanes = cfg.road.lane_count;
    let per_lane_capacity = (libm::floor(spec.window / pitch) as usize).saturating_add(1);
    if vehicle_count == 0 || vehicle_count > per_lane_capacity * lanes as usize {
        return Err(ScenarioError::Capacity { vehicle_count, attempts: 0 });
    }
    for _ in 0..spec.max_attempts {
        let mut states: Vec<VehicleState> = Vec::with_capacity(vehicle_count);
        let mut lanes_used: Vec<u32> = Vec::with_capacity(vehicle_count);
        let mut ok = true;
        for _ in 0..vehicle_count {
            let lane = rng.random_range(0..lanes);
            let y = spec.window * rng.random::<f64>();
            let v = spec.speed_min + (spec.speed_max - spec.speed_min) * rng.random::<f64>();
            let clash = states
                .iter()
                .zip(&lanes_used)
                .any(|(s, &l)| l == lane && (s.y - y).abs() < pitch);
            if clash {
                ok = false;
                break;
            }
            states.push(VehicleState::new(cfg.road.lane_center(lane), y, v, 0.0));
            lanes_used.push(lane);
        }
        if !ok {
            continue;
        }
        let scenario = Scenario { id: String::from("synthetic"), initial_states: states };
        if scenario.validate_with_min(cfg, 1).is_ok() {
            return Ok(scenario);
        }
    }
    Err(ScenarioError::Capacity { vehicle_count, attempts: spec.max_attempts })
}

/// `count` synthetic scenarios with ids `{prefix}-{k}`.
pub fn sample_many(
    rng: &mut Rng,
    count: usize,
    vehicle_count: usize,
    cfg: &SimConfig,
    spec: &SyntheticSpec,
    prefix: &str,
) -> Result<Vec<Scenario>, ScenarioError> {
    (0..count)
        .map(|k| {
            let mut s = sample_synthetic(rng, vehicle_count, cfg, spec)?;
            s.id = format!("{prefix}-{k}");
            Ok(s)
        })
        .collect()
}

/// One joint step as stored in the replay buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Flattened world before the step.
    pub s: Vec<f64>,
    pub a_av: ActionCmd,
    pub a_bv: Vec<ActionCmd>,
    pub r_av: f64,
    pub r_bv: f64,
    /// Flattened world after the step.
    pub s_next: Vec<f64>,
    pub done: bool,
    /// Step index of `s_next`, kept so rule-based opponents can be queried there.
    pub next_step: u32,
}

impl Transition {
    pub fn is_consistent(&self) -> bool {
        self.s.len() == self.s_next.len() && self.s.len() == 4 * (self.a_bv.len() + 1)
    }

    fn encode(&self, w: &mut Writer) {
        w.f64s(&self.s);
        w.f64(self.a_av.dv);
        w.f64(self.a_av.dtheta);
        w.usize(self.a_bv.len());
        for a in &self.a_bv {
            w.f64(a.dv);
            w.f64(a.dtheta);
        }
        w.f64(self.r_av);
        w.f64(self.r_bv);
        w.f64s(&self.s_next);
        w.bool(self.done);
        w.u32(self.next_step);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let s = r.f64s("s")?;
        let a_av = ActionCmd::new(r.f64("a_av")?, r.f64("a_av")?);
        let n = r.usize("a_bv count")?;
        if n > r.remaining() / 16 {
            return Err(DecodeError::Truncated { what: "a_bv" });
        }
        let a_bv = (0..n)
            .map(|_| Ok(ActionCmd::new(r.f64("a_bv")?, r.f64("a_bv")?)))
            .collect::<Result<Vec<_>, DecodeError>>()?;
        let t = Transition {
            s,
            a_av,
            a_bv,
            r_av: r.f64("r_av")?,
            r_bv: r.f64("r_bv")?,
            s_next: r.f64s("s_next")?,
            done: r.bool("done")?,
            next_step: r.u32("next_step")?,
        };
        if !t.is_consistent() {
            return Err(DecodeError::Invalid { what: "transition shape" });
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BufferError {
    #[error("replay buffer holds {size} transitions; {requested} requested")]
    NotReady { size: usize, requested: usize },
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest item when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>, BufferError> {
        if self.items.is_empty() || batch_size == 0 {
            return Err(BufferError::NotReady { size: self.items.len(), requested: batch_size });
        }
        let n = self.items.len();
        Ok((0..batch_size).map(|_| rng.random_range(0..n)).collect())
    }

    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<&Transition>, BufferError> {
        let idx = self.sample_indices(batch_size, rng)?;
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn encode(&self, w: &mut Writer) {
        w.usize(self.capacity);
        w.usize(self.items.len());
        for t in &self.items {
            t.encode(w);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let capacity = r.usize("buffer capacity")?;
        let n = r.usize("buffer size")?;
        if capacity == 0 || n > capacity {
            return Err(DecodeError::Invalid { what: "buffer size" });
        }
        let mut buf = ReplayBuffer::new(capacity);
        for _ in 0..n {
            buf.push(Transition::decode(r)?);
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;

    fn transition(tag: f64) -> Transition {
        Transition {
            s: vec![tag, 0.0, 0.0, 0.0],
            a_av: ActionCmd::ZERO,
            a_bv: vec![],
            r_av: tag,
            r_bv: -tag,
            s_next: vec![tag, 1.0, 0.0, 0.0],
            done: false,
            next_step: 1,
        }
    }

    #[test]
    fn two_vehicle_sample_is_valid() {
        let cfg = SimConfig::default();
        let s = sample_synthetic(&mut rng::stream(1, "scn"), 2, &cfg, &SyntheticSpec::default()).unwrap();
        assert_eq!(s.vehicle_count(), 2);
        s.validate(&cfg).unwrap();
    }

    #[test]
    fn six_vehicle_samples_respect_lane_gaps() {
        let cfg = SimConfig::default();
        let spec = SyntheticSpec::default();
        let mut r = rng::stream(2, "scn");
        for _ in 0..200 {
            let s = sample_synthetic(&mut r, 6, &cfg, &spec).unwrap();
            s.validate(&cfg).unwrap();
            for (i, a) in s.initial_states.iter().enumerate() {
                assert!((15.0..=30.0).contains(&a.v));
                assert_eq!(a.theta, 0.0);
                assert!((a.x - cfg.road.lane_center(cfg.road.lane_of(a.x))).abs() < 1e-12);
                for b in &s.initial_states[i + 1..] {
                    if a.x == b.x {
                        assert!((a.y - b.y).abs() - cfg.reward.footprint_length >= spec.min_gap);
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let cfg = SimConfig::default();
        let spec = SyntheticSpec::default();
        let a = sample_synthetic(&mut rng::stream(5, "scn"), 6, &cfg, &spec).unwrap();
        let b = sample_synthetic(&mut rng::stream(5, "scn"), 6, &cfg, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_placement_is_a_capacity_error() {
        let cfg = SimConfig::default();
        let spec = SyntheticSpec { window: 10.0, ..SyntheticSpec::default() };
        let err = sample_synthetic(&mut rng::stream(0, "scn"), 7, &cfg, &spec).unwrap_err();
        assert!(matches!(err, ScenarioError::Capacity { .. }));
        assert!(matches!(
            sample_synthetic(&mut rng::stream(0, "scn"), 1, &cfg, &spec),
            Err(ScenarioError::TooFewVehicles { .. })
        ));
    }

    #[test]
    fn overlapping_scenario_fails_validation() {
        let cfg = SimConfig::default();
        let v = VehicleState::new(1.75, 10.0, 20.0, 0.0);
        let s = Scenario { id: "dup".into(), initial_states: vec![v, v] };
        assert_eq!(s.validate(&cfg), Err(ScenarioError::Overlap { id: "dup".into(), first: 0, second: 1 }));
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut buf = ReplayBuffer::new(3);
        for k in 0..4 {
            buf.push(transition(f64::from(k)));
        }
        assert_eq!(buf.len(), 3);
        assert!(buf.iter().all(|t| t.r_av != 0.0));
    }

    #[test]
    fn sampling_is_deterministic_and_guarded() {
        let mut buf = ReplayBuffer::new(10);
        assert!(matches!(buf.sample(1, &mut rng::stream(0, "b")), Err(BufferError::NotReady { .. })));
        for k in 0..10 {
            buf.push(transition(f64::from(k)));
        }
        let a = buf.sample_indices(32, &mut rng::stream(9, "b")).unwrap();
        let b = buf.sample_indices(32, &mut rng::stream(9, "b")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_frequency_is_uniform() {
        let mut buf = ReplayBuffer::new(10);
        for k in 0..10 {
            buf.push(transition(f64::from(k)));
        }
        let draws = 100_000;
        let mut counts = [0usize; 10];
        let mut r = rng::stream(21, "uniform");
        for t in buf.sample(draws, &mut r).unwrap() {
            counts[t.r_av as usize] += 1;
        }
        let p = 0.1;
        let mean = draws as f64 * p;
        let sd = libm::sqrt(draws as f64 * p * (1.0 - p));
        let mut chi2 = 0.0;
        for &c in &counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "count {c}");
            chi2 += (c as f64 - mean).powi(2) / mean;
        }
        // 99.9th percentile of chi-square with 9 degrees of freedom.
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }

    #[test]
    fn buffer_round_trips() {
        let mut buf = ReplayBuffer::new(4);
        for k in 0..6 {
            buf.push(transition(f64::from(k)));
        }
        let mut w = Writer::new();
        buf.encode(&mut w);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        assert_eq!(ReplayBuffer::decode(&mut r).unwrap(), buf);
        r.finish().unwrap();
    }
}
