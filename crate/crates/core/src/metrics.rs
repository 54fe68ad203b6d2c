//! Collision metrics, cross-testing rollouts, smoothing and seed aggregation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use thiserror::Error;

use crate::drivers::{av_policy_dims, bv_policy_dims, dims_mismatch, AvDriver, BvDriver};
use crate::rng::Rng;
use crate::scenario::Scenario;
use crate::sim::{classify_ending, observe, step_world, Ending, SimConfig, WorldState};

/// Which controllers were paired for an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pairing {
    PretrainedAvVsRlBv,
    RlAvVsRuleBv,
    RlAvVsRlBv,
}

impl Pairing {
    pub const ALL: [Pairing; 3] = [Pairing::PretrainedAvVsRlBv, Pairing::RlAvVsRuleBv, Pairing::RlAvVsRlBv];

    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::PretrainedAvVsRlBv => "pretrained_av_vs_rl_bv",
            Pairing::RlAvVsRuleBv => "rl_av_vs_rule_bv",
            Pairing::RlAvVsRlBv => "rl_av_vs_rl_bv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub scenario_id: String,
    pub seed: u64,
    pub steps: u32,
    pub duration_s: f64,
    pub av_distance_m: f64,
    pub ended_by: Ending,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub pairing: Pairing,
    pub episodes: usize,
    pub collisions: usize,
    pub av_cr: f64,
    pub bv_cr: f64,
    pub cps: f64,
    /// Collisions per 100 m of AV travel.
    pub cpm: f64,
    /// Collisions per metre, the unscaled ratio.
    pub cpm_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no episodes to aggregate")]
    Empty,
    #[error("{0} is zero, so the rate is undefined")]
    UndefinedRate(&'static str),
    #[error("reports mix pairings {0:?} and {1:?}")]
    HeterogeneousPairings(Pairing, Pairing),
    #[error("{policy} policy does not fit scenario `{scenario}`: expected width {expected}, got {got}")]
    Dimension { policy: &'static str, scenario: String, expected: usize, got: usize },
    #[error("smoothing coefficient {0} outside [0, 1)")]
    Coefficient(f64),
    #[error("simulation failed: {0}")]
    Sim(#[from] crate::sim::SimError),
}

pub fn compute_metrics(records: &[EpisodeRecord], pairing: Pairing) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = records.len();
    let count = |e: Ending| records.iter().filter(|r| r.ended_by == e).count();
    let collisions = count(Ending::AvBvCollision);
    let total_time: f64 = records.iter().map(|r| r.duration_s).sum();
    let total_dist: f64 = records.iter().map(|r| r.av_distance_m).sum();
    if total_time <= 0.0 {
        return Err(MetricsError::UndefinedRate("total testing time"));
    }
    if total_dist <= 0.0 {
        return Err(MetricsError::UndefinedRate("total AV distance"));
    }
    let nc = collisions as f64;
    Ok(MetricsReport {
        pairing,
        episodes: n,
        collisions,
        av_cr: nc / n as f64,
        bv_cr: count(Ending::BvBvCollision) as f64 / n as f64,
        cps: nc / total_time,
        cpm: nc / (total_dist / 100.0),
        cpm_raw: nc / total_dist,
    })
}

/// Initial-speed jitter (m/s) applied to repeated runs of a scenario.
pub const REPEAT_SPEED_JITTER: f64 = 0.5;

/// Rolls out one deterministic episode from `world`.
pub fn run_episode(
    world: WorldState,
    av: &AvDriver<'_>,
    bv: &BvDriver<'_>,
    cfg: &SimConfig,
    scenario_id: &str,
    seed: u64,
) -> Result<EpisodeRecord, MetricsError> {
    let mut world = world;
    let mut distance = 0.0;
    loop {
        let obs = observe(&world, cfg);
        let (a_av, _) = av.act(&obs, None);
        let (a_bv, _) = bv.act(&world, &obs, cfg, None);
        let (next, events) = step_world(&world, a_av, &a_bv, cfg)?;
        let (p, q) = (world.av(), next.av());
        distance += libm::hypot(q.x - p.x, q.y - p.y);
        world = next;
        if let Some(ending) = classify_ending(&world, &events, &cfg.reward) {
            return Ok(EpisodeRecord {
                scenario_id: String::from(scenario_id),
                seed,
                steps: world.step_index,
                duration_s: f64::from(world.step_index) * cfg.reward.dt,
                av_distance_m: distance,
                ended_by: ending,
            });
        }
    }
}

fn check_dims(driver_policy: Option<&crate::sac::GaussianPolicy>, dims: (usize, usize), who: &'static str, s: &Scenario) -> Result<(), MetricsError> {
    match driver_policy.and_then(|p| dims_mismatch(p, dims)) {
        Some((expected, got)) => Err(MetricsError::Dimension { policy: who, scenario: s.id.clone(), expected, got }),
        None => Ok(()),
    }
}

/// Evaluates a controller pairing on every scenario. The first run of each
/// scenario uses its exact initial state; repeats jitter initial speeds.
pub fn cross_test(
    av: &AvDriver<'_>,
    bv: &BvDriver<'_>,
    scenarios: &[Scenario],
    episodes_per_scenario: usize,
    cfg: &SimConfig,
    seed: u64,
    rng: &mut Rng,
) -> Result<Vec<EpisodeRecord>, MetricsError> {
    let mut out = Vec::with_capacity(scenarios.len() * episodes_per_scenario);
    for s in scenarios {
        let n = s.vehicle_count();
        let av_policy = match av {
            AvDriver::Policy(p) => Some(*p),
            AvDriver::Fixed(_) => None,
        };
        let bv_policy = match bv {
            BvDriver::Policy(p) => Some(*p),
            _ => None,
        };
        check_dims(av_policy, av_policy_dims(n), "av", s)?;
        check_dims(bv_policy, bv_policy_dims(n), "bv", s)?;
        for k in 0..episodes_per_scenario {
            let mut world = s.world();
            if k > 0 {
                for v in &mut world.vehicles {
                    v.v = (v.v + rng.random_range(-REPEAT_SPEED_JITTER..REPEAT_SPEED_JITTER)).max(0.0);
                }
            }
            out.push(run_episode(world, av, bv, cfg, &s.id, seed)?);
        }
    }
    Ok(out)
}

/// `out[0] = in[0]`, `out[t] = coeff·out[t−1] + (1 − coeff)·in[t]`.
pub fn exp_smooth(series: &[f64], coeff: f64) -> Result<Vec<f64>, MetricsError> {
    if !(0.0..1.0).contains(&coeff) {
        return Err(MetricsError::Coefficient(coeff));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (t, &x) in series.iter().enumerate() {
        acc = if t == 0 { x } else { coeff * acc + (1.0 - coeff) * x };
        out.push(acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricValues {
    pub av_cr: f64,
    pub bv_cr: f64,
    pub cps: f64,
    pub cpm: f64,
}

impl MetricValues {
    fn of(r: &MetricsReport) -> Self {
        Self { av_cr: r.av_cr, bv_cr: r.bv_cr, cps: r.cps, cpm: r.cpm }
    }

    fn map2(self, o: Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self { av_cr: f(self.av_cr, o.av_cr), bv_cr: f(self.bv_cr, o.bv_cr), cps: f(self.cps, o.cps), cpm: f(self.cpm, o.cpm) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedAggregate {
    pub pairing: Pairing,
    pub seeds: usize,
    pub mean: MetricValues,
    /// Sample standard deviation; `None` with a single seed.
    pub spread: Option<MetricValues>,
}

/// Mean and sample standard deviation of per-seed reports of one pairing.
pub fn seed_aggregate(reports: &[MetricsReport]) -> Result<SeedAggregate, MetricsError> {
    let first = reports.first().ok_or(MetricsError::Empty)?;
    if let Some(r) = reports.iter().find(|r| r.pairing != first.pairing) {
        return Err(MetricsError::HeterogeneousPairings(first.pairing, r.pairing));
    }
    let n = reports.len() as f64;
    let sum = reports.iter().fold(MetricValues::default(), |acc, r| acc.map2(MetricValues::of(r), |a, b| a + b));
    let mean = sum.map2(sum, |s, _| s / n);
    let spread = (reports.len() > 1).then(|| {
        let ss = reports.iter().fold(MetricValues::default(), |acc, r| {
            acc.map2(MetricValues::of(r).map2(mean, |x, m| (x - m) * (x - m)), |a, b| a + b)
        });
        ss.map2(ss, |s, _| libm::sqrt(s / (n - 1.0)))
    });
    Ok(SeedAggregate { pairing: first.pairing, seeds: reports.len(), mean, spread })
}
