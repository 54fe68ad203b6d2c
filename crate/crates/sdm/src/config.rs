//! Flat `key = value` run configuration.
//!
//! Every key has a default, so an empty file is a valid configuration. The
//! resolved configuration (all keys, defaults materialized) is written into
//! every run directory and is enough to replay the run.

use std::path::{Path, PathBuf};

use sdm_core::baselines::RuleBvConfig;
use sdm_core::sac::{Agent, SacConfig};
use sdm_core::scenario::SyntheticSpec;
use sdm_core::sim::{ActionBounds, RewardConfig, RoadConfig, SimConfig};
use sdm_core::stackelberg::GameConfig;
use sdm_core::train::{Mode, ScenarioSource, TrainConfig};
use thiserror::Error;

use crate::scenario_file::{load_scenarios, ScenarioFileError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot use `{value}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: {source}")]
    AtLine { line: usize, source: Box<ConfigError> },
    #[error("{0}")]
    Io(String),
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error(transparent)]
    Scenarios(#[from] ScenarioFileError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// `synthetic` or a scenario CSV path.
    pub scenarios: String,
    pub vehicle_count: usize,
    pub road: RoadConfig,
    pub reward: RewardConfig,
    pub bounds: ActionBounds,
    pub synthetic: SyntheticSpec,
    pub sac: SacConfig,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub update_after: u64,
    pub steps_per_round: u64,
    pub cycles_per_round: u32,
    pub divergence_threshold: f64,
    pub divergence_patience: u32,
    pub snapshot_buffer: bool,
    pub mode: Mode,
    pub beta: f64,
    pub f_av: u32,
    pub f_bv: u32,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    pub damping: f64,
    pub nsg_phase_length: u64,
    pub rule: RuleBvConfig,
    /// Pretraining environment steps.
    pub steps: u64,
    /// Game-phase environment steps.
    pub game_steps: u64,
    /// Extra checkpoints, in total environment steps (pretraining included).
    pub checkpoint_marks: Vec<u64>,
    /// Pretrained checkpoint; `{seed}` is replaced by the run seed.
    pub pretrained: Option<String>,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let train = TrainConfig::default();
        let game = GameConfig::default();
        Self {
            seeds: vec![1],
            out: PathBuf::from("runs"),
            scenarios: "synthetic".into(),
            vehicle_count: 2,
            road: sim.road,
            reward: sim.reward,
            bounds: sim.bounds,
            synthetic: SyntheticSpec::default(),
            sac: train.sac,
            hidden: train.policy_hidden,
            critic_hidden: train.critic_hidden,
            buffer_capacity: train.buffer_capacity,
            update_after: train.update_after,
            steps_per_round: train.steps_per_round,
            cycles_per_round: train.cycles_per_round,
            divergence_threshold: train.divergence_threshold,
            divergence_patience: train.divergence_patience,
            snapshot_buffer: true,
            mode: Mode::Sdm,
            beta: game.beta,
            f_av: game.f_av,
            f_bv: game.f_bv,
            cg_max_iters: game.cg_max_iters,
            cg_tol: game.cg_tol,
            damping: game.damping,
            nsg_phase_length: 1000,
            rule: RuleBvConfig::default(),
            steps: 20_000,
            game_steps: 30_000,
            checkpoint_marks: Vec::new(),
            pretrained: None,
            eval_episodes: 300,
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| bad(key, v, e.to_string()))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

/// Parses `5:1` style update-frequency ratios.
pub fn parse_ratio(v: &str) -> Result<(u32, u32), ConfigError> {
    let (a, b) = v.split_once(':').ok_or_else(|| bad("freq_ratio", v, "expected `f_av:f_bv`, e.g. 5:1"))?;
    Ok((num("freq_ratio", a.trim())?, num("freq_ratio", b.trim())?))
}

impl RunConfig {
    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let r = &self.rule;
        vec![
            ("seeds", join(&self.seeds)),
            ("out", self.out.display().to_string()),
            ("scenarios", self.scenarios.clone()),
            ("vehicle_count", self.vehicle_count.to_string()),
            ("lane_count", self.road.lane_count.to_string()),
            ("lane_width", self.road.lane_width.to_string()),
            ("road_length", self.road.length.to_string()),
            ("v_max_av", self.reward.v_max_av.to_string()),
            ("r_a", self.reward.r_a.to_string()),
            ("r_b", self.reward.r_b.to_string()),
            ("gamma", self.reward.gamma.to_string()),
            ("horizon", self.reward.horizon.to_string()),
            ("dt", self.reward.dt.to_string()),
            ("footprint_length", self.reward.footprint_length.to_string()),
            ("footprint_width", self.reward.footprint_width.to_string()),
            ("dv_max", self.bounds.dv_max.to_string()),
            ("dtheta_max", self.bounds.dtheta_max.to_string()),
            ("min_gap", self.synthetic.min_gap.to_string()),
            ("speed_min", self.synthetic.speed_min.to_string()),
            ("speed_max", self.synthetic.speed_max.to_string()),
            ("spawn_window", self.synthetic.window.to_string()),
            ("alpha", self.sac.alpha.to_string()),
            ("alpha_bv", self.sac.alpha_bv.map_or("none".into(), |a| a.to_string())),
            ("tau", self.sac.tau.to_string()),
            ("lr_policy", self.sac.lr_policy.to_string()),
            ("lr_critic", self.sac.lr_critic.to_string()),
            ("batch_size", self.sac.batch_size.to_string()),
            ("policy_uses_target", self.sac.policy_uses_target.to_string()),
            ("entropy_in_target", self.sac.entropy_in_target.to_string()),
            ("hidden", join(&self.hidden)),
            ("critic_hidden", join(&self.critic_hidden)),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("update_after", self.update_after.to_string()),
            ("steps_per_round", self.steps_per_round.to_string()),
            ("cycles_per_round", self.cycles_per_round.to_string()),
            ("divergence_threshold", self.divergence_threshold.to_string()),
            ("divergence_patience", self.divergence_patience.to_string()),
            ("snapshot_buffer", self.snapshot_buffer.to_string()),
            ("mode", self.mode.as_str().into()),
            ("beta", self.beta.to_string()),
            ("freq_ratio", format!("{}:{}", self.f_av, self.f_bv)),
            ("cg_max_iters", self.cg_max_iters.to_string()),
            ("cg_tol", self.cg_tol.to_string()),
            ("damping", self.damping.to_string()),
            ("nsg_phase_length", self.nsg_phase_length.to_string()),
            ("rule_desired_speed", r.desired_speed.to_string()),
            ("rule_time_headway", r.time_headway.to_string()),
            ("rule_min_gap", r.min_gap.to_string()),
            ("rule_max_accel", r.max_accel.to_string()),
            ("rule_comfort_decel", r.comfort_decel.to_string()),
            ("rule_lane_change_threshold", r.lane_change_advantage_threshold.to_string()),
            ("rule_politeness", r.politeness.to_string()),
            ("rule_safe_decel", r.safe_decel.to_string()),
            ("rule_steer_gain", r.steer_gain.to_string()),
            ("steps", self.steps.to_string()),
            ("game_steps", self.game_steps.to_string()),
            ("checkpoint_marks", join(&self.checkpoint_marks)),
            ("pretrained", self.pretrained.clone().unwrap_or_else(|| "none".into())),
            ("eval_episodes", self.eval_episodes.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let v = v.trim();
        let r = &mut self.rule;
        match key {
            "seeds" => self.seeds = list(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "scenarios" => self.scenarios = v.to_string(),
            "vehicle_count" => self.vehicle_count = num(key, v)?,
            "lane_count" => self.road.lane_count = num(key, v)?,
            "lane_width" => self.road.lane_width = num(key, v)?,
            "road_length" => self.road.length = num(key, v)?,
            "v_max_av" => self.reward.v_max_av = num(key, v)?,
            "r_a" => self.reward.r_a = num(key, v)?,
            "r_b" => self.reward.r_b = num(key, v)?,
            "gamma" => {
                self.reward.gamma = num(key, v)?;
                self.sac.gamma = self.reward.gamma;
            }
            "horizon" => self.reward.horizon = num(key, v)?,
            "dt" => self.reward.dt = num(key, v)?,
            "footprint_length" => self.reward.footprint_length = num(key, v)?,
            "footprint_width" => self.reward.footprint_width = num(key, v)?,
            "dv_max" => self.bounds.dv_max = num(key, v)?,
            "dtheta_max" => self.bounds.dtheta_max = num(key, v)?,
            "min_gap" => self.synthetic.min_gap = num(key, v)?,
            "speed_min" => self.synthetic.speed_min = num(key, v)?,
            "speed_max" => self.synthetic.speed_max = num(key, v)?,
            "spawn_window" => self.synthetic.window = num(key, v)?,
            "alpha" => self.sac.alpha = num(key, v)?,
            "alpha_bv" => self.sac.alpha_bv = if v == "none" { None } else { Some(num(key, v)?) },
            "tau" => self.sac.tau = num(key, v)?,
            "lr_policy" => self.sac.lr_policy = num(key, v)?,
            "lr_critic" => self.sac.lr_critic = num(key, v)?,
            "batch_size" => self.sac.batch_size = num(key, v)?,
            "policy_uses_target" => self.sac.policy_uses_target = boolean(key, v)?,
            "entropy_in_target" => self.sac.entropy_in_target = boolean(key, v)?,
            "hidden" => self.hidden = list(key, v)?,
            "critic_hidden" => self.critic_hidden = list(key, v)?,
            "buffer_capacity" => self.buffer_capacity = num(key, v)?,
            "update_after" => self.update_after = num(key, v)?,
            "steps_per_round" => self.steps_per_round = num(key, v)?,
            "cycles_per_round" => self.cycles_per_round = num(key, v)?,
            "divergence_threshold" => self.divergence_threshold = num(key, v)?,
            "divergence_patience" => self.divergence_patience = num(key, v)?,
            "snapshot_buffer" => self.snapshot_buffer = boolean(key, v)?,
            "mode" => {
                self.mode = Mode::parse(v).ok_or_else(|| bad(key, v, "expected one of sdm, simgm, nsg, isdm, non-game"))?
            }
            "beta" => self.beta = num(key, v)?,
            "freq_ratio" => (self.f_av, self.f_bv) = parse_ratio(v)?,
            "cg_max_iters" => self.cg_max_iters = num(key, v)?,
            "cg_tol" => self.cg_tol = num(key, v)?,
            "damping" => self.damping = num(key, v)?,
            "nsg_phase_length" => self.nsg_phase_length = num(key, v)?,
            "rule_desired_speed" => r.desired_speed = num(key, v)?,
            "rule_time_headway" => r.time_headway = num(key, v)?,
            "rule_min_gap" => r.min_gap = num(key, v)?,
            "rule_max_accel" => r.max_accel = num(key, v)?,
            "rule_comfort_decel" => r.comfort_decel = num(key, v)?,
            "rule_lane_change_threshold" => r.lane_change_advantage_threshold = num(key, v)?,
            "rule_politeness" => r.politeness = num(key, v)?,
            "rule_safe_decel" => r.safe_decel = num(key, v)?,
            "rule_steer_gain" => r.steer_gain = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "game_steps" => self.game_steps = num(key, v)?,
            "checkpoint_marks" => self.checkpoint_marks = list(key, v)?,
            "pretrained" => self.pretrained = if v == "none" || v.is_empty() { None } else { Some(v.to_string()) },
            "eval_episodes" => self.eval_episodes = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v).map_err(|e| ConfigError::AtLine { line: i + 1, source: Box::new(e) })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig { road: self.road, reward: self.reward, bounds: self.bounds }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            sac: SacConfig { gamma: self.reward.gamma, ..self.sac },
            rule: self.rule,
            policy_hidden: self.hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            buffer_capacity: self.buffer_capacity,
            update_after: self.update_after,
            steps_per_round: self.steps_per_round,
            cycles_per_round: self.cycles_per_round,
            divergence_threshold: self.divergence_threshold,
            divergence_patience: self.divergence_patience,
        }
    }

    /// Game settings as configured; I-SDM overrides are applied by the schedule.
    pub fn game(&self) -> GameConfig {
        GameConfig {
            beta: self.beta,
            f_av: self.f_av,
            f_bv: self.f_bv,
            leader: Agent::Av,
            cg_max_iters: self.cg_max_iters,
            cg_tol: self.cg_tol,
            damping: self.damping,
            rounds: 0,
        }
    }

    /// Game settings the selected mode actually trains with.
    pub fn effective_game(&self) -> GameConfig {
        match self.mode {
            Mode::Isdm => sdm_core::stackelberg::configure_isdm(&self.game()),
            _ => self.game(),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.scenarios == "synthetic"
    }

    pub fn source(&self) -> Result<ScenarioSource, ConfigError> {
        if self.is_synthetic() {
            Ok(ScenarioSource::Synthetic { vehicle_count: self.vehicle_count, spec: self.synthetic })
        } else {
            Ok(ScenarioSource::Fixed(load_scenarios(Path::new(&self.scenarios), &self.sim())?.scenarios))
        }
    }

    pub fn pretrained_for(&self, seed: u64) -> Option<PathBuf> {
        self.pretrained.as_ref().map(|p| PathBuf::from(p.replace("{seed}", &seed.to_string())))
    }

    /// Field-level checks beyond what the parsers enforce.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |key: &str, reason: &str| Err(ConfigError::Invalid { key: key.into(), reason: reason.into() });
        if self.seeds.is_empty() {
            return inv("seeds", "at least one seed is required");
        }
        if self.is_synthetic() && self.vehicle_count < 2 {
            return inv("vehicle_count", "scenarios need an AV and at least one BV");
        }
        if !self.is_synthetic() && !Path::new(&self.scenarios).exists() {
            return inv("scenarios", "file does not exist");
        }
        if self.f_av == 0 || self.f_bv == 0 {
            return inv("freq_ratio", "both update counts must be at least 1");
        }
        if !(self.beta >= 0.0) {
            return inv("beta", "must be non-negative");
        }
        if self.eval_episodes == 0 {
            return inv("eval_episodes", "must be positive");
        }
        if self.sim().validate().is_err() {
            return inv("road/reward/bounds", "simulator settings are inconsistent");
        }
        self.train().validate().map_err(|e| match e {
            sdm_core::train::TrainError::Config(k) => ConfigError::Invalid { key: k.into(), reason: "out of range".into() },
            e => ConfigError::Invalid { key: "training".into(), reason: e.to_string() },
        })?;
        self.game().validate().map_err(|e| ConfigError::Invalid { key: "game".into(), reason: e.to_string() })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("beta = 0.2\nfreq_ratio = 5:1\nhidden = 32,32\nalpha_bv = 0.05\nlr_policy=0.0003 # comment\n").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!((back.beta, back.f_av, back.f_bv), (0.2, 5, 1));
    }

    #[test]
    fn every_key_is_settable_from_its_own_output() {
        let c = RunConfig::default();
        for (k, v) in c.entries() {
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn diagnostics_name_the_field() {
        let e = RunConfig::from_text("\nbeta = lots\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("beta"), "{e}");
        assert!(matches!(RunConfig::from_text("nope = 1"), Err(ConfigError::AtLine { .. })));
        assert!(RunConfig::from_text("freq_ratio = 5").is_err());
        let c = RunConfig::from_text("seeds = ").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid { ref key, .. }) if key == "seeds"));
    }

    #[test]
    fn isdm_effective_game() {
        let c = RunConfig::from_text("mode = isdm\nbeta = 0.7\nfreq_ratio = 5:1").unwrap();
        let g = c.effective_game();
        assert_eq!((g.beta, g.f_av, g.f_bv, g.leader), (0.0, 1, 1, Agent::Bv));
    }
}
