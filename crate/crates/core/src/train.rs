//! Environment loop, replay-driven updates and the training schedules:
//! single-agent SAC (pretraining and the non-game baseline), leader/follower
//! rounds, simultaneous zero-sum updates and alternating phases.
//!
//! A round collects environment steps up to the next multiple of
//! `steps_per_round` and then runs `cycles_per_round` update cycles. Round
//! boundaries depend only on the absolute step count, so stopping and resuming
//! at any step reproduces an uninterrupted run exactly.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use thiserror::Error;

use crate::baselines::{rule_bv_policy, RuleBvConfig};
use crate::codec::{DecodeError, Reader, Writer};
use crate::diff::{self, DiffError};
use crate::drivers::{AvDriver, BvDriver};
use crate::rng::{self, Rng, RngState};
use crate::sac::{
    critic_gradients, policy_loss, standard_normal, Agent, AgentState, Batch, BatchItem, BvActor, GaussianPolicy,
    PolicyObjective, SacConfig, SacError, TwinCritics,
};
use crate::scenario::{sample_placement, sample_synthetic, BufferError, ReplayBuffer, Scenario, ScenarioError, SyntheticSpec, Transition};
use crate::sim::{classify_ending, compute_rewards, observe, observe_flat, step_world, Ending, SimConfig, SimError, WorldState};
use crate::stackelberg::{agent_block, follower_objective, leader_total_gradient, GameConfig, LeaderUpdateReport, StackelbergError};

/// Training mode selected by the operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Sdm,
    Isdm,
    SimGm,
    Nsg,
    NonGame,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Sdm, Mode::Isdm, Mode::SimGm, Mode::Nsg, Mode::NonGame];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sdm => "sdm",
            Mode::Isdm => "isdm",
            Mode::SimGm => "simgm",
            Mode::Nsg => "nsg",
            Mode::NonGame => "non-game",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Whether the mode trains a BV policy.
    pub fn learns_bv(self) -> bool {
        !matches!(self, Mode::NonGame)
    }
}

/// How updates are organised within a round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// SAC for the AV only, against rule-based BVs.
    SingleAgent,
    /// Leader total-derivative updates followed by follower updates.
    Stackelberg(GameConfig),
    /// One AV and one BV update from a shared parameter snapshot.
    Simultaneous,
    /// Alternating phases in which only one side learns.
    Alternating { phase_length: u64 },
}

impl Schedule {
    pub fn for_mode(mode: Mode, game: &GameConfig, phase_length: u64) -> Self {
        match mode {
            Mode::Sdm => Schedule::Stackelberg(*game),
            Mode::Isdm => Schedule::Stackelberg(crate::stackelberg::configure_isdm(game)),
            Mode::SimGm => Schedule::Simultaneous,
            Mode::Nsg => Schedule::Alternating { phase_length },
            Mode::NonGame => Schedule::SingleAgent,
        }
    }

    fn zero_sum(&self) -> bool {
        matches!(self, Schedule::Simultaneous)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sac: SacConfig,
    pub rule: RuleBvConfig,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub buffer_capacity: usize,
    /// No updates before this many environment steps.
    pub update_after: u64,
    pub steps_per_round: u64,
    pub cycles_per_round: u32,
    /// Critic loss above this for `divergence_patience` consecutive updates aborts training.
    pub divergence_threshold: f64,
    pub divergence_patience: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig::default(),
            rule: RuleBvConfig::default(),
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            buffer_capacity: 100_000,
            update_after: 1000,
            steps_per_round: 1,
            cycles_per_round: 1,
            divergence_threshold: 1e8,
            divergence_patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training setting `{0}`")]
    Config(&'static str),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Stackelberg(#[from] StackelbergError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error("critic loss {loss} above {threshold} for {patience} consecutive updates")]
    Diverged { loss: f64, threshold: f64, patience: u32 },
    #[error("{0}")]
    Incompatible(String),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Sac(SacError::Diff(e))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.sac.validate().map_err(|e| match e {
            crate::sac::SacConfigError::Invalid(f) => TrainError::Config(f),
        })?;
        self.rule.validate().map_err(|e| match e {
            crate::baselines::RuleConfigError::Invalid(f) => TrainError::Config(f),
        })?;
        let bad = |c: bool, f: &'static str| if c { Err(TrainError::Config(f)) } else { Ok(()) };
        bad(self.buffer_capacity == 0, "buffer_capacity")?;
        bad(self.steps_per_round == 0, "steps_per_round")?;
        bad(self.cycles_per_round == 0, "cycles_per_round")?;
        bad(self.policy_hidden.contains(&0), "policy_hidden")?;
        bad(self.critic_hidden.contains(&0), "critic_hidden")?;
        bad(!(self.divergence_threshold > 0.0), "divergence_threshold")?;
        bad(self.divergence_patience == 0, "divergence_patience")
    }
}

/// Where episode initial states come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    Synthetic { vehicle_count: usize, spec: SyntheticSpec },
    /// The AV alone on the road.
    DriveAlone { spec: SyntheticSpec },
    /// Fixed scenarios, drawn uniformly per episode. All must have the same vehicle count.
    Fixed(Vec<Scenario>),
}

impl ScenarioSource {
    pub fn vehicle_count(&self) -> usize {
        match self {
            ScenarioSource::Synthetic { vehicle_count, .. } => *vehicle_count,
            ScenarioSource::DriveAlone { .. } => 1,
            ScenarioSource::Fixed(s) => s.first().map_or(0, Scenario::vehicle_count),
        }
    }

    fn validate(&self, cfg: &SimConfig) -> Result<(), TrainError> {
        if let ScenarioSource::Fixed(list) = self {
            let n = self.vehicle_count();
            if list.is_empty() {
                return Err(TrainError::Incompatible(String::from("fixed scenario list is empty")));
            }
            for s in list {
                s.validate(cfg)?;
                if s.vehicle_count() != n {
                    return Err(TrainError::Incompatible(alloc::format!(
                        "scenario `{}` has {} vehicles, expected {n}",
                        s.id,
                        s.vehicle_count()
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut Rng, cfg: &SimConfig) -> Result<WorldState, TrainError> {
        Ok(match self {
            ScenarioSource::Synthetic { vehicle_count, spec } => sample_synthetic(rng, *vehicle_count, cfg, spec)?.world(),
            ScenarioSource::DriveAlone { spec } => sample_placement(rng, 1, cfg, spec)?.world(),
            ScenarioSource::Fixed(list) => list[rng.random_range(0..list.len())].world(),
        })
    }
}

/// Episodic wrapper around the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    pub cfg: SimConfig,
    pub source: ScenarioSource,
    /// Replace the BV reward by the negated AV reward.
    pub zero_sum: bool,
    world: WorldState,
    rng: Rng,
    pub episodes_finished: u64,
    pub endings: Vec<(Ending, u32)>,
}

impl Env {
    pub fn new(cfg: SimConfig, source: ScenarioSource, zero_sum: bool, mut rng: Rng) -> Result<Self, TrainError> {
        cfg.validate().map_err(|_| TrainError::Config("sim"))?;
        source.validate(&cfg)?;
        let world = source.draw(&mut rng, &cfg)?;
        Ok(Self { cfg, source, zero_sum, world, rng, episodes_finished: 0, endings: Vec::new() })
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn vehicle_count(&self) -> usize {
        self.source.vehicle_count()
    }

    /// Applies one joint action, records the transition and resets on termination.
    pub fn step(&mut self, a_av: crate::sim::ActionCmd, a_bv: Vec<crate::sim::ActionCmd>) -> Result<Transition, TrainError> {
        let b = self.cfg.bounds;
        let a_av = b.clamp(a_av);
        let a_bv: Vec<_> = a_bv.into_iter().map(|a| b.clamp(a)).collect();
        let (next, events) = step_world(&self.world, a_av, &a_bv, &self.cfg)?;
        let r = compute_rewards(&events, &next, &self.cfg.reward);
        let ending = classify_ending(&next, &events, &self.cfg.reward);
        let t = Transition {
            s: self.world.flatten(),
            a_av,
            a_bv,
            r_av: r.av,
            r_bv: if self.zero_sum { -r.av } else { r.bv },
            s_next: next.flatten(),
            done: ending.is_some(),
            next_step: next.step_index,
        };
        match ending {
            Some(e) => {
                self.episodes_finished += 1;
                self.endings.push((e, next.step_index));
                self.world = self.source.draw(&mut self.rng, &self.cfg)?;
            }
            None => self.world = next,
        }
        Ok(t)
    }

    fn encode(&self, w: &mut Writer) {
        w.f64s(&self.world.flatten());
        w.u32(self.world.step_index);
        encode_rng(w, &self.rng);
        w.u64(self.episodes_finished);
        w.usize(self.endings.len());
        for (e, s) in &self.endings {
            w.str(e.as_str());
            w.u32(*s);
        }
    }

    fn restore(&mut self, r: &mut Reader<'_>) -> Result<(), DecodeError> {
        let flat = r.f64s("world")?;
        let step = r.u32("world step")?;
        if flat.len() != 4 * self.vehicle_count() {
            return Err(DecodeError::Invalid { what: "world size" });
        }
        self.world = WorldState::from_flat(&flat, step, self.cfg.reward.dt);
        self.rng = decode_rng(r)?;
        self.episodes_finished = r.u64("episodes")?;
        let n = r.usize("endings")?;
        self.endings = (0..n)
            .map(|_| {
                let e = Ending::parse(&r.str("ending")?).ok_or(DecodeError::Invalid { what: "ending" })?;
                Ok((e, r.u32("ending step")?))
            })
            .collect::<Result<_, DecodeError>>()?;
        Ok(())
    }
}

fn encode_rng(w: &mut Writer, rng: &Rng) {
    let s = RngState::capture(rng);
    w.bytes(&s.seed);
    w.u64(s.stream);
    w.u128(s.word_pos);
}

fn decode_rng(r: &mut Reader<'_>) -> Result<Rng, DecodeError> {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32, "rng seed")?);
    Ok(RngState { seed, stream: r.u64("rng stream")?, word_pos: r.u128("rng position")? }.restore())
}

/// Per-dimension action box for `agent` with `vehicle_count` vehicles.
pub fn action_box(agent: Agent, vehicle_count: usize, cfg: &SimConfig) -> (Vec<f64>, Vec<f64>) {
    let b = cfg.bounds;
    let reps = match agent {
        Agent::Av => 1,
        Agent::Bv => vehicle_count - 1,
    };
    let high: Vec<f64> = (0..reps).flat_map(|_| [b.dv_max, b.dtheta_max]).collect();
    (high.iter().map(|h| -h).collect(), high)
}

/// Fresh policy, critics and optimizers for one agent.
pub fn init_agent(agent: Agent, vehicle_count: usize, sim: &SimConfig, cfg: &TrainConfig, rng: &mut Rng) -> AgentState {
    let obs_dim = crate::sim::observation_dim(vehicle_count);
    let (low, high) = action_box(agent, vehicle_count, sim);
    let policy = GaussianPolicy::init(obs_dim, &cfg.policy_hidden, low, high, rng);
    let critic_in = obs_dim + 2 + 2 * (vehicle_count - 1);
    let critics = TwinCritics::init(critic_in, &cfg.critic_hidden, cfg.sac.tau, rng);
    AgentState::new(policy, critics, &cfg.sac)
}

/// Which part of an update cycle produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Single,
    Leader,
    Follower,
    Simultaneous,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Single => "single",
            Role::Leader => "leader",
            Role::Follower => "follower",
            Role::Simultaneous => "simultaneous",
        }
    }
}

/// One policy-and-critic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub round: u64,
    pub env_steps: u64,
    pub agent: Agent,
    pub role: Role,
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub report: Option<LeaderUpdateReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub env_steps: u64,
    pub rounds: u64,
    pub av_updates: u64,
    pub bv_updates: u64,
}

const STATE_MAGIC: [u8; 4] = *b"SDMT";
const STATE_VERSION: u32 = 1;

/// Complete mutable state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub schedule: Schedule,
    pub env: Env,
    pub av: AgentState,
    pub bv: Option<AgentState>,
    pub buffer: ReplayBuffer,
    pub counters: Counters,
    rng_av: Rng,
    rng_bv: Rng,
    rng_batch: Rng,
    divergence_streak: u32,
}

impl Trainer {
    /// `label` separates the random streams of different phases of one experiment.
    pub fn new(
        cfg: TrainConfig,
        sim: SimConfig,
        source: ScenarioSource,
        schedule: Schedule,
        av: AgentState,
        bv: Option<AgentState>,
        seed: u64,
        label: &str,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if let Schedule::Stackelberg(g) = &schedule {
            g.validate().map_err(|e| match e {
                crate::stackelberg::GameConfigError::Invalid(f) => TrainError::Config(f),
            })?;
        }
        if let Schedule::Alternating { phase_length: 0 } = schedule {
            return Err(TrainError::Config("nsg_phase_length"));
        }
        let needs_bv = !matches!(schedule, Schedule::SingleAgent);
        if needs_bv != bv.is_some() {
            return Err(TrainError::Incompatible(String::from(if needs_bv {
                "this schedule trains a BV policy but none was supplied"
            } else {
                "single-agent training drives BVs by rule; no BV policy expected"
            })));
        }
        let n = source.vehicle_count();
        let (av_obs, av_act) = crate::drivers::av_policy_dims(n);
        if crate::drivers::dims_mismatch(&av.policy, (av_obs, av_act)).is_some() {
            return Err(TrainError::Incompatible(alloc::format!("AV policy does not fit {n}-vehicle scenarios")));
        }
        if let Some(b) = &bv {
            if n < 2 || crate::drivers::dims_mismatch(&b.policy, crate::drivers::bv_policy_dims(n)).is_some() {
                return Err(TrainError::Incompatible(alloc::format!("BV policy does not fit {n}-vehicle scenarios")));
            }
        }
        let stream = |what: &str| rng::stream(seed, &alloc::format!("{label}/{what}"));
        let env = Env::new(sim, source, schedule.zero_sum(), stream("sim"))?;
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            cfg,
            schedule,
            env,
            av,
            bv,
            counters: Counters::default(),
            rng_av: stream("policy-av"),
            rng_bv: stream("policy-bv"),
            rng_batch: stream("buffer"),
            divergence_streak: 0,
        })
    }

    fn bv_actor(&self) -> BvActor<'_> {
        match &self.bv {
            Some(b) => BvActor::Learned(&b.policy),
            None => BvActor::Fixed,
        }
    }

    /// Runs until `target_env_steps` environment steps have been taken in total.
    pub fn run(&mut self, target_env_steps: u64, log: &mut Vec<UpdateRecord>) -> Result<(), TrainError> {
        let spr = self.cfg.steps_per_round;
        while self.counters.env_steps < target_env_steps {
            let boundary = (self.counters.env_steps / spr + 1) * spr;
            let stop = boundary.min(target_env_steps);
            while self.counters.env_steps < stop {
                self.collect_step()?;
            }
            if self.counters.env_steps == boundary {
                self.round(log)?;
            }
        }
        Ok(())
    }

    fn collect_step(&mut self) -> Result<(), TrainError> {
        let world = self.env.world().clone();
        let obs = observe(&world, &self.env.cfg);
        let (a_av, _) = AvDriver::Policy(&self.av.policy).act(&obs, Some(&mut self.rng_av));
        let a_bv = match &self.bv {
            Some(b) => BvDriver::Policy(&b.policy).act(&world, &obs, &self.env.cfg, Some(&mut self.rng_bv)).0,
            None => rule_bv_policy(&world, &self.cfg.rule, &self.env.cfg),
        };
        let t = self.env.step(a_av, a_bv)?;
        self.buffer.push(t);
        self.counters.env_steps += 1;
        Ok(())
    }

    fn round(&mut self, log: &mut Vec<UpdateRecord>) -> Result<(), TrainError> {
        let ready = self.counters.env_steps >= self.cfg.update_after && self.buffer.len() >= self.cfg.sac.batch_size;
        if ready {
            for _ in 0..self.cfg.cycles_per_round {
                match self.schedule {
                    Schedule::SingleAgent => log.push(self.solo_update(Agent::Av, Role::Single)?),
                    Schedule::Stackelberg(game) => {
                        for _ in 0..game.updates_for(game.leader) {
                            log.push(self.leader_update(&game)?);
                        }
                        for _ in 0..game.updates_for(game.follower()) {
                            log.push(self.follower_update(&game)?);
                        }
                    }
                    Schedule::Simultaneous => log.extend(self.simultaneous_update()?),
                    Schedule::Alternating { .. } => {
                        let agent = self.active_phase().expect("alternating schedule");
                        log.push(self.solo_update(agent, Role::Single)?);
                    }
                }
            }
        }
        self.counters.rounds += 1;
        Ok(())
    }

    /// Learning side of the current alternating phase.
    pub fn active_phase(&self) -> Option<Agent> {
        match self.schedule {
            Schedule::Alternating { phase_length } => {
                let step = self.counters.env_steps.saturating_sub(1);
                Some(if (step / phase_length) % 2 == 0 { Agent::Av } else { Agent::Bv })
            }
            _ => None,
        }
    }

    /// Samples a batch and draws all reparameterization noise for it.
    pub fn sample_batch(&mut self) -> Result<Batch, TrainError> {
        let idx = self.buffer.sample_indices(self.cfg.sac.batch_size, &mut self.rng_batch)?;
        let sim = &self.env.cfg;
        let b = sim.bounds;
        let bv_dim = self.bv.as_ref().map_or(0, |s| s.policy.act_dim());
        let transitions: Vec<&Transition> = self.buffer.iter().collect();
        let mut items = Vec::with_capacity(idx.len());
        for i in idx {
            let t = transitions[i];
            let bv_fixed_next = if self.bv.is_none() {
                let w = WorldState::from_flat(&t.s_next, t.next_step, sim.reward.dt);
                let acts = rule_bv_policy(&w, &self.cfg.rule, sim);
                Some(acts.iter().flat_map(|a| b.normalize(b.clamp(*a))).collect())
            } else {
                None
            };
            items.push(BatchItem {
                obs: observe_flat(&t.s, sim),
                next_obs: observe_flat(&t.s_next, sim),
                t_av: b.normalize(t.a_av).to_vec(),
                t_bv: t.a_bv.iter().flat_map(|a| b.normalize(*a)).collect(),
                r_av: t.r_av,
                r_bv: t.r_bv,
                done: t.done,
                bv_fixed_next,
                eps_av: standard_normal(&mut self.rng_batch, 2),
                eps_bv: standard_normal(&mut self.rng_batch, bv_dim),
                eps_av_next: standard_normal(&mut self.rng_batch, 2),
                eps_bv_next: standard_normal(&mut self.rng_batch, bv_dim),
            });
        }
        let id = self.counters.av_updates + self.counters.bv_updates;
        Ok(Batch { id, items })
    }

    fn agent_mut(&mut self, agent: Agent) -> &mut AgentState {
        match agent {
            Agent::Av => &mut self.av,
            Agent::Bv => self.bv.as_mut().expect("BV agent present"),
        }
    }

    fn agent(&self, agent: Agent) -> &AgentState {
        match agent {
            Agent::Av => &self.av,
            Agent::Bv => self.bv.as_ref().expect("BV agent present"),
        }
    }

    fn check_divergence(&mut self, loss: f64) -> Result<(), TrainError> {
        if loss > self.cfg.divergence_threshold {
            self.divergence_streak += 1;
            if self.divergence_streak >= self.cfg.divergence_patience {
                return Err(TrainError::Diverged {
                    loss,
                    threshold: self.cfg.divergence_threshold,
                    patience: self.cfg.divergence_patience,
                });
            }
        } else {
            self.divergence_streak = 0;
        }
        Ok(())
    }

    fn bump(&mut self, agent: Agent) {
        match agent {
            Agent::Av => self.counters.av_updates += 1,
            Agent::Bv => self.counters.bv_updates += 1,
        }
    }

    fn critic_step(&mut self, agent: Agent, batch: &Batch) -> Result<f64, TrainError> {
        let grads = critic_gradients(agent, &self.agent(agent).critics, &self.av.policy, self.bv_actor(), batch, &self.cfg.sac)?;
        self.check_divergence(grads.value)?;
        self.agent_mut(agent).apply_critic_step(&grads);
        Ok(grads.value)
    }

    fn record(&self, agent: Agent, role: Role, critic_loss: f64, policy_loss: f64, report: Option<LeaderUpdateReport>) -> UpdateRecord {
        UpdateRecord { round: self.counters.rounds, env_steps: self.counters.env_steps, agent, role, critic_loss, policy_loss, report }
    }

    /// Plain SAC update for one agent; the other side is treated as part of the environment.
    fn solo_update(&mut self, agent: Agent, role: Role) -> Result<UpdateRecord, TrainError> {
        let batch = self.sample_batch()?;
        let critic_loss = self.critic_step(agent, &batch)?;
        let obj = PolicyObjective::new(agent, &self.av.policy, self.bv_actor(), &self.agent(agent).critics, &batch, &self.cfg.sac);
        let (a, b) = obj.blocks();
        let g = diff::value_and_grads(&obj, a, b)?;
        let grad = g.block(agent_block(agent)).clone();
        self.agent_mut(agent).apply_policy_step(&grad);
        self.bump(agent);
        Ok(self.record(agent, role, critic_loss, g.value, None))
    }

    fn leader_update(&mut self, game: &GameConfig) -> Result<UpdateRecord, TrainError> {
        let leader = game.leader;
        let batch = self.sample_batch()?;
        let critic_loss = self.critic_step(leader, &batch)?;
        let bv = self.bv.as_ref().expect("game schedules have a BV");
        let sac = &self.cfg.sac;
        let leader_loss = PolicyObjective::new(leader, &self.av.policy, BvActor::Learned(&bv.policy), &self.agent(leader).critics, &batch, sac);
        let follower_loss = follower_objective(
            &self.av.policy,
            &bv.policy,
            &self.agent(game.follower()).critics,
            &self.agent(leader).critics,
            &batch,
            sac,
            game,
        );
        let (a, b) = leader_loss.blocks();
        let value = diff::value(&leader_loss, a, b)?;
        let (grad, report) = leader_total_gradient(&leader_loss, &follower_loss, agent_block(leader), a, b, game)?;
        self.agent_mut(leader).apply_policy_step(&grad);
        self.bump(leader);
        Ok(self.record(leader, Role::Leader, critic_loss, value, Some(report)))
    }

    fn follower_update(&mut self, game: &GameConfig) -> Result<UpdateRecord, TrainError> {
        let follower = game.follower();
        let batch = self.sample_batch()?;
        let critic_loss = self.critic_step(follower, &batch)?;
        let bv = self.bv.as_ref().expect("game schedules have a BV");
        let obj = follower_objective(
            &self.av.policy,
            &bv.policy,
            &self.agent(follower).critics,
            &self.agent(game.leader).critics,
            &batch,
            &self.cfg.sac,
            game,
        );
        let (a, b) = obj.blocks();
        let g = diff::value_and_grads(&obj, a, b)?;
        let grad = g.block(agent_block(follower)).clone();
        self.agent_mut(follower).apply_policy_step(&grad);
        self.bump(follower);
        Ok(self.record(follower, Role::Follower, critic_loss, g.value, None))
    }

    /// Both agents' critic and policy gradients from one snapshot, applied afterwards.
    fn simultaneous_update(&mut self) -> Result<[UpdateRecord; 2], TrainError> {
        let batch = self.sample_batch()?;
        let sac = &self.cfg.sac;
        let bv = self.bv.as_ref().expect("simultaneous schedule has a BV");
        let actor = BvActor::Learned(&bv.policy);
        let mut out = Vec::with_capacity(2);
        let mut steps = Vec::with_capacity(2);
        for agent in [Agent::Av, Agent::Bv] {
            let st = self.agent(agent);
            let cg = critic_gradients(agent, &st.critics, &self.av.policy, actor, &batch, sac)?;
            let obj = PolicyObjective::new(agent, &self.av.policy, actor, &st.critics, &batch, sac);
            let (a, b) = obj.blocks();
            let pg = diff::value_and_grads(&obj, a, b)?;
            out.push((agent, cg.value, pg.value));
            steps.push((agent, cg, pg.block(agent_block(agent)).clone()));
        }
        for (agent, cg, pg) in steps {
            self.check_divergence(cg.value)?;
            let st = self.agent_mut(agent);
            st.apply_critic_step(&cg);
            st.apply_policy_step(&pg);
            self.bump(agent);
        }
        let rec = |i: usize| {
            let (agent, c, p) = out[i];
            self.record(agent, Role::Simultaneous, c, p, None)
        };
        Ok([rec(0), rec(1)])
    }

    /// Serialized dynamic state: agents, buffer, environment, random streams and counters.
    pub fn encode_state(&self, include_buffer: bool) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&STATE_MAGIC);
        w.u32(STATE_VERSION);
        self.av.encode(&mut w);
        w.bool(self.bv.is_some());
        if let Some(b) = &self.bv {
            b.encode(&mut w);
        }
        w.bool(include_buffer);
        if include_buffer {
            self.buffer.encode(&mut w);
        }
        self.env.encode(&mut w);
        for r in [&self.rng_av, &self.rng_bv, &self.rng_batch] {
            encode_rng(&mut w, r);
        }
        let c = self.counters;
        for v in [c.env_steps, c.rounds, c.av_updates, c.bv_updates] {
            w.u64(v);
        }
        w.u32(self.divergence_streak);
        w.into_bytes()
    }

    /// Restores state written by [`Trainer::encode_state`] into a trainer built
    /// from the same configuration.
    pub fn restore_state(&mut self, bytes: &[u8]) -> Result<(), DecodeError> {
        let mut r = Reader::new(bytes);
        r.magic(STATE_MAGIC)?;
        r.version(STATE_VERSION)?;
        let av = AgentState::decode(&mut r)?;
        let bv = if r.bool("has bv")? { Some(AgentState::decode(&mut r)?) } else { None };
        if av.policy.spec != self.av.policy.spec || bv.as_ref().map(|b| &b.policy.spec) != self.bv.as_ref().map(|b| &b.policy.spec) {
            return Err(DecodeError::Invalid { what: "agent shapes differ from the configured run" });
        }
        let buffer = if r.bool("has buffer")? { Some(ReplayBuffer::decode(&mut r)?) } else { None };
        self.env.restore(&mut r)?;
        self.rng_av = decode_rng(&mut r)?;
        self.rng_bv = decode_rng(&mut r)?;
        self.rng_batch = decode_rng(&mut r)?;
        self.counters = Counters {
            env_steps: r.u64("env steps")?,
            rounds: r.u64("rounds")?,
            av_updates: r.u64("av updates")?,
            bv_updates: r.u64("bv updates")?,
        };
        self.divergence_streak = r.u32("divergence streak")?;
        r.finish()?;
        self.av = av;
        self.bv = bv;
        if let Some(b) = buffer {
            self.buffer = b;
        }
        Ok(())
    }
}

/// Agents stored in a state written by [`Trainer::encode_state`], without the rest of the run.
pub fn decode_agents(bytes: &[u8]) -> Result<(AgentState, Option<AgentState>), DecodeError> {
    let mut r = Reader::new(bytes);
    r.magic(STATE_MAGIC)?;
    r.version(STATE_VERSION)?;
    let av = AgentState::decode(&mut r)?;
    let bv = if r.bool("has bv")? { Some(AgentState::decode(&mut r)?) } else { None };
    Ok((av, bv))
}

/// Single-agent SAC against rule-based BVs from a fresh AV.
pub fn pretrain_av(
    cfg: &TrainConfig,
    sim: SimConfig,
    source: ScenarioSource,
    steps: u64,
    seed: u64,
    log: &mut Vec<UpdateRecord>,
) -> Result<Trainer, TrainError> {
    let n = source.vehicle_count();
    let av = init_agent(Agent::Av, n, &sim, cfg, &mut rng::stream(seed, "init/av"));
    let mut t = Trainer::new(cfg.clone(), sim, source, Schedule::SingleAgent, av, None, seed, "pretrain")?;
    t.run(steps, log)?;
    Ok(t)
}

/// Game-phase trainer seeded with a (pretrained) AV and a fresh BV.
pub fn game_trainer(
    cfg: &TrainConfig,
    sim: SimConfig,
    source: ScenarioSource,
    mode: Mode,
    game: &GameConfig,
    phase_length: u64,
    av: AgentState,
    seed: u64,
) -> Result<Trainer, TrainError> {
    let n = source.vehicle_count();
    let schedule = Schedule::for_mode(mode, game, phase_length);
    let bv = mode.learns_bv().then(|| init_agent(Agent::Bv, n, &sim, cfg, &mut rng::stream(seed, "init/bv")));
    // Optimizer state restarts with the game; parameters carry over.
    let av = AgentState::new(av.policy, av.critics, &cfg.sac);
    Trainer::new(cfg.clone(), sim, source, schedule, av, bv, seed, mode.as_str())
}

/// Mean per-step speed reward of a deterministic AV policy over `episodes` drawn from `source`.
pub fn mean_speed_reward(
    policy: &GaussianPolicy,
    bv: &BvDriver<'_>,
    sim: &SimConfig,
    source: &ScenarioSource,
    episodes: usize,
    rng: &mut Rng,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut steps = 0u64;
    for _ in 0..episodes {
        let mut world = source.draw(rng, sim)?;
        loop {
            let obs = observe(&world, sim);
            let (a_av, _) = AvDriver::Policy(policy).act(&obs, None);
            let (a_bv, _) = bv.act(&world, &obs, sim, None);
            let (next, events) = step_world(&world, a_av, &a_bv, sim)?;
            total += compute_rewards(&events, &next, &sim.reward).av_speed;
            steps += 1;
            let done = classify_ending(&next, &events, &sim.reward).is_some();
            world = next;
            if done {
                break;
            }
        }
    }
    Ok(total / steps as f64)
}

/// Current policy losses of both agents on a fresh batch, for diagnostics.
pub fn policy_losses(t: &mut Trainer) -> Result<(f64, Option<f64>), TrainError> {
    let batch = t.sample_batch()?;
    let sac = t.cfg.sac;
    let av = policy_loss(Agent::Av, &t.av.policy, t.bv_actor(), &t.av.critics, &batch, &sac)?;
    let bv = match &t.bv {
        Some(b) => Some(policy_loss(Agent::Bv, &t.av.policy, BvActor::Learned(&b.policy), &b.critics, &batch, &sac)?),
        None => None,
    };
    Ok((av, bv))
}

pub use crate::drivers::split_bv_action as split_joint_bv_action;
