//! Soft actor-critic pieces for one agent, written so both players' policies
//! can appear in a single differentiable objective.
//!
//! Critics always take `(observation, normalized AV action, normalized BV
//! action)`. Policy objectives are [`TwoBlockLoss`]es over `(AV params, BV
//! params)`, which is what lets the leader differentiate through the
//! follower's reparameterized action.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::diff::{self, backward, forward, forward_tape, Adam, Block, DiffError, NetSpec, ParamCheckpoint, ParamVector, Scalar, Tape, TwoBlockLoss};
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Which player a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Agent {
    Av,
    Bv,
}

impl Agent {
    pub fn other(self) -> Agent {
        match self {
            Agent::Av => Agent::Bv,
            Agent::Bv => Agent::Av,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Agent::Av => "av",
            Agent::Bv => "bv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SacConfig {
    pub alpha: f64,
    /// Separate temperature for the BV policy; `None` shares `alpha`.
    pub alpha_bv: Option<f64>,
    pub gamma: f64,
    pub tau: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    /// Policy losses read the target critics (literal form) instead of the online ones.
    pub policy_uses_target: bool,
    /// Subtract `α log π` inside the Bellman target.
    pub entropy_in_target: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            alpha_bv: None,
            gamma: 0.99,
            tau: 0.005,
            lr_policy: 3e-4,
            lr_critic: 3e-4,
            batch_size: 256,
            policy_uses_target: true,
            entropy_in_target: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SacConfigError {
    #[error("invalid SAC setting `{0}`")]
    Invalid(&'static str),
}

impl SacConfig {
    pub fn alpha_for(&self, agent: Agent) -> f64 {
        match agent {
            Agent::Av => self.alpha,
            Agent::Bv => self.alpha_bv.unwrap_or(self.alpha),
        }
    }

    pub fn validate(&self) -> Result<(), SacConfigError> {
        let bad = |c: bool, f: &'static str| if c { Err(SacConfigError::Invalid(f)) } else { Ok(()) };
        bad(!(self.alpha >= 0.0), "alpha")?;
        bad(self.alpha_bv.is_some_and(|a| !(a >= 0.0)), "alpha_bv")?;
        bad(!(self.gamma > 0.0 && self.gamma <= 1.0), "gamma")?;
        bad(!(self.tau > 0.0 && self.tau <= 1.0), "tau")?;
        bad(!(self.lr_policy > 0.0), "lr_policy")?;
        bad(!(self.lr_critic > 0.0), "lr_critic")?;
        bad(self.batch_size == 0, "batch_size")
    }
}

/// Diagonal Gaussian policy squashed into a box by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    /// Outputs `[mean_1..mean_d, log_std_1..log_std_d]`.
    pub spec: NetSpec,
    pub params: ParamVector,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// One reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// Action in the policy's box.
    pub action: Vec<f64>,
    /// `tanh(u)`, the action mapped to `[-1, 1]`.
    pub normalized: Vec<f64>,
    pub pre_squash: Vec<f64>,
    pub log_prob: f64,
}

/// Intermediate values of the squashing transform, kept for the reverse pass.
struct Squashed<S> {
    t: Vec<S>,
    sigma: Vec<S>,
    clamped: Vec<bool>,
    log_prob: S,
}

impl GaussianPolicy {
    pub fn new(spec: NetSpec, params: ParamVector, low: Vec<f64>, high: Vec<f64>) -> Self {
        assert_eq!(low.len(), high.len());
        assert_eq!(spec.output_dim, 2 * low.len(), "policy head must emit mean and log-std");
        assert_eq!(params.len(), spec.param_count());
        Self { spec, params, low, high }
    }

    /// Fresh policy with a shrunk output layer (near-zero mean, unit spread).
    pub fn init(obs_dim: usize, hidden: &[usize], low: Vec<f64>, high: Vec<f64>, rng: &mut Rng) -> Self {
        let spec = NetSpec::new(obs_dim, hidden, 2 * low.len());
        let params = spec.init_scaled_output(rng, 0.1);
        Self::new(spec, params, low, high)
    }

    pub fn act_dim(&self) -> usize {
        self.low.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn log_half_width_sum(&self) -> f64 {
        self.low.iter().zip(&self.high).map(|(l, h)| libm::log(0.5 * (h - l))).sum()
    }

    fn to_box(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(&ti, (&l, &h))| l + (h - l) * 0.5 * (ti + 1.0))
            .collect()
    }

    fn squash<S: Scalar>(&self, raw: &[S], eps: &[f64]) -> Squashed<S> {
        let d = self.act_dim();
        let mut t = Vec::with_capacity(d);
        let mut sigma = Vec::with_capacity(d);
        let mut clamped = Vec::with_capacity(d);
        let mut log_prob = S::cst(-self.log_half_width_sum());
        for k in 0..d {
            let raw_ls = raw[d + k];
            let (ls, c) = if raw_ls.re() < LOG_STD_MIN {
                (S::cst(LOG_STD_MIN), true)
            } else if raw_ls.re() > LOG_STD_MAX {
                (S::cst(LOG_STD_MAX), true)
            } else {
                (raw_ls, false)
            };
            let s = ls.exp();
            let u = raw[k] + s.scale(eps[k]);
            // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
            let log_jac = (S::cst(core::f64::consts::LN_2) - u - (u.scale(-2.0)).softplus()).scale(2.0);
            log_prob += S::cst(-0.5 * eps[k] * eps[k] - HALF_LN_2PI) - ls - log_jac;
            t.push(u.tanh());
            sigma.push(s);
            clamped.push(c);
        }
        Squashed { t, sigma, clamped, log_prob }
    }

    /// Gradient with respect to the raw network output given upstream gradients
    /// on the normalized action and on the log-probability.
    fn squash_backward<S: Scalar>(&self, sq: &Squashed<S>, eps: &[f64], g_t: &[S], g_lp: S) -> Vec<S> {
        let d = self.act_dim();
        let mut g_raw = vec![S::zero(); 2 * d];
        for k in 0..d {
            let t = sq.t[k];
            // d log_jac / du = -2 tanh(u), and log_prob carries -log_jac.
            let g_u = g_t[k] * (S::cst(1.0) - t * t) + g_lp * t.scale(2.0);
            g_raw[k] = g_u;
            if !sq.clamped[k] {
                g_raw[d + k] = g_u * sq.sigma[k].scale(eps[k]) - g_lp;
            }
        }
        g_raw
    }

    /// Reparameterized sample with caller-provided standard-normal noise.
    pub fn sample_with_noise(&self, obs: &[f64], eps: &[f64]) -> ActionSample {
        let raw = forward(&self.spec, &self.params, obs);
        let sq = self.squash(&raw, eps);
        let d = self.act_dim();
        let pre_squash = (0..d).map(|k| raw[k] + sq.sigma[k] * eps[k]).collect();
        ActionSample { action: self.to_box(&sq.t), normalized: sq.t, pre_squash, log_prob: sq.log_prob }
    }

    pub fn sample_action(&self, obs: &[f64], rng: &mut Rng) -> ActionSample {
        let eps = standard_normal(rng, self.act_dim());
        self.sample_with_noise(obs, &eps)
    }

    /// Deterministic action: the squashed mean.
    pub fn mean_action(&self, obs: &[f64]) -> ActionSample {
        self.sample_with_noise(obs, &vec![0.0; self.act_dim()])
    }

    pub fn mean_and_log_std(&self, obs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let raw = forward(&self.spec, &self.params, obs);
        let d = self.act_dim();
        let ls = raw[d..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        (raw[..d].to_vec(), ls)
    }

    /// Log-density of an action strictly inside the box.
    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> f64 {
        let (mu, ls) = self.mean_and_log_std(obs);
        let mut lp = 0.0;
        for k in 0..self.act_dim() {
            let half = 0.5 * (self.high[k] - self.low[k]);
            let t = (action[k] - self.low[k]) / half - 1.0;
            let u = libm::atanh(t);
            let z = (u - mu[k]) / libm::exp(ls[k]);
            lp += -0.5 * z * z - HALF_LN_2PI - ls[k] - libm::log(1.0 - t * t) - libm::log(half);
        }
        lp
    }

    pub fn checkpoint(&self, seed: u64) -> ParamCheckpoint {
        ParamCheckpoint { spec: self.spec.clone(), seed, params: self.params.clone() }
    }

    pub fn encode(&self, w: &mut Writer) {
        self.checkpoint(0).encode(w);
        w.f64s(&self.low);
        w.f64s(&self.high);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let ck = ParamCheckpoint::decode(r)?;
        let low = r.f64s("action low")?;
        let high = r.f64s("action high")?;
        if low.len() != high.len() || ck.spec.output_dim != 2 * low.len() {
            return Err(DecodeError::Invalid { what: "policy action bounds" });
        }
        Ok(Self::new(ck.spec, ck.params, low, high))
    }
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Two online critics with their Polyak-averaged targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinCritics {
    pub spec: NetSpec,
    pub q1: ParamVector,
    pub q2: ParamVector,
    pub q1_targ: ParamVector,
    pub q2_targ: ParamVector,
    pub tau: f64,
}

impl TwinCritics {
    pub fn init(input_dim: usize, hidden: &[usize], tau: f64, rng: &mut Rng) -> Self {
        let spec = NetSpec::new(input_dim, hidden, 1);
        let q1 = spec.init(rng);
        let q2 = spec.init(rng);
        Self { q1_targ: q1.clone(), q2_targ: q2.clone(), spec, q1, q2, tau }
    }

    fn pair(&self, target: bool) -> (&ParamVector, &ParamVector) {
        if target {
            (&self.q1_targ, &self.q2_targ)
        } else {
            (&self.q1, &self.q2)
        }
    }

    pub fn min_q(&self, input: &[f64], target: bool) -> f64 {
        let (p1, p2) = self.pair(target);
        forward(&self.spec, p1, input)[0].min(forward(&self.spec, p2, input)[0])
    }

    pub fn encode(&self, w: &mut Writer) {
        for p in [&self.q1, &self.q2, &self.q1_targ, &self.q2_targ] {
            ParamCheckpoint { spec: self.spec.clone(), seed: 0, params: p.clone() }.encode(w);
        }
        w.f64(self.tau);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let q1 = ParamCheckpoint::decode(r)?;
        let q2 = ParamCheckpoint::decode(r)?;
        let q1t = ParamCheckpoint::decode(r)?;
        let q2t = ParamCheckpoint::decode(r)?;
        if [&q2.spec, &q1t.spec, &q2t.spec].iter().any(|s| **s != q1.spec) {
            return Err(DecodeError::Invalid { what: "critic specs differ" });
        }
        let tau = r.f64("tau")?;
        Ok(Self { spec: q1.spec, q1: q1.params, q2: q2.params, q1_targ: q1t.params, q2_targ: q2t.params, tau })
    }
}

/// `target ← (1 − τ)·target + τ·online` for both critics.
pub fn polyak_update(critics: &mut TwinCritics, tau: f64) {
    for (targ, online) in [(&mut critics.q1_targ, &critics.q1), (&mut critics.q2_targ, &critics.q2)] {
        for (t, &o) in targ.iter_mut().zip(online.iter()) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
}

/// One sample prepared for the losses. Actions are normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub obs: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub t_av: Vec<f64>,
    pub t_bv: Vec<f64>,
    pub r_av: f64,
    pub r_bv: f64,
    pub done: bool,
    /// Rule-based BV action at the next state, when the BV is not a learned policy.
    pub bv_fixed_next: Option<Vec<f64>>,
    /// Reparameterization noise at `obs` for each agent.
    pub eps_av: Vec<f64>,
    pub eps_bv: Vec<f64>,
    /// Reparameterization noise at `next_obs` for each agent.
    pub eps_av_next: Vec<f64>,
    pub eps_bv_next: Vec<f64>,
}

impl BatchItem {
    pub fn reward(&self, agent: Agent) -> f64 {
        match agent {
            Agent::Av => self.r_av,
            Agent::Bv => self.r_bv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub id: u64,
    pub items: Vec<BatchItem>,
}

/// The BV side of an objective: a learned policy, or actions fixed in the batch.
#[derive(Debug, Clone, Copy)]
pub enum BvActor<'a> {
    Learned(&'a GaussianPolicy),
    Fixed,
}

impl<'a> BvActor<'a> {
    pub fn policy(self) -> Option<&'a GaussianPolicy> {
        match self {
            BvActor::Learned(p) => Some(p),
            BvActor::Fixed => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SacError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("the {0} agent has no learned policy")]
    NoPolicy(&'static str),
    #[error("rule-based BV batch item lacks its next-state action")]
    MissingFixedAction,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

fn critic_input(obs: &[f64], t_av: &[f64], t_bv: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.len() + t_av.len() + t_bv.len());
    x.extend_from_slice(obs);
    x.extend_from_slice(t_av);
    x.extend_from_slice(t_bv);
    x
}

/// Bellman targets `y = r + γ(1 − done)(min_j Q_targ,j(s′, a′) − α log π_own(a′_own | s′))`
/// with fresh next actions from the current policies.
pub fn bellman_targets(
    own: Agent,
    critics: &TwinCritics,
    av: &GaussianPolicy,
    bv: BvActor<'_>,
    batch: &Batch,
    cfg: &SacConfig,
) -> Result<Vec<f64>, SacError> {
    if batch.items.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    if own == Agent::Bv && bv.policy().is_none() {
        return Err(SacError::NoPolicy("bv"));
    }
    let alpha = cfg.alpha_for(own);
    batch
        .items
        .iter()
        .map(|it| {
            let next_av = av.sample_with_noise(&it.next_obs, &it.eps_av_next);
            let (t_bv, lp_bv) = match bv {
                BvActor::Learned(p) => {
                    let s = p.sample_with_noise(&it.next_obs, &it.eps_bv_next);
                    (s.normalized, s.log_prob)
                }
                BvActor::Fixed => (it.bv_fixed_next.clone().ok_or(SacError::MissingFixedAction)?, 0.0),
            };
            let own_lp = match own {
                Agent::Av => next_av.log_prob,
                Agent::Bv => lp_bv,
            };
            let q = critics.min_q(&critic_input(&it.next_obs, &next_av.normalized, &t_bv), true);
            let soft = if cfg.entropy_in_target { q - alpha * own_lp } else { q };
            let cont = if it.done { 0.0 } else { 1.0 };
            Ok(it.reward(own) + cfg.gamma * cont * soft)
        })
        .collect()
}

/// Regression of both online critics onto fixed targets; blocks are `(q1, q2)`.
pub struct CriticObjective<'a> {
    pub spec: &'a NetSpec,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub batch_id: u64,
}

impl<'a> CriticObjective<'a> {
    pub fn new(
        own: Agent,
        critics: &'a TwinCritics,
        av: &GaussianPolicy,
        bv: BvActor<'_>,
        batch: &Batch,
        cfg: &SacConfig,
    ) -> Result<Self, SacError> {
        let targets = bellman_targets(own, critics, av, bv, batch, cfg)?;
        let inputs = batch.items.iter().map(|it| critic_input(&it.obs, &it.t_av, &it.t_bv)).collect();
        Ok(Self { spec: &critics.spec, inputs, targets, batch_id: batch.id })
    }
}

impl TwoBlockLoss for CriticObjective<'_> {
    fn block_len(&self, _block: Block) -> usize {
        self.spec.param_count()
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], ga: &mut [S], gb: &mut [S]) -> S {
        let inv_n = 1.0 / self.inputs.len() as f64;
        let mut tape = Tape::default();
        let mut total = S::zero();
        for (x, &y) in self.inputs.iter().zip(&self.targets) {
            let xs: Vec<S> = x.iter().map(|&v| S::cst(v)).collect();
            for (p, g) in [(a, &mut *ga), (b, &mut *gb)] {
                forward_tape(self.spec, p, &xs, &mut tape);
                let r = tape.output(self.spec)[0] - S::cst(y);
                total += (r * r).scale(0.5 * inv_n);
                backward(self.spec, p, &tape, &[r.scale(inv_n)], Some(g), None);
            }
        }
        total
    }

    fn batch_id(&self) -> u64 {
        self.batch_id
    }
}

/// Mean over the batch of `Σ_j ½(Q_j(s, a_av, a_bv) − y)²`.
pub fn critic_loss(
    own: Agent,
    critics: &TwinCritics,
    av: &GaussianPolicy,
    bv: BvActor<'_>,
    batch: &Batch,
    cfg: &SacConfig,
) -> Result<f64, SacError> {
    let obj = CriticObjective::new(own, critics, av, bv, batch, cfg)?;
    Ok(diff::value(&obj, &critics.q1, &critics.q2)?)
}

/// Soft policy objective `mean α log π_own(a_own|s) − min_j Q_j(s, a_av, a_bv)`,
/// optionally minus `β · min_j Q^other_j(s, a_av, a_bv)`.
///
/// Blocks are `(AV policy params, BV policy params)`; with a fixed BV the B block
/// is empty. Both actions are reparameterized from the batch noise, so the
/// objective depends on the opponent's parameters through its action.
pub struct PolicyObjective<'a> {
    pub own: Agent,
    pub av: &'a GaussianPolicy,
    pub bv: BvActor<'a>,
    pub critics: &'a TwinCritics,
    pub regularizer: Option<(f64, &'a TwinCritics)>,
    pub batch: &'a Batch,
    pub alpha: f64,
    pub use_target: bool,
}

impl<'a> PolicyObjective<'a> {
    pub fn new(
        own: Agent,
        av: &'a GaussianPolicy,
        bv: BvActor<'a>,
        critics: &'a TwinCritics,
        batch: &'a Batch,
        cfg: &SacConfig,
    ) -> Self {
        Self {
            own,
            av,
            bv,
            critics,
            regularizer: None,
            batch,
            alpha: cfg.alpha_for(own),
            use_target: cfg.policy_uses_target,
        }
    }

    pub fn with_regularizer(mut self, beta: f64, other: &'a TwinCritics) -> Self {
        self.regularizer = Some((beta, other));
        self
    }

    /// Current `(AV params, BV params)` blocks.
    pub fn blocks(&self) -> (&'a [f64], &'a [f64]) {
        let b: &[f64] = match self.bv {
            BvActor::Learned(p) => &p.params,
            BvActor::Fixed => &[],
        };
        (&self.av.params, b)
    }
}

fn lift<S: Scalar>(p: &[f64]) -> Vec<S> {
    p.iter().map(|&v| S::cst(v)).collect()
}

/// Forward both critics of a pair and back-propagate the smaller one to the input.
fn min_critic_input_grad<S: Scalar>(
    spec: &NetSpec,
    p1: &[S],
    p2: &[S],
    x: &[S],
    tapes: &mut [Tape<S>; 2],
    scale: f64,
    g_x: &mut [S],
) -> S {
    forward_tape(spec, p1, x, &mut tapes[0]);
    forward_tape(spec, p2, x, &mut tapes[1]);
    let q1 = tapes[0].output(spec)[0];
    let q2 = tapes[1].output(spec)[0];
    let (q, pick, params) = if q2.re() < q1.re() { (q2, 1, p2) } else { (q1, 0, p1) };
    let mut gx = vec![S::zero(); x.len()];
    backward(spec, params, &tapes[pick], &[S::cst(scale)], None, Some(&mut gx));
    for (g, v) in g_x.iter_mut().zip(&gx) {
        *g += *v;
    }
    q
}

impl TwoBlockLoss for PolicyObjective<'_> {
    fn block_len(&self, block: Block) -> usize {
        match block {
            Block::A => self.av.spec.param_count(),
            Block::B => self.bv.policy().map_or(0, |p| p.spec.param_count()),
        }
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], ga: &mut [S], gb: &mut [S]) -> S {
        let n = self.batch.items.len();
        let inv_n = 1.0 / n as f64;
        let (c1, c2) = self.critics.pair(self.use_target);
        let (c1, c2) = (lift::<S>(c1), lift::<S>(c2));
        let reg = self.regularizer.map(|(beta, other)| {
            let (o1, o2) = other.pair(self.use_target);
            (beta, other, lift::<S>(o1), lift::<S>(o2))
        });
        let d_av = self.av.act_dim();
        let mut tape_av = Tape::default();
        let mut tape_bv = Tape::default();
        let mut critic_tapes = [Tape::default(), Tape::default()];
        let mut total = S::zero();
        for it in &self.batch.items {
            let obs: Vec<S> = lift(&it.obs);
            forward_tape(&self.av.spec, a, &obs, &mut tape_av);
            let sq_av = self.av.squash(tape_av.output(&self.av.spec), &it.eps_av);
            let sq_bv = match self.bv {
                BvActor::Learned(p) => {
                    forward_tape(&p.spec, b, &obs, &mut tape_bv);
                    Some(p.squash(tape_bv.output(&p.spec), &it.eps_bv))
                }
                BvActor::Fixed => None,
            };
            let t_bv: Vec<S> = match &sq_bv {
                Some(sq) => sq.t.clone(),
                None => lift(&it.t_bv),
            };
            let mut x = obs.clone();
            x.extend_from_slice(&sq_av.t);
            x.extend_from_slice(&t_bv);

            let mut g_x = vec![S::zero(); x.len()];
            let q = min_critic_input_grad(&self.critics.spec, &c1, &c2, &x, &mut critic_tapes, -inv_n, &mut g_x);
            let own_lp = match self.own {
                Agent::Av => sq_av.log_prob,
                Agent::Bv => sq_bv.as_ref().map_or(S::zero(), |s| s.log_prob),
            };
            let mut li = own_lp.scale(self.alpha) - q;
            if let Some((beta, other, o1, o2)) = &reg {
                let q_other =
                    min_critic_input_grad(&other.spec, o1, o2, &x, &mut critic_tapes, -beta * inv_n, &mut g_x);
                li -= q_other.scale(*beta);
            }
            total += li.scale(inv_n);

            let obs_dim = it.obs.len();
            let g_lp = S::cst(self.alpha * inv_n);
            let zero = S::zero();
            let g_t_av = &g_x[obs_dim..obs_dim + d_av];
            let g_raw_av = self.av.squash_backward(&sq_av, &it.eps_av, g_t_av, if self.own == Agent::Av { g_lp } else { zero });
            backward(&self.av.spec, a, &tape_av, &g_raw_av, Some(ga), None);
            if let (BvActor::Learned(p), Some(sq)) = (self.bv, &sq_bv) {
                let g_t_bv = &g_x[obs_dim + d_av..];
                let g_raw_bv = p.squash_backward(sq, &it.eps_bv, g_t_bv, if self.own == Agent::Bv { g_lp } else { zero });
                backward(&p.spec, b, &tape_bv, &g_raw_bv, Some(gb), None);
            }
        }
        total
    }

    fn batch_id(&self) -> u64 {
        self.batch.id
    }
}

/// Value of the (unregularized) policy objective at the current parameters.
pub fn policy_loss(
    own: Agent,
    av: &GaussianPolicy,
    bv: BvActor<'_>,
    critics: &TwinCritics,
    batch: &Batch,
    cfg: &SacConfig,
) -> Result<f64, SacError> {
    if batch.items.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    let obj = PolicyObjective::new(own, av, bv, critics, batch, cfg);
    let (a, b) = obj.blocks();
    Ok(diff::value(&obj, a, b)?)
}

/// Policy, critics and their optimizers for one player.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub policy: GaussianPolicy,
    pub critics: TwinCritics,
    pub policy_opt: Adam,
    pub q1_opt: Adam,
    pub q2_opt: Adam,
}

impl AgentState {
    pub fn new(policy: GaussianPolicy, critics: TwinCritics, cfg: &SacConfig) -> Self {
        let np = policy.params.len();
        let nq = critics.q1.len();
        Self {
            policy,
            critics,
            policy_opt: Adam::new(cfg.lr_policy, np),
            q1_opt: Adam::new(cfg.lr_critic, nq),
            q2_opt: Adam::new(cfg.lr_critic, nq),
        }
    }

    /// One Adam step on both critics followed by the Polyak target update.
    pub fn apply_critic_step(&mut self, grads: &diff::Gradients) {
        self.q1_opt.step(&mut self.critics.q1, &grads.a);
        self.q2_opt.step(&mut self.critics.q2, &grads.b);
        let tau = self.critics.tau;
        polyak_update(&mut self.critics, tau);
    }

    pub fn apply_policy_step(&mut self, grad: &[f64]) {
        self.policy_opt.step(&mut self.policy.params, grad);
    }

    pub fn encode(&self, w: &mut Writer) {
        self.policy.encode(w);
        self.critics.encode(w);
        self.policy_opt.encode(w);
        self.q1_opt.encode(w);
        self.q2_opt.encode(w);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            policy: GaussianPolicy::decode(r)?,
            critics: TwinCritics::decode(r)?,
            policy_opt: Adam::decode(r)?,
            q1_opt: Adam::decode(r)?,
            q2_opt: Adam::decode(r)?,
        })
    }
}

/// Gradients of the critic objective for `own` on `batch`.
pub fn critic_gradients(
    own: Agent,
    critics: &TwinCritics,
    av: &GaussianPolicy,
    bv: BvActor<'_>,
    batch: &Batch,
    cfg: &SacConfig,
) -> Result<diff::Gradients, SacError> {
    let obj = CriticObjective::new(own, critics, av, bv, batch, cfg)?;
    Ok(diff::value_and_grads(&obj, &critics.q1, &critics.q2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn policy(seed: u64, obs: usize, act: usize) -> GaussianPolicy {
        let low = vec![-0.5; act];
        let high = vec![0.5; act];
        GaussianPolicy::init(obs, &[8], low, high, &mut rng::stream(seed, "pi"))
    }

    /// Random instance with a learned BV: obs 3, AV action 2, BV action 2.
    fn instance(seed: u64, n: usize) -> (GaussianPolicy, GaussianPolicy, TwinCritics, TwinCritics, Batch) {
        let mut r = rng::stream(seed, "instance");
        let av = GaussianPolicy { params: NetSpec::new(3, &[8], 4).init(&mut r), ..policy(seed, 3, 2) };
        let bv = GaussianPolicy { params: NetSpec::new(3, &[8], 4).init(&mut r), ..policy(seed + 1, 3, 2) };
        let mut qa = TwinCritics::init(7, &[8], 0.005, &mut r);
        qa.q1_targ = qa.spec.init(&mut r);
        qa.q2_targ = qa.spec.init(&mut r);
        let qb = TwinCritics::init(7, &[8], 0.005, &mut r);
        let mut draw = |k: usize| (0..k).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let items = (0..n)
            .map(|i| BatchItem {
                obs: draw(3),
                next_obs: draw(3),
                t_av: draw(2),
                t_bv: draw(2),
                r_av: draw(1)[0],
                r_bv: draw(1)[0],
                done: i % 3 == 0,
                bv_fixed_next: None,
                eps_av: draw(2),
                eps_bv: draw(2),
                eps_av_next: draw(2),
                eps_bv_next: draw(2),
            })
            .collect();
        (av, bv, qa, qb, Batch { id: seed, items })
    }

    #[test]
    fn collapsed_spread_gives_the_squashed_mean() {
        let mut p = policy(1, 3, 2);
        let last = p.spec.layers().last().copied().unwrap();
        // Drive the log-std head far below the clamp floor.
        for k in 2..4 {
            p.params[last.bias().start + k] = -100.0;
        }
        let obs = [0.1, 0.2, 0.3];
        let mean = p.mean_action(&obs);
        let mut r = rng::stream(3, "eps");
        for _ in 0..10 {
            let s = p.sample_action(&obs, &mut r);
            for (a, m) in s.action.iter().zip(&mean.action) {
                assert!((a - m).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = policy(2, 3, 2);
        let obs = [0.5, -0.5, 0.0];
        let a = p.sample_action(&obs, &mut rng::stream(4, "s"));
        let b = p.sample_action(&obs, &mut rng::stream(4, "s"));
        assert_eq!(a, b);
        assert!(a.action.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn pre_squash_mean_matches_policy_mean() {
        let p = policy(5, 3, 2);
        let obs = [0.3, 0.1, -0.2];
        let (mu, ls) = p.mean_and_log_std(&obs);
        let n = 100_000;
        let mut r = rng::stream(6, "mc");
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let s = p.sample_action(&obs, &mut r);
            sums[0] += s.pre_squash[0];
            sums[1] += s.pre_squash[1];
        }
        for k in 0..2 {
            let sigma = libm::exp(ls[k]);
            let tol = 3.0 * sigma / libm::sqrt(n as f64);
            assert!((sums[k] / n as f64 - mu[k]).abs() <= tol);
        }
    }

    #[test]
    fn sampled_log_prob_matches_density() {
        let p = policy(7, 3, 2);
        let obs = [0.0, 0.4, -0.9];
        let s = p.sample_action(&obs, &mut rng::stream(8, "lp"));
        assert!((s.log_prob - p.log_prob(&obs, &s.action)).abs() < 1e-9);
    }

    #[test]
    fn density_integrates_to_one() {
        // One action dimension, stratified uniform points over the box.
        let mut p = policy(9, 2, 1);
        let last = p.spec.layers().last().copied().unwrap();
        p.params[last.bias().start + 1] = -0.7;
        let obs = [0.2, -0.1];
        let n = 1000;
        let mut r = rng::stream(10, "strata");
        let width = p.high[0] - p.low[0];
        let mut acc = 0.0;
        for k in 0..n {
            let u = (k as f64 + r.random::<f64>()) / n as f64;
            acc += libm::exp(p.log_prob(&obs, &[p.low[0] + width * u]));
        }
        let integral = acc * width / n as f64;
        assert!((integral - 1.0).abs() < 0.02, "{integral}");
    }

    #[test]
    fn polyak_examples() {
        let mut c = TwinCritics::init(2, &[], 0.5, &mut rng::stream(0, "c"));
        for v in c.q1_targ.iter_mut().chain(c.q2_targ.iter_mut()) {
            *v = 0.0;
        }
        for v in c.q1.iter_mut().chain(c.q2.iter_mut()) {
            *v = 1.0;
        }
        let before = c.clone();
        polyak_update(&mut c, 0.0);
        assert_eq!(c, before);
        polyak_update(&mut c, 0.5);
        polyak_update(&mut c, 0.5);
        assert!(c.q1_targ.iter().chain(c.q2_targ.iter()).all(|&v| v == 0.75));
        polyak_update(&mut c, 1.0);
        assert_eq!(c.q1_targ, c.q1);
    }

    fn constant_critics(c: f64) -> TwinCritics {
        let mut q = TwinCritics::init(7, &[4], 0.005, &mut rng::stream(0, "const"));
        for p in [&mut q.q1, &mut q.q2, &mut q.q1_targ, &mut q.q2_targ] {
            p.iter_mut().for_each(|v| *v = 0.0);
            let bias = q.spec.layers().last().unwrap().bias().start;
            p[bias] = c;
        }
        q
    }

    #[test]
    fn myopic_critic_loss_is_regression_on_rewards() {
        let (av, bv, qa, _, batch) = instance(11, 6);
        let cfg = SacConfig { gamma: 1e-300, ..SacConfig::default() };
        let loss = critic_loss(Agent::Av, &qa, &av, BvActor::Learned(&bv), &batch, &cfg).unwrap();
        let mut expect = 0.0;
        for it in &batch.items {
            let x = critic_input(&it.obs, &it.t_av, &it.t_bv);
            for p in [&qa.q1, &qa.q2] {
                let q = forward(&qa.spec, p, &x)[0];
                expect += 0.5 * (q - it.r_av).powi(2);
            }
        }
        expect /= batch.items.len() as f64;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_critic_equal_to_reward_has_zero_loss() {
        let (av, bv, _, _, mut batch) = instance(12, 5);
        for it in &mut batch.items {
            it.r_av = 2.5;
        }
        let q = constant_critics(2.5);
        let cfg = SacConfig { gamma: 1e-300, ..SacConfig::default() };
        let loss = critic_loss(Agent::Av, &q, &av, BvActor::Learned(&bv), &batch, &cfg).unwrap();
        assert!(loss.abs() < 1e-24);
    }

    #[test]
    fn policy_loss_with_constant_critics() {
        let (av, bv, _, _, batch) = instance(13, 4);
        let q = constant_critics(3.25);
        let cfg = SacConfig { alpha: 0.0, ..SacConfig::default() };
        let loss = policy_loss(Agent::Av, &av, BvActor::Learned(&bv), &q, &batch, &cfg).unwrap();
        assert_eq!(loss, -3.25);
    }

    #[test]
    fn policy_gradient_matches_finite_differences_and_couples_to_opponent() {
        let (av, bv, qa, _, batch) = instance(14, 8);
        let cfg = SacConfig::default();
        let obj = PolicyObjective::new(Agent::Av, &av, BvActor::Learned(&bv), &qa, &batch, &cfg);
        let (a, b) = obj.blocks();
        let g = diff::value_and_grads(&obj, a, b).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..a.len() {
            let mut ap = a.to_vec();
            let mut am = a.to_vec();
            ap[i] += h;
            am[i] -= h;
            let fd = (diff::value(&obj, &ap, b).unwrap() - diff::value(&obj, &am, b).unwrap()) / (2.0 * h);
            let denom = fd.abs().max(g.a[i].abs()).max(1e-6);
            worst = worst.max((fd - g.a[i]).abs() / denom);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
        assert!(g.b.norm() > 0.0);
    }

    #[test]
    fn bellman_targets_follow_the_soft_backup() {
        let (av, bv, qa, _, batch) = instance(16, 9);
        let cfg = SacConfig { gamma: 0.9, alpha: 0.3, ..SacConfig::default() };
        let got = bellman_targets(Agent::Av, &qa, &av, BvActor::Learned(&bv), &batch, &cfg).unwrap();
        for (it, y) in batch.items.iter().zip(&got) {
            let expect = if it.done {
                it.r_av
            } else {
                let na = av.sample_with_noise(&it.next_obs, &it.eps_av_next);
                let nb = bv.sample_with_noise(&it.next_obs, &it.eps_bv_next);
                let x: Vec<f64> = it.next_obs.iter().chain(&na.normalized).chain(&nb.normalized).copied().collect();
                let q = forward(&qa.spec, &qa.q1_targ, &x)[0].min(forward(&qa.spec, &qa.q2_targ, &x)[0]);
                it.r_av + 0.9 * (q - 0.3 * na.log_prob)
            };
            assert!((y - expect).abs() < 1e-12);
        }
        assert!(batch.items.iter().any(|it| it.done) && batch.items.iter().any(|it| !it.done));
    }

    #[test]
    fn critic_descent_reaches_the_bellman_fixed_point() {
        // Two one-hot states alternating deterministically; reward rho_s + kappa*a.
        // The AV acts deterministically, so Q(s, a) = c_s + kappa*a is linear in the input.
        let (rho, kappa, gamma) = ([1.0, -0.5], 0.8, 0.9);
        let spec = NetSpec::new(2, &[], 2);
        let mut params = ParamVector::zeros(spec.param_count());
        let last = spec.layers()[0];
        // Mean head: state 0 -> 0.4, state 1 -> -0.3 (pre-squash); log-std far below the floor.
        params[last.weights().start] = 0.4;
        params[last.weights().start + 1] = -0.3;
        params[last.bias().start + 1] = -100.0;
        let av = GaussianPolicy::new(spec, params, vec![-1.0], vec![1.0]);
        let pi = [libm::tanh(0.4), libm::tanh(-0.3)];

        let onehot = |k: usize| if k == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        let items: Vec<BatchItem> = [(0, -0.5), (0, 0.3), (1, 0.7), (1, -0.2)]
            .iter()
            .map(|&(k, a): &(usize, f64)| BatchItem {
                obs: onehot(k),
                next_obs: onehot(1 - k),
                t_av: vec![a],
                t_bv: vec![],
                r_av: rho[k] + kappa * a,
                r_bv: 0.0,
                done: false,
                bv_fixed_next: Some(vec![]),
                eps_av: vec![0.0],
                eps_bv: vec![],
                eps_av_next: vec![0.7],
                eps_bv_next: vec![],
            })
            .collect();
        let batch = Batch { id: 0, items };
        let cfg = SacConfig { alpha: 0.0, gamma, entropy_in_target: false, tau: 1.0, ..SacConfig::default() };
        let mut q = TwinCritics::init(3, &[], 1.0, &mut rng::stream(17, "q"));
        for _ in 0..20_000 {
            let g = critic_gradients(Agent::Av, &q, &av, BvActor::Fixed, &batch, &cfg).unwrap();
            q.q1.axpy(-0.2, &g.a);
            q.q2.axpy(-0.2, &g.b);
            polyak_update(&mut q, 1.0);
        }

        // Value iteration on V(s) = rho_s + kappa*pi(s) + gamma*V(s').
        let mut v = [0.0; 2];
        for _ in 0..2000 {
            v = [rho[0] + kappa * pi[0] + gamma * v[1], rho[1] + kappa * pi[1] + gamma * v[0]];
        }
        for (k, a) in [(0, -0.9), (0, 0.1), (1, 0.5), (1, -1.0)] {
            let truth = rho[k] + kappa * a + gamma * v[1 - k];
            let x = [onehot(k), vec![a]].concat();
            for p in [&q.q1, &q.q2] {
                let got = forward(&q.spec, p, &x)[0];
                assert!((got - truth).abs() < 1e-3, "state {k} action {a}: {got} vs {truth}");
            }
        }
    }

    #[test]
    fn shifting_critics_shifts_loss_not_gradient() {
        let (av, bv, qa, _, batch) = instance(15, 5);
        let cfg = SacConfig::default();
        let mut shifted = qa.clone();
        let bias = shifted.spec.layers().last().unwrap().bias().start;
        let c = 1.5;
        for p in [&mut shifted.q1, &mut shifted.q2, &mut shifted.q1_targ, &mut shifted.q2_targ] {
            p[bias] += c;
        }
        let o1 = PolicyObjective::new(Agent::Av, &av, BvActor::Learned(&bv), &qa, &batch, &cfg);
        let o2 = PolicyObjective::new(Agent::Av, &av, BvActor::Learned(&bv), &shifted, &batch, &cfg);
        let (a, b) = o1.blocks();
        let g1 = diff::value_and_grads(&o1, a, b).unwrap();
        let g2 = diff::value_and_grads(&o2, a, b).unwrap();
        assert!((g2.value - (g1.value - c)).abs() < 1e-12);
        assert_eq!(g1.a, g2.a);
        assert_eq!(g1.b, g2.b);
    }
}
