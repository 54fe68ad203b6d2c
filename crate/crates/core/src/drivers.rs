//! Adapters from policies and rules to simulator commands.

use alloc::vec::Vec;

use crate::baselines::{rule_bv_policy, RuleBvConfig};
use crate::rng::Rng;
use crate::sac::{ActionSample, GaussianPolicy};
use crate::sim::{observation_dim, ActionCmd, SimConfig, WorldState};

/// Who drives the AV.
#[derive(Debug, Clone, Copy)]
pub enum AvDriver<'a> {
    Policy(&'a GaussianPolicy),
    /// The same command every step; `ActionCmd::ZERO` holds speed and heading.
    Fixed(ActionCmd),
}

/// Who drives the BVs.
#[derive(Debug, Clone, Copy)]
pub enum BvDriver<'a> {
    /// One joint policy emitting `[dv, dθ]` for every BV in order.
    Policy(&'a GaussianPolicy),
    Rule(RuleBvConfig),
    Fixed(ActionCmd),
}

/// Expected `(observation, action)` widths for `vehicle_count` vehicles.
pub fn av_policy_dims(vehicle_count: usize) -> (usize, usize) {
    (observation_dim(vehicle_count), 2)
}

pub fn bv_policy_dims(vehicle_count: usize) -> (usize, usize) {
    (observation_dim(vehicle_count), 2 * vehicle_count.saturating_sub(1))
}

/// First mismatch between a policy and the dims it must have, as `(expected, got)`.
pub fn dims_mismatch(policy: &GaussianPolicy, dims: (usize, usize)) -> Option<(usize, usize)> {
    if policy.obs_dim() != dims.0 {
        Some((dims.0, policy.obs_dim()))
    } else if policy.act_dim() != dims.1 {
        Some((dims.1, policy.act_dim()))
    } else {
        None
    }
}

fn draw(policy: &GaussianPolicy, obs: &[f64], rng: Option<&mut Rng>) -> ActionSample {
    match rng {
        Some(r) => policy.sample_action(obs, r),
        None => policy.mean_action(obs),
    }
}

/// Splits a joint BV action vector into per-vehicle commands.
pub fn split_bv_action(action: &[f64]) -> Vec<ActionCmd> {
    action.chunks_exact(2).map(|c| ActionCmd::new(c[0], c[1])).collect()
}

impl AvDriver<'_> {
    /// Command for the AV; policies sample when `rng` is given and use their mean otherwise.
    pub fn act(&self, obs: &[f64], rng: Option<&mut Rng>) -> (ActionCmd, Option<ActionSample>) {
        match self {
            AvDriver::Policy(p) => {
                let s = draw(p, obs, rng);
                (ActionCmd::new(s.action[0], s.action[1]), Some(s))
            }
            AvDriver::Fixed(a) => (*a, None),
        }
    }
}

impl BvDriver<'_> {
    pub fn act(
        &self,
        world: &WorldState,
        obs: &[f64],
        cfg: &SimConfig,
        rng: Option<&mut Rng>,
    ) -> (Vec<ActionCmd>, Option<ActionSample>) {
        match self {
            BvDriver::Policy(p) => {
                let s = draw(p, obs, rng);
                (split_bv_action(&s.action), Some(s))
            }
            BvDriver::Rule(rule) => (rule_bv_policy(world, rule, cfg), None),
            BvDriver::Fixed(a) => (alloc::vec![*a; world.bv_count()], None),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, BvDriver::Policy(_))
    }
}
