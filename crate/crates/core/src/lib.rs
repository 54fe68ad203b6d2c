//! Allocation-only core of the Stackelberg driver model.
//!
//! The crate is `no_std` (it needs `alloc` and nothing else) and contains every
//! piece of the training stack that is pure computation:
//!
//! * [`sim`]: kinematic multi-lane highway, collision detection and rewards.
//! * [`scenario`]: scenario validation, synthetic sampling, transitions and the replay buffer.
//! * [`diff`]: small MLPs with reverse-mode gradients plus forward-over-reverse
//!   Hessian-vector and mixed second-derivative products.
//! * [`sac`]: squashed-Gaussian policies, twin critics and the soft actor-critic losses.
//! * [`stackelberg`]: follower regularization, the leader's total derivative and conjugate gradient.
//! * [`baselines`]: rule-based traffic (IDM car following with MOBIL lane choice).
//! * [`metrics`]: collision metrics, cross-testing rollouts, smoothing and seed aggregation.
//! * [`train`]: environment loop, agents, pretraining, game rounds and the baseline schedules.
//! * [`codec`]: little-endian binary encoding used by checkpoints.
//!
//! File IO, configuration files and the command line live in the `sdm` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod codec;
pub mod diff;
pub mod drivers;
pub mod metrics;
pub mod rng;
pub mod sac;
pub mod scenario;
pub mod sim;
pub mod stackelberg;
pub mod toys;
pub mod train;

pub use diff::{Block, NetSpec, ParamVector};
pub use sim::{ActionCmd, RewardConfig, RoadConfig, SimConfig, StepEvents, VehicleState, WorldState};
