//! Domain adaptation for reinforcement learning via classifier-estimated
//! reward corrections.
//!
//! A policy is trained in a cheap *source* MDP with the reward
//! `r(s, a) + Δr(s, a, s')`, where `Δr = log p_target(s'|s,a) - log p_source(s'|s,a)`
//! is estimated by two binary domain classifiers. The crate contains:
//!
//! - [`mdp`]: finite MDPs, policies, trajectory sampling and exact trajectory arithmetic.
//! - [`domains`]: the wall and action-flip gridworlds and the archery task.
//! - [`maxent`]: exact soft value iteration and tabular soft Q-learning.
//! - [`correction`]: `Δr` from known dynamics, from counting classifiers and from small networks.
//! - [`darc`]: the training loop and its baselines.
//! - [`theory`]: exact numerical checks of the transfer bounds on small instances.

pub mod correction;
pub mod darc;
pub mod domains;
pub mod maxent;
pub mod mdp;
pub mod rng;
pub mod theory;

pub use correction::{
    classifier_delta_r, single_classifier_delta_r, true_delta_r, DeltaR, NetClassifierPair,
    TabularClassifierPair,
};
pub use darc::{DarcConfig, ReplayBuffer, TrainStats};
pub use domains::{ArcherySpec, Cell, GridworldSpec};
pub use maxent::{QInit, SoftQTable, TransitionReward};
pub use mdp::{DomainPair, StochasticPolicy, TabularMdp, Trajectory, Transition};
