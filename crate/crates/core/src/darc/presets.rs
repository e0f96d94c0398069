//! Tuned gridworld experiments. Reward scale, slip and horizon are chosen so
//! that the exact optima separate the methods clearly; iteration budgets are
//! the smallest that let tabular soft Q-learning get there.

use crate::domains::{build_action_flip_gridworld, build_wall_gridworld, DomainError, GridworldSpec, RIGHT};
use crate::mdp::DomainPair;

use super::{CollectPolicy, CorrectionMode, DarcConfig};

/// Which target modification a gridworld carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// Cells that are open in the source are walls in the target.
    Wall,
    /// Up and down swap at one cell in the target.
    Flip,
}

impl GridKind {
    pub fn build(self, spec: &GridworldSpec) -> Result<DomainPair, DomainError> {
        match self {
            GridKind::Wall => build_wall_gridworld(spec),
            GridKind::Flip => build_action_flip_gridworld(spec),
        }
    }
}

/// A domain plus the loop settings tuned for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub kind: GridKind,
    pub spec: GridworldSpec,
    pub config: DarcConfig,
}

impl Preset {
    pub fn pair(&self) -> DomainPair {
        self.kind.build(&self.spec).expect("preset specs are valid")
    }

    /// The config for one seed.
    pub fn with_seed(&self, seed: u64) -> DarcConfig {
        DarcConfig { seed, ..self.config.clone() }
    }
}

fn wall_spec() -> GridworldSpec {
    GridworldSpec { slip_prob: 0.05, goal_reward: 10.0, step_reward: -0.25, horizon: 40, ..GridworldSpec::wall_default() }
}

fn loop_config(spec: &GridworldSpec, iterations: usize, eval_every: usize) -> DarcConfig {
    DarcConfig {
        num_iterations: iterations,
        eval_every,
        success_states: vec![spec.goal_state()],
        ..DarcConfig::default()
    }
}

/// Obstacle transfer: the direct route is open only in the source.
pub fn wall_transfer() -> Preset {
    let spec = wall_spec();
    let config = loop_config(&spec, 100_000, 1000);
    Preset { kind: GridKind::Wall, spec, config }
}

/// Obstacle transfer with source exploration nudged toward the gap, so the
/// two domains' `(s, a)` visit frequencies differ. Used for the
/// single-classifier ablation.
pub fn wall_skewed() -> Preset {
    let spec = wall_spec();
    let config = DarcConfig {
        source_collect: CollectPolicy::Skewed { action: RIGHT, prob: 0.1 },
        ..loop_config(&spec, 30_000, 1000)
    };
    Preset { kind: GridKind::Wall, spec, config }
}

/// Obstacle transfer with the correction held back for the first quarter.
pub fn wall_warmup() -> Preset {
    let spec = wall_spec();
    let config = DarcConfig { warmup_iters: 5000, ..loop_config(&spec, 20_000, 1000) };
    Preset { kind: GridKind::Wall, spec, config }
}

/// Action flip on the direct route. Both domains collect with uniform
/// actions so that state-only statistics cannot see the flip.
pub fn flip_transfer() -> Preset {
    let spec = GridworldSpec {
        slip_prob: 0.02,
        goal_reward: 10.0,
        step_reward: -1.5,
        horizon: 12,
        ..GridworldSpec::flip_default()
    };
    let config = DarcConfig {
        source_collect: CollectPolicy::Uniform,
        target_collect: CollectPolicy::Uniform,
        ..loop_config(&spec, 5000, 500)
    };
    Preset { kind: GridKind::Flip, spec, config }
}

/// [`flip_transfer`] with action-free classifiers.
pub fn flip_matl() -> Preset {
    let mut p = flip_transfer();
    p.config.correction = CorrectionMode::ActionUnconditioned;
    p
}
