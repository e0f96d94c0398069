//! The training loop that learns in the source domain with the corrected
//! reward `r + Δr`, and the baselines it is compared against.
//!
//! Each iteration collects one source episode, every
//! `target_collect_period`-th iteration also one target episode, updates the
//! domain classifiers, and applies soft Q-learning updates drawn from the
//! source buffer only. Target experience feeds the classifiers and nothing
//! else.

mod archery;
pub mod presets;

pub use archery::{argmax, run_archery, ArcheryConfig, ArcheryCurves};

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::correction::{
    classifier_delta_r, single_classifier_delta_r, CorrectionError, DeltaR, Example, NetClassifierPair,
    NetConfig, NetTrainer, OneHotEncoder, OracleDeltaR, SingleClassifierMode, TabularClassifierPair,
    DEFAULT_CLAMP,
};
use crate::domains::Domain;
use crate::maxent::{boltzmann_row, LearningRateSchedule, QInit, SoftQLearner, SoftQTable, SolverError};
use crate::mdp::{sample_trajectory, sample_trajectory_with, DomainPair, MdpError, StochasticPolicy, TabularMdp, Trajectory, Transition};
use crate::rng::{stream, Stream};

#[derive(Debug, Error)]
pub enum DarcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    /// Classifier training failed; the statistics gathered so far are kept.
    #[error("run aborted at iteration {}: {source}", stats.records.len())]
    Aborted {
        source: CorrectionError,
        stats: Box<TrainStats>,
    },
}

/// FIFO transition store with optional capacity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: Option<usize>,
    inserted: u64,
}

impl ReplayBuffer {
    /// `None` keeps everything.
    pub fn new(capacity: Option<usize>) -> Self {
        Self { items: VecDeque::new(), capacity, inserted: 0 }
    }

    /// Appends `tr`, returning the evicted oldest transition when full.
    pub fn push(&mut self, tr: Transition) -> Option<Transition> {
        self.inserted += 1;
        let evicted = match self.capacity {
            Some(c) if self.items.len() >= c => self.items.pop_front(),
            _ => None,
        };
        if self.capacity != Some(0) {
            self.items.push_back(tr);
        }
        evicted
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Total number of pushes, including evicted transitions.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` draws, uniform with replacement; empty when the buffer is.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// How `Δr` is estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierKind {
    /// Counting classifiers with the given pseudo-count.
    Tabular { smoothing: f64 },
    /// Feed-forward classifiers over one-hot features.
    Net(NetConfig),
    /// The exact correction read from both transition tables.
    Oracle,
}

/// Which logit combination forms `Δr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMode {
    /// Four-term expression from the `(s,a,s')` and `(s,a)` classifiers.
    Full,
    /// `(s,a,s')` classifier alone.
    SasOnly,
    /// Classifiers that never see the action.
    ActionUnconditioned,
}

/// Behavior policy used to collect episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CollectPolicy {
    /// The current Boltzmann policy.
    Current,
    /// Uniform over actions.
    Uniform,
    /// Takes `action` with probability `prob`, otherwise follows the current policy.
    Skewed { action: usize, prob: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarcConfig {
    pub num_iterations: usize,
    /// A target episode is collected after every this many iterations.
    pub target_collect_period: usize,
    /// Iterations during which `Δr` is computed but not used.
    pub warmup_iters: usize,
    pub classifier: ClassifierKind,
    pub correction: CorrectionMode,
    pub clamp_bound: Option<f64>,
    pub schedule: LearningRateSchedule,
    pub q_init: QInit,
    /// Transitions per soft Q-learning step.
    pub rl_batch_size: usize,
    pub rl_updates_per_iter: usize,
    /// Multiplies `rl_updates_per_iter`; the "many updates per transition" knob.
    pub update_multiplier: usize,
    /// Gradient steps per iteration for network classifiers; counting
    /// classifiers are exact after every observation.
    pub classifier_updates_per_iter: usize,
    pub source_collect: CollectPolicy,
    pub target_collect: CollectPolicy,
    pub buffer_capacity: Option<usize>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Reaching any of these states counts as success.
    pub success_states: Vec<usize>,
    /// Source-only pretraining iterations before target training (fine-tuning baseline).
    pub finetune_source_iters: usize,
    /// Record elapsed milliseconds per iteration; off keeps runs bit-identical.
    pub record_timing: bool,
    pub seed: u64,
}

impl Default for DarcConfig {
    fn default() -> Self {
        Self {
            num_iterations: 2000,
            target_collect_period: 10,
            warmup_iters: 0,
            classifier: ClassifierKind::Tabular { smoothing: 0.5 },
            correction: CorrectionMode::Full,
            clamp_bound: Some(DEFAULT_CLAMP),
            schedule: LearningRateSchedule::default(),
            q_init: QInit::default(),
            rl_batch_size: 64,
            rl_updates_per_iter: 1,
            update_multiplier: 1,
            classifier_updates_per_iter: 1,
            source_collect: CollectPolicy::Current,
            target_collect: CollectPolicy::Current,
            buffer_capacity: None,
            eval_every: 10,
            eval_episodes: 100,
            success_states: Vec::new(),
            finetune_source_iters: 0,
            record_timing: false,
            seed: 0,
        }
    }
}

impl DarcConfig {
    pub fn validate(&self, pair: &DomainPair) -> Result<(), DarcError> {
        let bad = |m: &str| Err(DarcError::Config(m.to_string()));
        if self.num_iterations == 0 {
            return bad("num_iterations must be at least 1");
        }
        if self.target_collect_period == 0 {
            return bad("target_collect_period must be at least 1");
        }
        if self.rl_batch_size == 0 || self.rl_updates_per_iter == 0 || self.update_multiplier == 0 {
            return bad("RL batch size, updates per iteration and multiplier must be positive");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("evaluation cadence and episode count must be positive");
        }
        if let Some(c) = self.clamp_bound {
            if !(c > 0.0) {
                return bad("clamp_bound must be positive");
            }
        }
        if self.success_states.iter().any(|&s| s >= pair.num_states()) {
            return bad("success state out of range");
        }
        for c in [self.source_collect, self.target_collect] {
            if let CollectPolicy::Skewed { action, prob } = c {
                if action >= pair.num_actions() || !(0.0..=1.0).contains(&prob) {
                    return bad("skewed collection needs a valid action and a probability");
                }
            }
        }
        match &self.classifier {
            ClassifierKind::Tabular { smoothing } if !(*smoothing > 0.0) => bad("smoothing must be positive"),
            ClassifierKind::Net(n) => n.validate().map_err(DarcError::from),
            _ => Ok(()),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterRecord {
    pub iter: usize,
    /// Mean correction over this iteration's source episode.
    pub mean_delta_r: f64,
    pub loss_sas: f64,
    pub loss_sa: f64,
    /// Return of the episode collected for training this iteration.
    pub source_return: f64,
    /// Latest target-domain evaluation.
    pub target_return: f64,
    pub target_success: f64,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainStats {
    pub records: Vec<IterRecord>,
    pub source_rollouts: usize,
    pub target_rollouts: usize,
    /// Cached support check of the pair; training continues either way.
    pub support_ok: bool,
}

pub const STATS_HEADER: &str = "iter,mean_delta_r,loss_sas,loss_sa,source_return,target_return,target_success,wall_clock_ms";

impl TrainStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(STATS_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iter, r.mean_delta_r, r.loss_sas, r.loss_sa, r.source_return, r.target_return, r.target_success, r.wall_clock_ms
            )
            .unwrap();
        }
        out
    }

    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    pub fn final_success(&self) -> f64 {
        self.last().map_or(0.0, |r| r.target_success)
    }

    /// Least-squares slope of `mean_delta_r` against the iteration index
    /// over records with `from <= iter < to`; NaN with fewer than two.
    pub fn delta_r_slope(&self, from: usize, to: usize) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .records
            .iter()
            .filter(|r| r.iter >= from && r.iter < to)
            .map(|r| (r.iter as f64, r.mean_delta_r))
            .collect();
        if pts.len() < 2 {
            return f64::NAN;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    pub fn is_finite(&self) -> bool {
        self.records.iter().all(|r| {
            [r.mean_delta_r, r.loss_sas, r.loss_sa, r.source_return, r.target_return, r.target_success, r.wall_clock_ms]
                .iter()
                .all(|v| v.is_finite())
        })
    }
}

/// One-sided sign test: probability of at least `wins` successes in
/// `trials` fair coin flips.
pub fn sign_test_p_value(wins: usize, trials: usize) -> f64 {
    let mut p = 0.0;
    for k in wins..=trials {
        let mut c = 1.0;
        for i in 0..k {
            c *= (trials - i) as f64 / (i + 1) as f64;
        }
        p += c;
    }
    p / 2f64.powi(trials as i32)
}

/// Summary of evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub episodes: usize,
    pub mean_return: f64,
    /// Normal-approximation 95% interval of the mean return.
    pub return_ci: (f64, f64),
    pub success_rate: f64,
    /// Wilson 95% interval of the success rate.
    pub success_ci: (f64, f64),
}

const Z95: f64 = 1.959_963_984_540_054;

/// Rolls out `policy` for `n_episodes`; an episode succeeds if it reaches
/// any of `success_states`.
pub fn evaluate_policy<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    n_episodes: usize,
    success_states: &[usize],
    rng: &mut R,
) -> Result<Evaluation, MdpError> {
    let mut returns = Vec::with_capacity(n_episodes);
    let mut hits = 0usize;
    for _ in 0..n_episodes {
        let traj = sample_trajectory(mdp, policy, rng)?;
        returns.push(traj.total_reward());
        if success_states.iter().any(|&g| traj.visits(g)) {
            hits += 1;
        }
    }
    let n = n_episodes.max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = if n_episodes > 1 {
        returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let half = Z95 * (var / n).sqrt();
    let p = hits as f64 / n;
    let z2 = Z95 * Z95;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let spread = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    Ok(Evaluation {
        episodes: n_episodes,
        mean_return: mean,
        return_ci: (mean - half, mean + half),
        success_rate: p,
        success_ci: ((centre - spread).max(0.0), (centre + spread).min(1.0)),
    })
}

/// The correction estimator owned by one run.
enum Estimator<'a> {
    Oracle(OracleDeltaR<'a>),
    Tabular(TabularClassifierPair),
    Net {
        cfg: NetConfig,
        encoder: OneHotEncoder,
        trainer: Option<NetTrainer>,
        source: VecDeque<Example>,
        target: VecDeque<Example>,
        last_loss: (f64, f64),
    },
}

/// Loss of a classifier that always answers one half.
const UNINFORMED_LOSS: f64 = 2.0 * std::f64::consts::LN_2;

impl<'a> Estimator<'a> {
    fn new(pair: &'a DomainPair, cfg: &DarcConfig) -> Result<Self, DarcError> {
        let (ns, na) = (pair.num_states(), pair.num_actions());
        Ok(match &cfg.classifier {
            ClassifierKind::Oracle => Estimator::Oracle(OracleDeltaR { pair, clamp: cfg.clamp_bound }),
            ClassifierKind::Tabular { smoothing } => {
                Estimator::Tabular(TabularClassifierPair::new(ns, na, *smoothing)?.with_clamp(cfg.clamp_bound))
            }
            ClassifierKind::Net(net) => Estimator::Net {
                cfg: net.clone(),
                encoder: OneHotEncoder {
                    num_states: ns,
                    num_actions: na,
                    include_action: cfg.correction != CorrectionMode::ActionUnconditioned,
                },
                trainer: None,
                source: VecDeque::new(),
                target: VecDeque::new(),
                last_loss: (UNINFORMED_LOSS, UNINFORMED_LOSS),
            },
        })
    }

    fn observe(&mut self, domain: Domain, tr: &Transition, evicted: Option<Transition>) -> Result<(), CorrectionError> {
        match self {
            Estimator::Oracle(_) => {}
            Estimator::Tabular(t) => {
                t.observe(domain, tr)?;
                if let Some(old) = evicted {
                    t.add(domain, old.s, old.a, old.s_next, -1.0)?;
                }
            }
            Estimator::Net { encoder, source, target, .. } => {
                let buf = match domain {
                    Domain::Source => source,
                    Domain::Target => target,
                };
                buf.push_back(encoder.example(tr.s, tr.a, tr.s_next));
                if evicted.is_some() {
                    buf.pop_front();
                }
            }
        }
        Ok(())
    }

    fn train<R: Rng + ?Sized>(&mut self, steps: usize, rng: &mut R) -> Result<(), CorrectionError> {
        if let Estimator::Net { cfg, encoder, trainer, source, target, last_loss } = self {
            if source.is_empty() || target.is_empty() {
                return Ok(());
            }
            if trainer.is_none() {
                let pair = NetClassifierPair::new(encoder.sa_dim(), encoder.sas_dim(), cfg, rng).with_encoder(*encoder);
                *trainer = Some(NetTrainer::new(pair, cfg));
            }
            let tr = trainer.as_mut().unwrap();
            let (src, tgt) = (source.make_contiguous(), target.make_contiguous());
            for _ in 0..steps {
                *last_loss = tr.train_step(src, tgt, rng)?;
            }
        }
        Ok(())
    }

    fn losses(&self) -> (f64, f64) {
        match self {
            Estimator::Oracle(_) => (0.0, 0.0),
            Estimator::Tabular(t) if t.is_fitted() => t.losses(),
            Estimator::Tabular(_) => (UNINFORMED_LOSS, UNINFORMED_LOSS),
            Estimator::Net { last_loss, .. } => *last_loss,
        }
    }

    fn delta(&self, mode: CorrectionMode, clamp: Option<f64>, s: usize, a: usize, s_next: usize) -> f64 {
        let single = match mode {
            CorrectionMode::Full => None,
            CorrectionMode::SasOnly => Some(SingleClassifierMode::SasOnly),
            CorrectionMode::ActionUnconditioned => Some(SingleClassifierMode::ActionUnconditioned),
        };
        let value = match self {
            Estimator::Oracle(o) => Ok(o.delta_r(s, a, s_next)),
            Estimator::Tabular(t) if !t.is_fitted() => Ok(0.0),
            Estimator::Tabular(t) => match single {
                None => classifier_delta_r(t, s, a, s_next, clamp),
                Some(m) => single_classifier_delta_r(t, m, s, a, s_next, clamp),
            },
            Estimator::Net { trainer: None, .. } => Ok(0.0),
            Estimator::Net { trainer: Some(tr), .. } => match single {
                None => classifier_delta_r(&tr.pair, s, a, s_next, clamp),
                Some(m) => single_classifier_delta_r(&tr.pair, m, s, a, s_next, clamp),
            },
        };
        value.unwrap_or(0.0)
    }
}

/// What the loop trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Darc,
    Source,
    Target,
    Importance,
}

/// Collection distribution at one state, derived from the current Q row.
fn behavior_row(kind: CollectPolicy, q_row: &[f64], out: &mut [f64]) {
    match kind {
        CollectPolicy::Current => boltzmann_row(q_row, out),
        CollectPolicy::Uniform => out.fill(1.0 / out.len() as f64),
        CollectPolicy::Skewed { action, prob } => {
            boltzmann_row(q_row, out);
            out.iter_mut().for_each(|p| *p *= 1.0 - prob);
            out[action] += prob;
        }
    }
}

fn collect<R: Rng + ?Sized>(mdp: &TabularMdp, kind: CollectPolicy, q: &SoftQTable, rng: &mut R) -> Trajectory {
    sample_trajectory_with(mdp, |t, s, row| behavior_row(kind, q.row(t, s), row), rng)
}

struct LoopOutput {
    learner: SoftQLearner,
    stats: TrainStats,
}

fn train_loop(
    pair: &DomainPair,
    cfg: &DarcConfig,
    mode: Mode,
    init: Option<SoftQTable>,
    iterations: usize,
    iter_offset: usize,
) -> Result<LoopOutput, DarcError> {
    cfg.validate(pair)?;
    let mut learner = match init {
        Some(table) => SoftQLearner::from_table(table, cfg.schedule, pair.source.discount()),
        None => SoftQLearner::from_table(cfg.q_init.table(&pair.source), cfg.schedule, pair.source.discount()),
    };
    let mut source_rng = stream(cfg.seed, Stream::SourceRollout);
    let mut target_rng = stream(cfg.seed, Stream::TargetRollout);
    let mut classifier_rng = stream(cfg.seed, Stream::Classifier);
    let mut solver_rng = stream(cfg.seed, Stream::Solver);

    let mut source_buf = ReplayBuffer::new(cfg.buffer_capacity);
    let mut target_buf = ReplayBuffer::new(cfg.buffer_capacity);
    let mut estimator = Estimator::new(pair, cfg)?;
    let mut stats = TrainStats { support_ok: pair.support_ok, ..TrainStats::default() };
    let uses_correction = matches!(mode, Mode::Darc | Mode::Importance);
    let mut last_eval = (0.0, 0.0);
    let started = Instant::now();

    for k in 0..iterations {
        let mut fresh: Vec<Transition> = Vec::new();
        if mode != Mode::Target {
            let traj = collect(&pair.source, cfg.source_collect, &learner.table, &mut source_rng);
            stats.source_rollouts += 1;
            for tr in traj.steps() {
                let evicted = source_buf.push(*tr);
                if uses_correction {
                    estimator.observe(Domain::Source, tr, evicted)?;
                }
            }
            fresh = traj.into_steps();
        }
        let collect_target = match mode {
            Mode::Target => true,
            Mode::Darc | Mode::Importance => (k + 1) % cfg.target_collect_period == 0,
            Mode::Source => false,
        };
        if collect_target {
            let traj = collect(&pair.target, cfg.target_collect, &learner.table, &mut target_rng);
            stats.target_rollouts += 1;
            for tr in traj.steps() {
                let evicted = target_buf.push(*tr);
                if uses_correction {
                    estimator.observe(Domain::Target, tr, evicted)?;
                }
            }
            if mode == Mode::Target {
                fresh = traj.into_steps();
            }
        }
        if uses_correction {
            if let Err(e) = estimator.train(cfg.classifier_updates_per_iter, &mut classifier_rng) {
                return Err(DarcError::Aborted { source: e, stats: Box::new(stats) });
            }
        }

        let delta = |tr: &Transition| estimator.delta(cfg.correction, cfg.clamp_bound, tr.s, tr.a, tr.s_next);
        let mean_delta_r = if uses_correction && !fresh.is_empty() {
            fresh.iter().map(delta).sum::<f64>() / fresh.len() as f64
        } else {
            0.0
        };
        let active = uses_correction && k + iter_offset >= cfg.warmup_iters;
        let train_buf = if mode == Mode::Target { &target_buf } else { &source_buf };
        for _ in 0..cfg.rl_updates_per_iter * cfg.update_multiplier {
            for tr in train_buf.sample(cfg.rl_batch_size, &mut solver_rng) {
                let (reward, weight) = match (mode, active) {
                    (Mode::Darc, true) => (tr.r + delta(&tr), 1.0),
                    (Mode::Importance, true) => (tr.r, delta(&tr).exp()),
                    _ => (tr.r, 1.0),
                };
                learner.update(&tr, reward, weight)?;
            }
        }

        if k % cfg.eval_every == 0 || k + 1 == iterations {
            let mut eval_rng = stream(cfg.seed, Stream::Evaluation);
            let ev = evaluate_policy(&pair.target, &learner.policy(), cfg.eval_episodes, &cfg.success_states, &mut eval_rng)?;
            last_eval = (ev.mean_return, ev.success_rate);
        }
        let (loss_sas, loss_sa) = estimator.losses();
        stats.records.push(IterRecord {
            iter: k + iter_offset,
            mean_delta_r,
            loss_sas,
            loss_sa,
            source_return: fresh.iter().map(|t| t.r).sum(),
            target_return: last_eval.0,
            target_success: last_eval.1,
            wall_clock_ms: if cfg.record_timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
        });
    }
    Ok(LoopOutput { learner, stats })
}

/// Trains in the source domain on `r + Δr`; returns the final policy.
pub fn run_darc(pair: &DomainPair, cfg: &DarcConfig) -> Result<(StochasticPolicy, TrainStats), DarcError> {
    let out = train_loop(pair, cfg, Mode::Darc, None, cfg.num_iterations, 0)?;
    Ok((out.learner.policy(), out.stats))
}

/// Like [`run_darc`] but also returns the learned table.
pub fn run_darc_table(pair: &DomainPair, cfg: &DarcConfig) -> Result<(SoftQTable, TrainStats), DarcError> {
    let out = train_loop(pair, cfg, Mode::Darc, None, cfg.num_iterations, 0)?;
    Ok((out.learner.table, out.stats))
}

/// Plain soft Q-learning on source experience, evaluated in the target.
pub fn run_rl_on_source(pair: &DomainPair, cfg: &DarcConfig) -> Result<(StochasticPolicy, TrainStats), DarcError> {
    let out = train_loop(pair, cfg, Mode::Source, None, cfg.num_iterations, 0)?;
    Ok((out.learner.policy(), out.stats))
}

/// Soft Q-learning directly on target episodes, one per iteration. With
/// `finetune_source_iters > 0` the table is first trained on source
/// experience for that many iterations.
pub fn run_rl_on_target(pair: &DomainPair, cfg: &DarcConfig) -> Result<(StochasticPolicy, TrainStats), DarcError> {
    let (table, mut stats) = rl_on_target_table(pair, cfg)?;
    stats.support_ok = pair.support_ok;
    Ok((crate::maxent::policy_from_soft_q_lenient(&table), stats))
}

/// Table-returning form of [`run_rl_on_target`].
pub fn rl_on_target_table(pair: &DomainPair, cfg: &DarcConfig) -> Result<(SoftQTable, TrainStats), DarcError> {
    let (init, mut stats) = if cfg.finetune_source_iters > 0 {
        let pre = train_loop(pair, cfg, Mode::Source, None, cfg.finetune_source_iters, 0)?;
        (Some(pre.learner.table), pre.stats)
    } else {
        (None, TrainStats::default())
    };
    let out = train_loop(pair, cfg, Mode::Target, init, cfg.num_iterations, cfg.finetune_source_iters)?;
    stats.records.extend(out.stats.records);
    stats.source_rollouts += out.stats.source_rollouts;
    stats.target_rollouts += out.stats.target_rollouts;
    Ok((out.learner.table, stats))
}

/// Source soft Q-learning with each step scaled by `exp(Δr)`; the clamp
/// caps the weight at `exp(clamp_bound)`.
pub fn run_importance_weighting(pair: &DomainPair, cfg: &DarcConfig) -> Result<(StochasticPolicy, TrainStats), DarcError> {
    let out = train_loop(pair, cfg, Mode::Importance, None, cfg.num_iterations, 0)?;
    Ok((out.learner.policy(), out.stats))
}

/// Importance weight applied to one update.
pub fn importance_weight(delta_r: f64, clamp: Option<f64>) -> f64 {
    crate::correction::clamp_delta(delta_r, clamp).exp()
}

/// Table-returning form of [`run_rl_on_source`].
pub fn rl_on_source_table(pair: &DomainPair, cfg: &DarcConfig) -> Result<(SoftQTable, TrainStats), DarcError> {
    let out = train_loop(pair, cfg, Mode::Source, None, cfg.num_iterations, 0)?;
    Ok((out.learner.table, out.stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{build_wall_gridworld, GridworldSpec};
    use crate::mdp::hitting_probability;
    use crate::rng::from_seed;

    fn small_cfg(spec: &GridworldSpec) -> DarcConfig {
        DarcConfig {
            num_iterations: 60,
            eval_episodes: 20,
            success_states: vec![spec.goal_state()],
            ..DarcConfig::default()
        }
    }

    fn tr(s: usize) -> Transition {
        Transition { s, a: 0, s_next: s, r: 0.0, t: 0, done: false }
    }

    #[test]
    fn buffer_is_fifo_with_capacity() {
        let mut b = ReplayBuffer::new(Some(2));
        assert_eq!(b.push(tr(0)), None);
        assert_eq!(b.push(tr(1)), None);
        assert_eq!(b.push(tr(2)), Some(tr(0)));
        assert_eq!(b.len(), 2);
        assert_eq!(b.inserted(), 3);
        let seen: Vec<usize> = b.iter().map(|t| t.s).collect();
        assert_eq!(seen, vec![1, 2]);
        assert!(ReplayBuffer::new(None).sample(3, &mut from_seed(0)).is_empty());
    }

    #[test]
    fn buffer_sampling_is_seeded_and_covers_contents() {
        let mut b = ReplayBuffer::new(None);
        for s in 0..4 {
            b.push(tr(s));
        }
        let x = b.sample(400, &mut from_seed(3));
        assert_eq!(x, b.sample(400, &mut from_seed(3)));
        for s in 0..4 {
            let c = x.iter().filter(|t| t.s == s).count();
            assert!((60..140).contains(&c), "state {s} drawn {c} times");
        }
    }

    #[test]
    fn zero_period_is_rejected() {
        let spec = GridworldSpec::wall_default();
        let pair = build_wall_gridworld(&spec).unwrap();
        let cfg = DarcConfig { target_collect_period: 0, ..small_cfg(&spec) };
        assert!(matches!(run_darc(&pair, &cfg), Err(DarcError::Config(_))));
    }

    #[test]
    fn one_record_per_iteration_and_collection_ratio() {
        let spec = GridworldSpec::wall_default();
        let pair = build_wall_gridworld(&spec).unwrap();
        let cfg = DarcConfig { num_iterations: 37, target_collect_period: 5, ..small_cfg(&spec) };
        let (_, stats) = run_darc(&pair, &cfg).unwrap();
        assert_eq!(stats.records.len(), 37);
        assert_eq!(stats.target_rollouts, 7);
        assert_eq!(stats.source_rollouts, 37);
        assert!(stats.is_finite());
        assert!(stats.support_ok);
    }

    #[test]
    fn importance_weight_arithmetic() {
        assert_eq!(importance_weight(0.0, Some(20.0)), 1.0);
        assert!((importance_weight(-50.0, Some(20.0)) - (-20f64).exp()).abs() < 1e-20);
        assert!(importance_weight(-20.0, Some(20.0)) < 1e-8);
    }

    #[test]
    fn evaluation_of_deterministic_policy_is_exact() {
        // 2 states, action 1 moves to the goal state 1 deterministically
        let m = TabularMdp::new(2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0], 2).unwrap();
        let pi = StochasticPolicy::deterministic(2, 2, 2, &[1, 1, 1, 1]).unwrap();
        let ev = evaluate_policy(&m, &pi, 50, &[1], &mut from_seed(0)).unwrap();
        assert_eq!(ev.success_rate, 1.0);
        assert_eq!(ev.mean_return, 1.0);
        let zero = TabularMdp::new(2, 2, m.transitions().to_vec(), vec![0.0; 4], vec![1.0, 0.0], 2).unwrap();
        assert_eq!(evaluate_policy(&zero, &pi, 10, &[1], &mut from_seed(0)).unwrap().mean_return, 0.0);
    }

    #[test]
    fn uniform_success_matches_exact_absorption() {
        let spec = GridworldSpec { horizon: 30, ..GridworldSpec::wall_default() };
        let pair = build_wall_gridworld(&spec).unwrap();
        let pi = StochasticPolicy::uniform(30, spec.num_states(), 5);
        let exact = hitting_probability(&pair.target, &pi, &[spec.goal_state()]).unwrap();
        let ev = evaluate_policy(&pair.target, &pi, 4000, &[spec.goal_state()], &mut from_seed(11)).unwrap();
        assert!(ev.success_ci.0 <= exact && exact <= ev.success_ci.1, "{exact} outside {:?}", ev.success_ci);
    }

    #[test]
    fn sign_test_tail() {
        assert!((sign_test_p_value(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test_p_value(9, 10) - 11.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test_p_value(0, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_a_line() {
        let stats = TrainStats {
            records: (0..10)
                .map(|i| IterRecord { iter: i, mean_delta_r: 2.0 - 0.5 * i as f64, ..IterRecord::default() })
                .collect(),
            ..TrainStats::default()
        };
        assert!((stats.delta_r_slope(0, 10) + 0.5).abs() < 1e-12);
        assert!((stats.delta_r_slope(3, 8) + 0.5).abs() < 1e-12);
        assert!(stats.delta_r_slope(3, 4).is_nan());
    }

    #[test]
    fn skewed_behavior_rows_normalize() {
        let mut row = [0.0; 5];
        behavior_row(CollectPolicy::Skewed { action: 2, prob: 0.5 }, &[0.0; 5], &mut row);
        assert!((row[2] - 0.6).abs() < 1e-12);
        assert!((row[0] - 0.1).abs() < 1e-12);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        behavior_row(CollectPolicy::Current, &[1.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0], &mut row);
        assert!((row[0] / row[1] - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
    }
}
