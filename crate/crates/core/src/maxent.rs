//! Maximum-entropy RL at temperature 1: exact backward soft value iteration
//! and sample-based tabular soft Q-learning.
//!
//! Backups use `0 · (-inf) := 0`, so a `-inf` reward on a transition that
//! cannot happen is harmless.

use std::fmt::Write as _;

use thiserror::Error;

use crate::mdp::{occupancy_measure, MdpError, StochasticPolicy, TabularMdp, Transition};

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("state unreachable under any admissible action (t={t}, s={s})")]
    Unreachable { t: usize, s: usize },
    #[error("transition index out of range: {0:?}")]
    OutOfRange(Transition),
    #[error("learning rate {0} outside [0, 1]")]
    LearningRate(f64),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Reward on a transition `(t, s, a, s')`.
pub trait TransitionReward {
    fn reward(&self, t: usize, s: usize, a: usize, s_next: usize) -> f64;

    /// Whether the value depends on `s'`.
    fn uses_next_state(&self) -> bool {
        true
    }
}

impl<T: TransitionReward + ?Sized> TransitionReward for &T {
    fn reward(&self, t: usize, s: usize, a: usize, s_next: usize) -> f64 {
        (**self).reward(t, s, a, s_next)
    }

    fn uses_next_state(&self) -> bool {
        (**self).uses_next_state()
    }
}

/// The MDP's own `r(s, a)`.
#[derive(Debug, Clone, Copy)]
pub struct PlainReward<'a>(pub &'a TabularMdp);

impl TransitionReward for PlainReward<'_> {
    fn reward(&self, _t: usize, s: usize, a: usize, _s_next: usize) -> f64 {
        self.0.reward(s, a)
    }

    fn uses_next_state(&self) -> bool {
        false
    }
}

/// Adapts a closure.
pub struct FnReward<F>(pub F);

impl<F: Fn(usize, usize, usize, usize) -> f64> TransitionReward for FnReward<F> {
    fn reward(&self, t: usize, s: usize, a: usize, s_next: usize) -> f64 {
        (self.0)(t, s, a, s_next)
    }
}

/// Time-indexed soft action values.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    q: Vec<f64>,
}

impl SoftQTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            q: vec![0.0; horizon * num_states * num_actions],
        }
    }

    pub fn for_mdp(mdp: &TabularMdp) -> Self {
        Self::zeros(mdp.horizon(), mdp.num_states(), mdp.num_actions())
    }

    /// Exact soft values of the zero-reward problem: `Q_t = γ V_{t+1}` with
    /// `V_t = log A + γ V_{t+1}`. Unvisited entries then carry the entropy a
    /// uniform continuation would collect instead of looking worse than it.
    pub fn entropy_prior(horizon: usize, num_states: usize, num_actions: usize, discount: f64) -> Self {
        let mut table = Self::zeros(horizon, num_states, num_actions);
        let log_a = (num_actions as f64).ln();
        let mut v_next = 0.0;
        for t in (0..horizon).rev() {
            let q = discount * v_next;
            for s in 0..num_states {
                for a in 0..num_actions {
                    table.set(t, s, a, q);
                }
            }
            v_next = log_a + q;
        }
        table
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    fn idx(&self, t: usize, s: usize, a: usize) -> usize {
        (t * self.num_states + s) * self.num_actions + a
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize, a: usize) -> f64 {
        self.q[self.idx(t, s, a)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, s: usize, a: usize, v: f64) {
        let i = self.idx(t, s, a);
        self.q[i] = v;
    }

    pub fn row(&self, t: usize, s: usize) -> &[f64] {
        let i = self.idx(t, s, 0);
        &self.q[i..i + self.num_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    /// Soft state value `V_t(s) = log Σ_a exp Q_t(s, a)`; `V_H ≡ 0`.
    pub fn value(&self, t: usize, s: usize) -> f64 {
        if t >= self.horizon {
            0.0
        } else {
            log_sum_exp(self.row(t, s))
        }
    }

    /// Largest absolute entry-wise difference; infinite entries must match.
    pub fn sup_distance(&self, other: &SoftQTable) -> f64 {
        self.q
            .iter()
            .zip(&other.q)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }

    /// CSV with columns `t,s,a,q`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,s,a,q\n");
        for t in 0..self.horizon {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    writeln!(out, "{t},{s},{a},{}", self.get(t, s, a)).unwrap();
                }
            }
        }
        out
    }
}

/// Numerically stable `log Σ exp(x)`; `-inf` for an all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `Σ_{s'} p(s') [reward(s') + γ V(s')]` with `0 · (-inf) = 0`.
fn backup<R: TransitionReward + ?Sized>(
    mdp: &TabularMdp,
    reward: &R,
    t: usize,
    s: usize,
    a: usize,
    next_value: &[f64],
) -> f64 {
    let gamma = mdp.discount();
    let mut acc = 0.0;
    for (s_next, &p) in mdp.row(s, a).iter().enumerate() {
        if p > 0.0 {
            acc += p * (reward.reward(t, s, a, s_next) + gamma * next_value[s_next]);
        }
    }
    acc
}

/// Exact backward soft Bellman recursion.
pub fn soft_value_iteration<R: TransitionReward + ?Sized>(mdp: &TabularMdp, reward: &R) -> SoftQTable {
    let (ns, na, h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut table = SoftQTable::zeros(h, ns, na);
    let mut next_value = vec![0.0; ns];
    for t in (0..h).rev() {
        let mut value = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let q = backup(mdp, reward, t, s, a, &next_value);
                table.set(t, s, a, q);
            }
            value[s] = log_sum_exp(table.row(t, s));
        }
        next_value = value;
    }
    table
}

fn softmax_row(row: &[f64]) -> Option<Vec<f64>> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return None;
    }
    let w: Vec<f64> = row.iter().map(|q| (q - m).exp()).collect();
    let z: f64 = w.iter().sum();
    Some(w.into_iter().map(|x| x / z).collect())
}

/// Writes the Boltzmann distribution of one Q row into `out`; uniform when
/// every entry is `-inf`.
pub fn boltzmann_row(q_row: &[f64], out: &mut [f64]) {
    let m = q_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        out.fill(1.0 / out.len() as f64);
        return;
    }
    let mut z = 0.0;
    for (o, q) in out.iter_mut().zip(q_row) {
        *o = (q - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Boltzmann policy `π(a|s,t) ∝ exp Q_t(s, a)`.
pub fn policy_from_soft_q(q: &SoftQTable) -> Result<StochasticPolicy, SolverError> {
    let mut probs = Vec::with_capacity(q.q.len());
    for t in 0..q.horizon {
        for s in 0..q.num_states {
            probs.extend(softmax_row(q.row(t, s)).ok_or(SolverError::Unreachable { t, s })?);
        }
    }
    Ok(StochasticPolicy::new(q.horizon, q.num_states, q.num_actions, probs)?)
}

/// Like [`policy_from_soft_q`] but rows with no admissible action become
/// uniform. Such states have value `-inf` whatever the policy does there.
pub fn policy_from_soft_q_lenient(q: &SoftQTable) -> StochasticPolicy {
    let u = 1.0 / q.num_actions as f64;
    let mut probs = Vec::with_capacity(q.q.len());
    for t in 0..q.horizon {
        for s in 0..q.num_states {
            match softmax_row(q.row(t, s)) {
                Some(row) => probs.extend(row),
                None => probs.extend(std::iter::repeat_n(u, q.num_actions)),
            }
        }
    }
    StochasticPolicy::new(q.horizon, q.num_states, q.num_actions, probs).expect("softmax rows normalize")
}

/// Expected return split into the reward part and the entropy part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnBreakdown {
    pub reward: f64,
    pub entropy: f64,
}

impl ReturnBreakdown {
    pub fn total(&self) -> f64 {
        self.reward + self.entropy
    }
}

/// Exact `E[Σ_t reward + H(π(·|s_t))]` from the occupancy measure.
pub fn entropy_reg_return_parts<R: TransitionReward + ?Sized>(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    reward: &R,
) -> Result<ReturnBreakdown, SolverError> {
    let occ = occupancy_measure(mdp, policy)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let (mut rew, mut ent) = (0.0, 0.0);
    let mut discount = 1.0;
    for t in 0..mdp.horizon() {
        for s in 0..ns {
            let ds = occ.state(t, s);
            if ds == 0.0 {
                continue;
            }
            ent += discount * ds * policy.entropy(t, s);
            for a in 0..na {
                let d = occ.get(t, s, a);
                if d == 0.0 {
                    continue;
                }
                let mut r = 0.0;
                for (s_next, &p) in mdp.row(s, a).iter().enumerate() {
                    if p > 0.0 {
                        r += p * reward.reward(t, s, a, s_next);
                    }
                }
                rew += discount * d * r;
            }
        }
        discount *= mdp.discount();
    }
    Ok(ReturnBreakdown { reward: rew, entropy: ent })
}

pub fn entropy_reg_return<R: TransitionReward + ?Sized>(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    reward: &R,
) -> Result<f64, SolverError> {
    Ok(entropy_reg_return_parts(mdp, policy, reward)?.total())
}

fn check_index(q: &SoftQTable, tr: &Transition) -> Result<(), SolverError> {
    if tr.t >= q.horizon || tr.s >= q.num_states || tr.s_next >= q.num_states || tr.a >= q.num_actions {
        return Err(SolverError::OutOfRange(*tr));
    }
    Ok(())
}

/// One pass of `Q ← (1-α) Q + α [reward + V_{t+1}(s')]` over `batch`,
/// in order, each target read from the table as it stands.
pub fn soft_q_learning_update<R: TransitionReward + ?Sized>(
    q: &mut SoftQTable,
    batch: &[Transition],
    reward: &R,
    learning_rate: f64,
) -> Result<(), SolverError> {
    if !(0.0..=1.0).contains(&learning_rate) {
        return Err(SolverError::LearningRate(learning_rate));
    }
    for tr in batch {
        check_index(q, tr)?;
        apply_update(q, tr, reward.reward(tr.t, tr.s, tr.a, tr.s_next), learning_rate, 1.0);
    }
    Ok(())
}

#[inline]
fn apply_update(q: &mut SoftQTable, tr: &Transition, reward: f64, alpha: f64, discount: f64) {
    if alpha == 0.0 {
        return;
    }
    let target = reward + discount * q.value(tr.t + 1, tr.s_next);
    let old = q.get(tr.t, tr.s, tr.a);
    let new = if alpha == 1.0 { target } else { (1.0 - alpha) * old + alpha * target };
    q.set(tr.t, tr.s, tr.a, new);
}

/// Per-entry step size `α_k = α_0 / (1 + k / τ)`, `k` the visit count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRateSchedule {
    pub alpha0: f64,
    pub tau: f64,
}

impl Default for LearningRateSchedule {
    fn default() -> Self {
        Self { alpha0: 0.5, tau: 1000.0 }
    }
}

impl LearningRateSchedule {
    pub fn at(&self, visits: u64) -> f64 {
        self.alpha0 / (1.0 + visits as f64 / self.tau)
    }
}

/// Starting table for sample-based learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QInit {
    Zero,
    /// See [`SoftQTable::entropy_prior`].
    #[default]
    EntropyPrior,
}

impl QInit {
    pub fn table(self, mdp: &TabularMdp) -> SoftQTable {
        match self {
            QInit::Zero => SoftQTable::for_mdp(mdp),
            QInit::EntropyPrior => {
                SoftQTable::entropy_prior(mdp.horizon(), mdp.num_states(), mdp.num_actions(), mdp.discount())
            }
        }
    }
}

/// Soft Q-learning with per-entry visit counts driving the step size.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQLearner {
    pub table: SoftQTable,
    pub schedule: LearningRateSchedule,
    visits: Vec<u64>,
    discount: f64,
}

impl SoftQLearner {
    pub fn new(mdp: &TabularMdp, schedule: LearningRateSchedule) -> Self {
        let table = SoftQTable::for_mdp(mdp);
        let n = table.q.len();
        Self {
            table,
            schedule,
            visits: vec![0; n],
            discount: mdp.discount(),
        }
    }

    /// Starts from an existing table with fresh visit counts.
    pub fn from_table(table: SoftQTable, schedule: LearningRateSchedule, discount: f64) -> Self {
        let n = table.q.len();
        Self { table, schedule, visits: vec![0; n], discount }
    }

    /// Scheduled update; `weight` scales the step, which is capped at 1.
    pub fn update(&mut self, tr: &Transition, reward: f64, weight: f64) -> Result<(), SolverError> {
        check_index(&self.table, tr)?;
        let i = self.table.idx(tr.t, tr.s, tr.a);
        let alpha = (self.schedule.at(self.visits[i]) * weight).min(1.0);
        self.visits[i] += 1;
        apply_update(&mut self.table, tr, reward, alpha, self.discount);
        Ok(())
    }

    pub fn policy(&self) -> StochasticPolicy {
        policy_from_soft_q_lenient(&self.table)
    }
}
