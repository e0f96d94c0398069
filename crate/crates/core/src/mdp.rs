//! Finite-horizon tabular MDPs, time-indexed policies and exact trajectory arithmetic.
//!
//! Log-probabilities follow the extended-real convention: `ln 0 = -inf`,
//! `-inf` propagates through sums, and nothing here clamps.

use std::fmt;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

/// Tolerance on probability normalization.
pub const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("{what}: expected length {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0} must be positive")]
    Empty(&'static str),
    #[error("discount {0} outside (0, 1]")]
    Discount(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("source and target disagree on {0}")]
    PairMismatch(&'static str),
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("invalid policy row t={t} s={s}: {reason}")]
    PolicyRow { t: usize, s: usize, reason: String },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Finite MDP with a shared horizon and per-(s, a) reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// Row-major `[s][a][s']`.
    transition: Vec<f64>,
    /// Row-major `[s][a]`.
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    horizon: usize,
    discount: f64,
}

impl TabularMdp {
    /// Builds an MDP after checking table shapes. Probabilistic invariants are
    /// *not* enforced here; use [`validate_mdp`] to list violations.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        horizon: usize,
    ) -> Result<Self, MdpError> {
        if num_states == 0 {
            return Err(MdpError::Empty("num_states"));
        }
        if num_actions == 0 {
            return Err(MdpError::Empty("num_actions"));
        }
        if horizon == 0 {
            return Err(MdpError::Empty("horizon"));
        }
        let check = |what, expected, actual| {
            if expected == actual {
                Ok(())
            } else {
                Err(MdpError::Shape {
                    what,
                    expected,
                    actual,
                })
            }
        };
        check("transition", num_states * num_actions * num_states, transition.len())?;
        check("reward", num_states * num_actions, reward.len())?;
        check("initial_dist", num_states, initial_dist.len())?;
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            initial_dist,
            horizon,
            discount: 1.0,
        })
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self, MdpError> {
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(MdpError::Discount(discount));
        }
        self.discount = discount;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self, MdpError> {
        if horizon == 0 {
            return Err(MdpError::Empty("horizon"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.num_actions + a) * self.num_states + s_next]
    }

    /// Next-state distribution for `(s, a)`.
    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        let n = self.num_states;
        &mut self.transition[start..start + n]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Serializes to the line-based `mdp v1` text format. Values are printed
    /// with 17 significant digits so parsing restores them bit for bit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "mdp v1 S={} A={} H={} gamma={:.16e}",
            self.num_states, self.num_actions, self.horizon, self.discount
        )
        .unwrap();
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                write!(out, "{:.16e}", self.reward(s, a)).unwrap();
                for p in self.row(s, a) {
                    write!(out, " {p:.16e}").unwrap();
                }
                out.push('\n');
            }
        }
        out.push_str("init");
        for p in &self.initial_dist {
            write!(out, " {p:.16e}").unwrap();
        }
        out.push('\n');
        out
    }

    /// Parses the format written by [`TabularMdp::to_text`].
    pub fn from_text(text: &str) -> Result<Self, MdpError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(MdpError::Parse {
            line: 1,
            msg: "empty input".into(),
        })?;
        let perr = |line: usize, msg: String| MdpError::Parse { line, msg };
        let mut parts = header.split_whitespace();
        if parts.next() != Some("mdp") || parts.next() != Some("v1") {
            return Err(perr(hline, "expected header `mdp v1 ...`".into()));
        }
        let (mut ns, mut na, mut h, mut gamma) = (None, None, None, None);
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| perr(hline, format!("malformed header field `{kv}`")))?;
            match k {
                "S" => ns = v.parse::<usize>().ok(),
                "A" => na = v.parse::<usize>().ok(),
                "H" => h = v.parse::<usize>().ok(),
                "gamma" => gamma = v.parse::<f64>().ok(),
                _ => return Err(perr(hline, format!("unknown header field `{k}`"))),
            }
        }
        let (ns, na, h, gamma) = match (ns, na, h, gamma) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(perr(hline, "header needs S, A, H and gamma".into())),
        };
        let mut transition = Vec::with_capacity(ns * na * ns);
        let mut reward = Vec::with_capacity(ns * na);
        for _ in 0..ns * na {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| perr(hline, "too few (s, a) rows".into()))?;
            let nums = parse_floats(line).map_err(|m| perr(ln, m))?;
            if nums.len() != ns + 1 {
                return Err(perr(ln, format!("expected {} numbers, got {}", ns + 1, nums.len())));
            }
            reward.push(nums[0]);
            transition.extend_from_slice(&nums[1..]);
        }
        let (ln, line) = lines
            .next()
            .ok_or_else(|| perr(hline, "missing `init` line".into()))?;
        let rest = line
            .strip_prefix("init")
            .ok_or_else(|| perr(ln, "expected `init` line".into()))?;
        let init = parse_floats(rest).map_err(|m| perr(ln, m))?;
        if let Some((ln, _)) = lines.next() {
            return Err(perr(ln, "trailing content".into()));
        }
        TabularMdp::new(ns, na, transition, reward, init, h)?.with_discount(gamma)
    }
}

fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad number `{t}`: {e}")))
        .collect()
}

/// One broken invariant found by [`validate_mdp`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// `deficit = 1 - sum`.
    RowSum { s: usize, a: usize, sum: f64, deficit: f64 },
    ProbabilityRange { s: usize, a: usize, s_next: usize, value: f64 },
    InitialSum { sum: f64, deficit: f64 },
    InitialRange { s: usize, value: f64 },
    NonFiniteReward { s: usize, a: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowSum { s, a, sum, deficit } => {
                write!(f, "row (s={s}, a={a}) sums to {sum} (deficit {deficit:e})")
            }
            Violation::ProbabilityRange { s, a, s_next, value } => {
                write!(f, "transition[{s}, {a}, {s_next}] = {value} outside [0, 1]")
            }
            Violation::InitialSum { sum, deficit } => {
                write!(f, "initial distribution sums to {sum} (deficit {deficit:e})")
            }
            Violation::InitialRange { s, value } => {
                write!(f, "initial_dist[{s}] = {value} outside [0, 1]")
            }
            Violation::NonFiniteReward { s, a, value } => {
                write!(f, "reward[{s}, {a}] = {value} is not finite")
            }
        }
    }
}

/// Lists every invariant violation of `mdp`; empty iff the MDP is valid.
pub fn validate_mdp(mdp: &TabularMdp) -> Vec<Violation> {
    let mut out = Vec::new();
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            let row = mdp.row(s, a);
            for (s_next, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    out.push(Violation::ProbabilityRange { s, a, s_next, value: p });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > NORM_TOL || !sum.is_finite() {
                out.push(Violation::RowSum { s, a, sum, deficit: 1.0 - sum });
            }
            let r = mdp.reward(s, a);
            if !r.is_finite() {
                out.push(Violation::NonFiniteReward { s, a, value: r });
            }
        }
    }
    for (s, &p) in mdp.initial_dist.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            out.push(Violation::InitialRange { s, value: p });
        }
    }
    let sum: f64 = mdp.initial_dist.iter().sum();
    if (sum - 1.0).abs() > NORM_TOL || !sum.is_finite() {
        out.push(Violation::InitialSum { sum, deficit: 1.0 - sum });
    }
    out
}

/// Result of the target-within-source support check.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportReport {
    pub ok: bool,
    /// `(s, a, s')` with positive target probability but zero source probability.
    pub violations: Vec<(usize, usize, usize)>,
}

/// A source and a target MDP that differ only in their dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: TabularMdp,
    pub target: TabularMdp,
    pub support_ok: bool,
}

impl DomainPair {
    /// Pairs two MDPs, rejecting any disagreement outside the transition
    /// tables, and caches the support check.
    pub fn new(source: TabularMdp, target: TabularMdp) -> Result<Self, MdpError> {
        if source.num_states != target.num_states {
            return Err(MdpError::PairMismatch("num_states"));
        }
        if source.num_actions != target.num_actions {
            return Err(MdpError::PairMismatch("num_actions"));
        }
        if source.reward != target.reward {
            return Err(MdpError::PairMismatch("reward"));
        }
        if source.initial_dist != target.initial_dist {
            return Err(MdpError::PairMismatch("initial_dist"));
        }
        if source.horizon != target.horizon {
            return Err(MdpError::PairMismatch("horizon"));
        }
        if source.discount != target.discount {
            return Err(MdpError::PairMismatch("discount"));
        }
        let mut pair = Self {
            source,
            target,
            support_ok: false,
        };
        pair.support_ok = support_violations(&pair.source, &pair.target).is_empty();
        Ok(pair)
    }

    pub fn num_states(&self) -> usize {
        self.source.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.source.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.source.horizon
    }

    /// The same pair with source and target exchanged.
    pub fn swapped(&self) -> DomainPair {
        DomainPair::new(self.target.clone(), self.source.clone()).expect("pair fields agree")
    }
}

fn support_violations(source: &TabularMdp, target: &TabularMdp) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for s in 0..source.num_states {
        for a in 0..source.num_actions {
            for s_next in 0..source.num_states {
                if target.prob(s, a, s_next) > 0.0 && source.prob(s, a, s_next) <= 0.0 {
                    out.push((s, a, s_next));
                }
            }
        }
    }
    out
}

/// Checks that every target transition is possible in the source and
/// refreshes the cached flag on the pair.
pub fn check_support(pair: &mut DomainPair) -> SupportReport {
    let violations = support_violations(&pair.source, &pair.target);
    pair.support_ok = violations.is_empty();
    SupportReport {
        ok: pair.support_ok,
        violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub r: f64,
    pub t: usize,
    pub done: bool,
}

/// A chained sequence of transitions starting at `t = 0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    steps: Vec<Transition>,
}

impl Trajectory {
    /// Validates chaining, timestep order and index bounds.
    pub fn new(steps: Vec<Transition>, mdp: &TabularMdp) -> Result<Self, MdpError> {
        if steps.len() > mdp.horizon {
            return Err(MdpError::Trajectory(format!(
                "length {} exceeds horizon {}",
                steps.len(),
                mdp.horizon
            )));
        }
        for (i, tr) in steps.iter().enumerate() {
            if tr.t != i {
                return Err(MdpError::Trajectory(format!("step {i} has t = {}", tr.t)));
            }
            if tr.s >= mdp.num_states || tr.s_next >= mdp.num_states || tr.a >= mdp.num_actions {
                return Err(MdpError::Trajectory(format!("step {i} index out of range")));
            }
            if i > 0 && steps[i - 1].s_next != tr.s {
                return Err(MdpError::Trajectory(format!("step {i} does not chain")));
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[Transition] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|t| t.r).sum()
    }

    /// Whether the trajectory ever occupies state `s`.
    pub fn visits(&self, s: usize) -> bool {
        self.steps.iter().any(|t| t.s == s || t.s_next == s)
    }

    pub fn into_steps(self) -> Vec<Transition> {
        self.steps
    }
}

/// Non-stationary policy `π(a | s, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
    ) -> Result<Self, MdpError> {
        if probs.len() != horizon * num_states * num_actions {
            return Err(MdpError::Shape {
                what: "policy",
                expected: horizon * num_states * num_actions,
                actual: probs.len(),
            });
        }
        let policy = Self {
            horizon,
            num_states,
            num_actions,
            probs,
        };
        for t in 0..horizon {
            for s in 0..num_states {
                let row = policy.row(t, s);
                if row.iter().any(|&p| !(p >= 0.0)) {
                    return Err(MdpError::PolicyRow {
                        t,
                        s,
                        reason: "negative or NaN entry".into(),
                    });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > NORM_TOL {
                    return Err(MdpError::PolicyRow {
                        t,
                        s,
                        reason: format!("sums to {sum}"),
                    });
                }
            }
        }
        Ok(policy)
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    /// Repeats a stationary `[s][a]` table over the horizon.
    pub fn stationary(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        table: &[f64],
    ) -> Result<Self, MdpError> {
        let mut probs = Vec::with_capacity(horizon * table.len());
        for _ in 0..horizon {
            probs.extend_from_slice(table);
        }
        Self::new(horizon, num_states, num_actions, probs)
    }

    /// Deterministic policy from an action per `(t, s)`, row-major.
    pub fn deterministic(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        actions: &[usize],
    ) -> Result<Self, MdpError> {
        if actions.len() != horizon * num_states {
            return Err(MdpError::Shape {
                what: "actions",
                expected: horizon * num_states,
                actual: actions.len(),
            });
        }
        let mut probs = vec![0.0; horizon * num_states * num_actions];
        for (i, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(MdpError::Dimension(format!("action {a} out of range")));
            }
            probs[i * num_actions + a] = 1.0;
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            probs,
        })
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
    pub fn prob(&self, t: usize, s: usize, a: usize) -> f64 {
        self.probs[(t * self.num_states + s) * self.num_actions + a]
    }

    #[inline]
    pub fn row(&self, t: usize, s: usize) -> &[f64] {
        let start = (t * self.num_states + s) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Shannon entropy of the action distribution at `(t, s)`, in nats.
    pub fn entropy(&self, t: usize, s: usize) -> f64 {
        -self
            .row(t, s)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// `(1 - eps) π + eps · uniform`.
    pub fn mix_uniform(&self, eps: f64) -> Self {
        let u = 1.0 / self.num_actions as f64;
        Self {
            probs: self.probs.iter().map(|&p| (1.0 - eps) * p + eps * u).collect(),
            ..self.clone()
        }
    }

    pub fn check_dims(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        if self.num_states != mdp.num_states
            || self.num_actions != mdp.num_actions
            || self.horizon < mdp.horizon
        {
            return Err(MdpError::Dimension(format!(
                "policy is (H={}, S={}, A={}) but MDP is (H={}, S={}, A={})",
                self.horizon,
                self.num_states,
                self.num_actions,
                mdp.horizon,
                mdp.num_states,
                mdp.num_actions
            )));
        }
        Ok(())
    }
}

/// Draws an index from a discrete distribution by inversion.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples one episode of exactly `horizon` steps.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    rng: &mut R,
) -> Result<Trajectory, MdpError> {
    policy.check_dims(mdp)?;
    Ok(sample_trajectory_with(mdp, |t, s, row| row.copy_from_slice(policy.row(t, s)), rng))
}

/// Rollout whose action distribution at `(t, s)` is written into `row` by
/// `fill`; avoids materializing a full policy table.
pub fn sample_trajectory_with<F, R>(mdp: &TabularMdp, mut fill: F, rng: &mut R) -> Trajectory
where
    F: FnMut(usize, usize, &mut [f64]),
    R: Rng + ?Sized,
{
    let mut steps = Vec::with_capacity(mdp.horizon);
    let mut row = vec![0.0; mdp.num_actions];
    let mut s = sample_categorical(&mdp.initial_dist, rng);
    for t in 0..mdp.horizon {
        fill(t, s, &mut row);
        let a = sample_categorical(&row, rng);
        let s_next = sample_categorical(mdp.row(s, a), rng);
        steps.push(Transition {
            s,
            a,
            s_next,
            r: mdp.reward(s, a),
            t,
            done: t + 1 == mdp.horizon,
        });
        s = s_next;
    }
    Trajectory { steps }
}

/// `log p1(s_1) + Σ_t [log π(a_t|s_t) + log p(s_{t+1}|s_t,a_t)]`, `-inf` if any factor is zero.
pub fn trajectory_log_prob(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    traj: &Trajectory,
) -> Result<f64, MdpError> {
    policy.check_dims(mdp)?;
    let steps = traj.steps();
    let Some(first) = steps.first() else {
        return Ok(0.0);
    };
    if steps.len() > mdp.horizon
        || steps
            .iter()
            .any(|tr| tr.s >= mdp.num_states || tr.s_next >= mdp.num_states || tr.a >= mdp.num_actions)
    {
        return Err(MdpError::Dimension("trajectory does not fit the MDP".into()));
    }
    let mut lp = mdp.initial_dist[first.s].ln();
    for tr in steps {
        lp += policy.prob(tr.t, tr.s, tr.a).ln() + mdp.prob(tr.s, tr.a, tr.s_next).ln();
    }
    Ok(lp)
}

/// State-action visitation probabilities `d_t(s, a)` for each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    data: Vec<f64>,
}

impl Occupancy {
    #[inline]
    pub fn get(&self, t: usize, s: usize, a: usize) -> f64 {
        self.data[(t * self.num_states + s) * self.num_actions + a]
    }

    /// State marginal at step `t`.
    pub fn state(&self, t: usize, s: usize) -> f64 {
        let start = (t * self.num_states + s) * self.num_actions;
        self.data[start..start + self.num_actions].iter().sum()
    }

    pub fn slice(&self, t: usize) -> &[f64] {
        let n = self.num_states * self.num_actions;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Exact forward recursion for the occupancy of `policy` in `mdp`.
pub fn occupancy_measure(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<Occupancy, MdpError> {
    policy.check_dims(mdp)?;
    let (ns, na, h) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut data = vec![0.0; h * ns * na];
    let mut state = mdp.initial_dist.clone();
    for t in 0..h {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if state[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let d = state[s] * policy.prob(t, s, a);
                data[(t * ns + s) * na + a] = d;
                if d == 0.0 {
                    continue;
                }
                for (s_next, &p) in mdp.row(s, a).iter().enumerate() {
                    next[s_next] += d * p;
                }
            }
        }
        state = next;
    }
    Ok(Occupancy {
        horizon: h,
        num_states: ns,
        num_actions: na,
        data,
    })
}

/// Distribution of the state reached after the final step.
pub fn final_state_dist(mdp: &TabularMdp, occ: &Occupancy) -> Vec<f64> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut out = vec![0.0; ns];
    let t = occ.horizon - 1;
    for s in 0..ns {
        for a in 0..na {
            let d = occ.get(t, s, a);
            if d > 0.0 {
                for (s_next, &p) in mdp.row(s, a).iter().enumerate() {
                    out[s_next] += d * p;
                }
            }
        }
    }
    out
}

/// Probability that a run of `policy` ever occupies one of the `hit` states,
/// which are treated as absorbing for the purpose of the computation.
pub fn hitting_probability(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    hit: &[usize],
) -> Result<f64, MdpError> {
    policy.check_dims(mdp)?;
    let ns = mdp.num_states;
    let is_hit = |s: usize| hit.contains(&s);
    let mut absorbed: f64 = mdp.initial_dist.iter().enumerate().filter(|(s, _)| is_hit(*s)).map(|(_, p)| p).sum();
    let mut state: Vec<f64> = (0..ns)
        .map(|s| if is_hit(s) { 0.0 } else { mdp.initial_dist[s] })
        .collect();
    for t in 0..mdp.horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if state[s] == 0.0 {
                continue;
            }
            for a in 0..mdp.num_actions {
                let d = state[s] * policy.prob(t, s, a);
                if d == 0.0 {
                    continue;
                }
                for (s_next, &p) in mdp.row(s, a).iter().enumerate() {
                    if is_hit(s_next) {
                        absorbed += d * p;
                    } else {
                        next[s_next] += d * p;
                    }
                }
            }
        }
        state = next;
    }
    Ok(absorbed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn two_state() -> TabularMdp {
        TabularMdp::new(
            2,
            1,
            vec![0.5, 0.5, 0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            3,
        )
        .unwrap()
    }

    #[test]
    fn valid_mdp_has_empty_report() {
        assert!(validate_mdp(&two_state()).is_empty());
    }

    #[test]
    fn short_row_reports_deficit() {
        let mut m = two_state();
        m.row_mut(0, 0).copy_from_slice(&[0.4, 0.5]);
        let v = validate_mdp(&m);
        assert_eq!(v.len(), 1);
        match &v[0] {
            Violation::RowSum { s, a, deficit, .. } => {
                assert_eq!((*s, *a), (0, 0));
                assert!((deficit - 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_probability_is_named() {
        let mut m = two_state();
        m.row_mut(1, 0).copy_from_slice(&[-0.05, 1.05]);
        let v = validate_mdp(&m);
        assert!(v.contains(&Violation::ProbabilityRange { s: 1, a: 0, s_next: 0, value: -0.05 }));
    }

    #[test]
    fn support_check_flags_missing_source_transition() {
        let src = two_state();
        let mut tgt = two_state();
        assert!(DomainPair::new(src.clone(), tgt.clone()).unwrap().support_ok);
        tgt.row_mut(1, 0).copy_from_slice(&[0.1, 0.9]);
        let mut pair = DomainPair::new(src, tgt).unwrap();
        let report = check_support(&mut pair);
        assert!(!report.ok);
        assert_eq!(report.violations, vec![(1, 0, 0)]);
        assert!(!pair.support_ok);
    }

    #[test]
    fn pair_rejects_reward_mismatch() {
        let src = two_state();
        let tgt = TabularMdp::new(2, 1, src.transitions().to_vec(), vec![0.0, 0.0], vec![1.0, 0.0], 3).unwrap();
        assert_eq!(DomainPair::new(src, tgt), Err(MdpError::PairMismatch("reward")));
    }

    #[test]
    fn self_loop_trajectory() {
        let m = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0], 3).unwrap();
        let pi = StochasticPolicy::uniform(3, 1, 2);
        let traj = sample_trajectory(&m, &pi, &mut from_seed(1)).unwrap();
        assert_eq!(traj.len(), 3);
        assert!(traj.steps().iter().all(|t| t.s == 0 && t.s_next == 0));
        assert!(traj.steps()[2].done);
    }

    #[test]
    fn sampling_rejects_mismatched_policy() {
        let pi = StochasticPolicy::uniform(3, 3, 1);
        assert!(matches!(
            sample_trajectory(&two_state(), &pi, &mut from_seed(0)),
            Err(MdpError::Dimension(_))
        ));
    }

    #[test]
    fn deterministic_chain_has_zero_log_prob() {
        let m = TabularMdp::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![0.0; 2], vec![1.0, 0.0], 2).unwrap();
        let pi = StochasticPolicy::uniform(2, 2, 1);
        let traj = sample_trajectory(&m, &pi, &mut from_seed(3)).unwrap();
        assert_eq!(trajectory_log_prob(&m, &pi, &traj).unwrap(), 0.0);
    }

    #[test]
    fn impossible_transition_has_neg_inf_log_prob() {
        let m = two_state();
        let pi = StochasticPolicy::uniform(3, 2, 1);
        let traj = Trajectory::new(
            vec![Transition { s: 0, a: 0, s_next: 1, r: 1.0, t: 0, done: false },
                 Transition { s: 1, a: 0, s_next: 0, r: 0.0, t: 1, done: false }],
            &m,
        )
        .unwrap();
        assert_eq!(trajectory_log_prob(&m, &pi, &traj).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn trajectory_rejects_broken_chain() {
        let m = two_state();
        let r = Trajectory::new(
            vec![Transition { s: 0, a: 0, s_next: 1, r: 0.0, t: 0, done: false },
                 Transition { s: 0, a: 0, s_next: 1, r: 0.0, t: 1, done: false }],
            &m,
        );
        assert!(r.is_err());
    }

    #[test]
    fn occupancy_first_slice_is_initial_times_policy() {
        let m = two_state();
        let pi = StochasticPolicy::uniform(3, 2, 1);
        let occ = occupancy_measure(&m, &pi).unwrap();
        assert_eq!(occ.slice(0), &[1.0, 0.0]);
        for t in 0..3 {
            assert!((occ.slice(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_state_occupancy_equals_policy() {
        let m = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0], 3).unwrap();
        let pi = StochasticPolicy::new(3, 1, 2, vec![0.2, 0.8, 0.5, 0.5, 1.0, 0.0]).unwrap();
        let occ = occupancy_measure(&m, &pi).unwrap();
        for t in 0..3 {
            for a in 0..2 {
                assert_eq!(occ.get(t, 0, a), pi.prob(t, 0, a));
            }
        }
    }

    #[test]
    fn text_format_header() {
        let text = two_state().to_text();
        assert!(text.starts_with("mdp v1 S=2 A=1 H=3 gamma=1.0000000000000000e0\n"));
        assert_eq!(TabularMdp::from_text(&text).unwrap(), two_state());
    }

    #[test]
    fn text_format_reports_line_numbers() {
        let err = TabularMdp::from_text("mdp v1 S=1 A=1 H=1 gamma=1\n0 x\ninit 1\n").unwrap_err();
        assert!(matches!(err, MdpError::Parse { line: 2, .. }));
    }
}
