//! Exact numerical checks of the transfer bounds and identities on small
//! instances.
//!
//! Every quantity is computed without sampling: trajectory sums by
//! enumeration, expectations from occupancy measures, optima by soft value
//! iteration. A check passes when its slack is at least
//! `-1e-9 · max(1, |lhs|, |rhs|)`.
//!
//! Conventions:
//!
//! - `ε(π)` is the source-occupancy-weighted `KL(p_source ‖ p_target)`; the
//!   theorem check evaluates it at the target optimum `π*`.
//! - `R_max` is the largest `|Σ_t r - log π|` over trajectories that have
//!   positive probability under either domain's dynamics.
//! - Returns are undiscounted.

use std::fmt::{self, Write as _};

use rand::Rng;
use thiserror::Error;

use crate::correction::true_delta_r;
use crate::maxent::{
    entropy_reg_return, entropy_reg_return_parts, log_sum_exp, policy_from_soft_q_lenient, soft_value_iteration,
    FnReward, PlainReward, SolverError,
};
use crate::mdp::{occupancy_measure, DomainPair, MdpError, StochasticPolicy, TabularMdp};

/// Largest number of trajectories the enumeration paths will visit.
pub const ENUMERATION_LIMIT: usize = 100_000;

/// Relative tolerance of the exact checks.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("{count} trajectories exceed the enumeration limit of {limit}")]
    TooManyTrajectories { count: f64, limit: usize },
    #[error("theory checks are undiscounted; got discount {0}")]
    Discounted(f64),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// The bound could not be evaluated (for example an unbounded `R_max`).
    Skipped,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIP",
        })
    }
}

/// How `lhs` and `rhs` are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LessEq,
    GreaterEq,
    Equal,
}

/// One evaluated check.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryEntry {
    pub check: String,
    pub instance: String,
    pub relation: Relation,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub status: Status,
    /// `ε` used by the bound, in nats; NaN when the check has none.
    pub epsilon: f64,
    /// `R_max` used by the bound; NaN when the check has none.
    pub r_max: f64,
    /// Extra named values shown in the summary.
    pub notes: Vec<(String, f64)>,
}

/// Slack of `lhs relation rhs`; non-negative means the relation holds.
pub fn slack(relation: Relation, lhs: f64, rhs: f64) -> f64 {
    if lhs == rhs {
        return 0.0;
    }
    match relation {
        Relation::LessEq => rhs - lhs,
        Relation::GreaterEq => lhs - rhs,
        Relation::Equal => -(lhs - rhs).abs(),
    }
}

/// The pass rule shared by every exact check.
pub fn passes(slack: f64, lhs: f64, rhs: f64) -> bool {
    let scale = [1.0, lhs.abs(), rhs.abs()].into_iter().filter(|v| v.is_finite()).fold(1.0, f64::max);
    slack >= -TOLERANCE * scale
}

impl TheoryEntry {
    pub fn new(check: &str, instance: &str, relation: Relation, lhs: f64, rhs: f64) -> Self {
        let slack = slack(relation, lhs, rhs);
        let status = if passes(slack, lhs, rhs) { Status::Pass } else { Status::Fail };
        Self {
            check: check.to_string(),
            instance: instance.to_string(),
            relation,
            lhs,
            rhs,
            slack,
            status,
            epsilon: f64::NAN,
            r_max: f64::NAN,
            notes: Vec::new(),
        }
    }

    fn skipped(check: &str, instance: &str, reason_value: f64) -> Self {
        let mut e = Self::new(check, instance, Relation::LessEq, f64::NAN, f64::NAN);
        e.status = Status::Skipped;
        e.slack = f64::NAN;
        e.notes.push(("r_max".into(), reason_value));
        e
    }

    fn with_constants(mut self, epsilon: f64, r_max: f64) -> Self {
        self.epsilon = epsilon;
        self.r_max = r_max;
        self
    }

    fn note(mut self, name: &str, value: f64) -> Self {
        self.notes.push((name.to_string(), value));
        self
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

/// Collected entries of a theory run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TheoryReport {
    pub entries: Vec<TheoryEntry>,
}

pub const REPORT_HEADER: &str = "check,instance,relation,lhs,rhs,slack,status,epsilon,r_max";

impl TheoryReport {
    pub fn push(&mut self, entry: TheoryEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: TheoryReport) {
        self.entries.extend(other.entries);
    }

    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| e.status == Status::Fail).count()
    }

    /// Entries of one check kind.
    pub fn of(&self, check: &str) -> impl Iterator<Item = &TheoryEntry> {
        let check = check.to_string();
        self.entries.iter().filter(move |e| e.check == check)
    }

    /// `(total, failed, skipped)` for one check kind.
    pub fn tally(&self, check: &str) -> (usize, usize, usize) {
        let mut out = (0, 0, 0);
        for e in self.of(check) {
            out.0 += 1;
            match e.status {
                Status::Fail => out.1 += 1,
                Status::Skipped => out.2 += 1,
                Status::Pass => {}
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for e in &self.entries {
            let rel = match e.relation {
                Relation::LessEq => "le",
                Relation::GreaterEq => "ge",
                Relation::Equal => "eq",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.check, e.instance, rel, e.lhs, e.rhs, e.slack, e.status, e.epsilon, e.r_max
            )
            .unwrap();
        }
        out
    }

    /// One line per entry, then one tally line per check kind.
    pub fn summary(&self) -> String {
        let mut out = String::from("# epsilon: source-occupancy KL(p_source || p_target) at the target optimum\n");
        for e in &self.entries {
            write!(out, "{} {} [{}] lhs={:.6e} rhs={:.6e} slack={:.3e}", e.status, e.check, e.instance, e.lhs, e.rhs, e.slack).unwrap();
            for (k, v) in &e.notes {
                write!(out, " {k}={v:.6e}").unwrap();
            }
            out.push('\n');
        }
        let mut kinds: Vec<&str> = self.entries.iter().map(|e| e.check.as_str()).collect();
        kinds.sort_unstable();
        kinds.dedup();
        for k in kinds {
            let (n, f, s) = self.tally(k);
            writeln!(out, "{k}: {n} checked, {f} failed, {s} skipped").unwrap();
        }
        out
    }
}

fn undiscounted(pair: &DomainPair) -> Result<(), TheoryError> {
    let d = pair.source.discount();
    if d != 1.0 {
        return Err(TheoryError::Discounted(d));
    }
    Ok(())
}

/// `KL(p ‖ q)` of two next-state rows; `+inf` if `q` misses part of `p`.
pub fn dynamics_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            kl += pi * (pi / qi).ln();
        }
    }
    kl
}

/// Number of positive-probability trajectories of `policy` in `mdp`.
pub fn count_trajectories(mdp: &TabularMdp, policy: &StochasticPolicy) -> f64 {
    let (ns, na, h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut next = vec![1.0; ns];
    for t in (0..h).rev() {
        let cur: Vec<f64> = (0..ns)
            .map(|s| {
                (0..na)
                    .filter(|&a| policy.prob(t, s, a) > 0.0)
                    .map(|a| mdp.row(s, a).iter().zip(&next).filter(|(p, _)| **p > 0.0).map(|(_, n)| n).sum::<f64>())
                    .sum()
            })
            .collect();
        next = cur;
    }
    mdp.initial_dist().iter().zip(&next).filter(|(p, _)| **p > 0.0).map(|(_, n)| n).sum()
}

/// Calls `visit(prob, steps)` for every positive-probability trajectory of
/// `policy` in `mdp`, where `steps` lists `(s, a, s')`.
pub fn for_each_trajectory<F>(mdp: &TabularMdp, policy: &StochasticPolicy, mut visit: F) -> Result<(), TheoryError>
where
    F: FnMut(f64, &[(usize, usize, usize)]),
{
    policy.check_dims(mdp)?;
    let count = count_trajectories(mdp, policy);
    if count > ENUMERATION_LIMIT as f64 {
        return Err(TheoryError::TooManyTrajectories { count, limit: ENUMERATION_LIMIT });
    }
    let mut steps = Vec::with_capacity(mdp.horizon());
    for (s0, &p0) in mdp.initial_dist().iter().enumerate() {
        if p0 > 0.0 {
            walk(mdp, policy, 0, s0, p0, &mut steps, &mut visit);
        }
    }
    Ok(())
}

fn walk<F>(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    t: usize,
    s: usize,
    prob: f64,
    steps: &mut Vec<(usize, usize, usize)>,
    visit: &mut F,
) where
    F: FnMut(f64, &[(usize, usize, usize)]),
{
    if t == mdp.horizon() {
        visit(prob, steps);
        return;
    }
    for a in 0..mdp.num_actions() {
        let pa = policy.prob(t, s, a);
        if pa <= 0.0 {
            continue;
        }
        for (s_next, &p) in mdp.row(s, a).iter().enumerate() {
            if p > 0.0 {
                steps.push((s, a, s_next));
                walk(mdp, policy, t + 1, s_next, prob * pa * p, steps, visit);
                steps.pop();
            }
        }
    }
}

/// `ε(π) = Σ_t E_{d_t^source}[KL(p_source(·|s,a) ‖ p_target(·|s,a))]`.
pub fn epsilon_of_policy(pair: &DomainPair, policy: &StochasticPolicy) -> Result<f64, TheoryError> {
    let occ = occupancy_measure(&pair.source, policy)?;
    let (ns, na) = (pair.num_states(), pair.num_actions());
    let mut eps = 0.0;
    for t in 0..pair.horizon() {
        for s in 0..ns {
            for a in 0..na {
                let d = occ.get(t, s, a);
                if d > 0.0 {
                    let kl = dynamics_kl(pair.source.row(s, a), pair.target.row(s, a));
                    if kl == f64::INFINITY {
                        return Ok(f64::INFINITY);
                    }
                    eps += d * kl;
                }
            }
        }
    }
    Ok(eps)
}

/// The trajectory KL computed both ways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryKl {
    /// `Σ_τ q(τ) log(q(τ) / p̃(τ))` over enumerated source trajectories.
    pub enumerated: f64,
    /// Occupancy-weighted per-step dynamics KL; equal to [`epsilon_of_policy`].
    pub occupancy: f64,
}

/// KL between the source path measure under `policy` and the path measure
/// with the same policy and target dynamics.
pub fn trajectory_kl(pair: &DomainPair, policy: &StochasticPolicy) -> Result<TrajectoryKl, TheoryError> {
    let mut total = 0.0;
    let mut infinite = false;
    for_each_trajectory(&pair.source, policy, |q, steps| {
        // initial state and policy factors cancel in q / p̃
        let mut log_ratio = 0.0;
        for &(s, a, s2) in steps {
            let pt = pair.target.prob(s, a, s2);
            if pt <= 0.0 {
                infinite = true;
                return;
            }
            log_ratio += (pair.source.prob(s, a, s2) / pt).ln();
        }
        total += q * log_ratio;
    })?;
    Ok(TrajectoryKl {
        enumerated: if infinite { f64::INFINITY } else { total },
        occupancy: epsilon_of_policy(pair, policy)?,
    })
}

/// Range of `Σ_t r(s_t, a_t) [- log π(a_t|s_t)]` over trajectories that are
/// possible under `policy` and the union of the given dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnRange {
    pub max: f64,
    pub min: f64,
}

impl ReturnRange {
    /// `R_max`: the largest absolute return.
    pub fn abs_max(&self) -> f64 {
        self.max.abs().max(self.min.abs())
    }
}

/// Max-plus and min-plus backward recursions over the union support.
pub fn return_range(mdps: &[&TabularMdp], policy: &StochasticPolicy, with_entropy: bool) -> ReturnRange {
    let base = mdps[0];
    let (ns, na, h) = (base.num_states(), base.num_actions(), base.horizon());
    let reachable = |s: usize, a: usize, s2: usize| mdps.iter().any(|m| m.prob(s, a, s2) > 0.0);
    let mut hi = vec![0.0; ns];
    let mut lo = vec![0.0; ns];
    for t in (0..h).rev() {
        let mut nhi = vec![f64::NEG_INFINITY; ns];
        let mut nlo = vec![f64::INFINITY; ns];
        for s in 0..ns {
            for a in 0..na {
                let pa = policy.prob(t, s, a);
                if pa <= 0.0 {
                    continue;
                }
                let step = base.reward(s, a) - if with_entropy { pa.ln() } else { 0.0 };
                let (mut best, mut worst) = (f64::NEG_INFINITY, f64::INFINITY);
                for s2 in (0..ns).filter(|&s2| reachable(s, a, s2)) {
                    best = best.max(hi[s2]);
                    worst = worst.min(lo[s2]);
                }
                nhi[s] = nhi[s].max(step + best);
                nlo[s] = nlo[s].min(step + worst);
            }
        }
        hi = nhi;
        lo = nlo;
    }
    let starts = (0..ns).filter(|&s| mdps.iter().any(|m| m.initial_dist()[s] > 0.0));
    let (mut max, mut min) = (f64::NEG_INFINITY, f64::INFINITY);
    for s in starts {
        max = max.max(hi[s]);
        min = min.min(lo[s]);
    }
    ReturnRange { max, min }
}

/// `2 R_max √(ε / 2)`; 0 when `ε = 0` even if `R_max` is infinite.
fn pinsker_term(r_max: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        0.0
    } else {
        2.0 * r_max * (eps / 2.0).sqrt()
    }
}

/// `|E_source[Σ r + H] - E_target[Σ r + H]| ≤ 2 R_max √(ε/2)` for one policy.
pub fn check_pinsker_gap(pair: &DomainPair, policy: &StochasticPolicy, instance: &str) -> Result<TheoryEntry, TheoryError> {
    undiscounted(pair)?;
    let r_max = return_range(&[&pair.source, &pair.target], policy, true).abs_max();
    if !r_max.is_finite() {
        return Ok(TheoryEntry::skipped("pinsker_gap", instance, r_max));
    }
    let eps = epsilon_of_policy(pair, policy)?;
    let src = entropy_reg_return(&pair.source, policy, &PlainReward(&pair.source))?;
    let tgt = entropy_reg_return(&pair.target, policy, &PlainReward(&pair.target))?;
    let lhs = (src - tgt).abs();
    Ok(TheoryEntry::new("pinsker_gap", instance, Relation::LessEq, lhs, pinsker_term(r_max, eps)).with_constants(eps, r_max))
}

/// Exact target optimum `π*` and the optimum `π*_DARC` of the source with
/// reward `r + Δr`.
pub fn optimal_policies(pair: &DomainPair) -> (StochasticPolicy, StochasticPolicy) {
    let target_q = soft_value_iteration(&pair.target, &PlainReward(&pair.target));
    let modified = FnReward(|_t, s, a, s2| {
        let r = pair.source.reward(s, a);
        if pair.source.prob(s, a, s2) <= 0.0 {
            // weight zero in the backup
            return r;
        }
        r + true_delta_r(pair, s, a, s2).unwrap_or(0.0)
    });
    let darc_q = soft_value_iteration(&pair.source, &modified);
    (policy_from_soft_q_lenient(&target_q), policy_from_soft_q_lenient(&darc_q))
}

/// The transfer guarantee
/// `E_target,π*_DARC[Σ r + H] ≥ E_target,π*[Σ r + H] - 4 R_max √(ε/2)`,
/// followed by the premise `|E_source,π*[Σ r] - E_target,π*[Σ r]| ≤ 2 R_max √(ε/2)`.
pub fn check_theorem(pair: &DomainPair, instance: &str) -> Result<Vec<TheoryEntry>, TheoryError> {
    undiscounted(pair)?;
    let (pi_star, pi_darc) = optimal_policies(pair);
    let mdps = [&pair.source, &pair.target];
    let r_max = return_range(&mdps, &pi_star, true).abs_max().max(return_range(&mdps, &pi_darc, true).abs_max());
    if !r_max.is_finite() {
        return Ok(vec![TheoryEntry::skipped("theorem", instance, r_max)]);
    }
    let eps = epsilon_of_policy(pair, &pi_star)?;
    let eps_darc = epsilon_of_policy(pair, &pi_darc)?;
    let darc = entropy_reg_return(&pair.target, &pi_darc, &PlainReward(&pair.target))?;
    let best = entropy_reg_return(&pair.target, &pi_star, &PlainReward(&pair.target))?;
    let theorem = TheoryEntry::new("theorem", instance, Relation::GreaterEq, darc, best - 2.0 * pinsker_term(r_max, eps))
        .with_constants(eps, r_max)
        .note("epsilon_at_darc_policy", eps_darc);

    let plain_src = entropy_reg_return_parts(&pair.source, &pi_star, &PlainReward(&pair.source))?.reward;
    let plain_tgt = entropy_reg_return_parts(&pair.target, &pi_star, &PlainReward(&pair.target))?.reward;
    let r_max_plain = return_range(&mdps, &pi_star, false).abs_max();
    let premise = TheoryEntry::new(
        "premise",
        instance,
        Relation::LessEq,
        (plain_src - plain_tgt).abs(),
        pinsker_term(r_max_plain, eps),
    )
    .with_constants(eps, r_max_plain);
    Ok(vec![theorem, premise])
}

/// `log E_target,π[exp Σ r]` by a backward log-sum-exp recursion.
pub fn risk_sensitive_value(mdp: &TabularMdp, policy: &StochasticPolicy) -> f64 {
    let (ns, na, h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut w = vec![0.0; ns];
    for t in (0..h).rev() {
        w = (0..ns)
            .map(|s| {
                let mut terms = Vec::new();
                for a in 0..na {
                    let pa = policy.prob(t, s, a);
                    if pa <= 0.0 {
                        continue;
                    }
                    for (s2, &p) in mdp.row(s, a).iter().enumerate() {
                        if p > 0.0 {
                            terms.push((pa * p).ln() + mdp.reward(s, a) + w[s2]);
                        }
                    }
                }
                log_sum_exp(&terms)
            })
            .collect();
    }
    let terms: Vec<f64> =
        mdp.initial_dist().iter().zip(&w).filter(|(p, _)| **p > 0.0).map(|(p, v)| p.ln() + v).collect();
    log_sum_exp(&terms)
}

/// The importance identity `log E_source[exp(Σ r + Δr)] = log E_target[exp Σ r]`
/// (when the target support lies inside the source support) and the Jensen
/// bound `log E_source[exp(Σ r + Δr)] ≥ E_source[Σ r + Δr]`.
pub fn check_jensen_bound(pair: &DomainPair, policy: &StochasticPolicy, instance: &str) -> Result<Vec<TheoryEntry>, TheoryError> {
    undiscounted(pair)?;
    let mut terms = Vec::new();
    for_each_trajectory(&pair.source, policy, |q, steps| {
        let mut total = q.ln();
        for &(s, a, s2) in steps {
            total += pair.source.reward(s, a) + (pair.target.prob(s, a, s2) / pair.source.prob(s, a, s2)).ln();
        }
        terms.push(total);
    })?;
    let risk = log_sum_exp(&terms);
    let eps = epsilon_of_policy(pair, policy)?;
    let plain = entropy_reg_return_parts(&pair.source, policy, &PlainReward(&pair.source))?.reward;
    // E_source[Σ Δr] = -ε
    let mean = plain - eps;
    let mut out = Vec::new();
    if pair.support_ok {
        out.push(TheoryEntry::new("jensen_identity", instance, Relation::Equal, risk, risk_sensitive_value(&pair.target, policy)));
    }
    out.push(TheoryEntry::new("jensen_bound", instance, Relation::GreaterEq, risk, mean).with_constants(eps, f64::NAN));
    Ok(out)
}

/// Expected correction against the difference of pointwise mutual
/// informations, under the joint `d ~ Bernoulli(½)`, `(s, a)` from the
/// sampling policy's time-averaged source occupancy, `s' ~ p_d(·|s, a)`.
/// Both sides are expectations over the target half of the joint.
pub fn check_mi_identity(pair: &DomainPair, sampling_policy: &StochasticPolicy, instance: &str) -> Result<TheoryEntry, TheoryError> {
    let occ = occupancy_measure(&pair.source, sampling_policy)?;
    let (ns, na, h) = (pair.num_states(), pair.num_actions(), pair.horizon());
    let (mut lhs, mut i_target, mut i_source) = (0.0, 0.0, 0.0);
    for s in 0..ns {
        for a in 0..na {
            let rho = (0..h).map(|t| occ.get(t, s, a)).sum::<f64>() / h as f64;
            if rho <= 0.0 {
                continue;
            }
            let joint = |d_target: bool, s2: usize| {
                let m = if d_target { &pair.target } else { &pair.source };
                0.5 * rho * m.prob(s, a, s2)
            };
            let sa_target: f64 = (0..ns).map(|s2| joint(true, s2)).sum();
            let sa_source: f64 = (0..ns).map(|s2| joint(false, s2)).sum();
            let post_sa_target = sa_target / (sa_target + sa_source);
            let post_sa_source = sa_source / (sa_target + sa_source);
            for s2 in 0..ns {
                let w = joint(true, s2);
                if w <= 0.0 {
                    continue;
                }
                // the target half carries mass ½
                let weight = 2.0 * w;
                let (jt, js) = (joint(true, s2), joint(false, s2));
                let post_target = jt / (jt + js);
                let post_source = js / (jt + js);
                lhs += weight * true_delta_r(pair, s, a, s2).unwrap_or(0.0);
                i_target += weight * (post_target.ln() - post_sa_target.ln());
                i_source += weight * (post_source.ln() - post_sa_source.ln());
            }
        }
    }
    Ok(TheoryEntry::new("mi_identity", instance, Relation::Equal, lhs, i_target - i_source))
}

/// Sizes for random instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceLimits {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        Self { max_states: 4, max_actions: 3, max_horizon: 4 }
    }
}

fn random_simplex<R: Rng + ?Sized>(n: usize, zero_prob: f64, rng: &mut R) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| if rng.random_bool(zero_prob) { 0.0 } else { rng.random_range(0.05..1.0) }).collect();
    if row.iter().all(|&p| p == 0.0) {
        row[rng.random_range(0..n)] = 1.0;
    }
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= z);
    row
}

/// Random pair whose target rows are the source rows times a positive mask,
/// renormalized, so both domains share every support.
pub fn random_support_pair<R: Rng + ?Sized>(limits: InstanceLimits, rng: &mut R) -> DomainPair {
    let ns = rng.random_range(2..=limits.max_states.max(2));
    let na = rng.random_range(1..=limits.max_actions.max(1));
    let h = rng.random_range(1..=limits.max_horizon.max(1));
    let mut source = Vec::with_capacity(ns * na * ns);
    let mut target = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        let row = random_simplex(ns, 0.3, rng);
        let mut masked: Vec<f64> = row.iter().map(|p| p * rng.random_range(0.1..1.0)).collect();
        let z: f64 = masked.iter().sum();
        masked.iter_mut().for_each(|p| *p /= z);
        source.extend(row);
        target.extend(masked);
    }
    let reward: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();
    let init = random_simplex(ns, 0.3, rng);
    let src = TabularMdp::new(ns, na, source, reward.clone(), init.clone(), h).expect("shapes match");
    let tgt = TabularMdp::new(ns, na, target, reward, init, h).expect("shapes match");
    DomainPair::new(src, tgt).expect("pair agrees off the dynamics")
}

/// Random time-indexed policy with every action probability positive.
pub fn random_full_support_policy<R: Rng + ?Sized>(horizon: usize, num_states: usize, num_actions: usize, rng: &mut R) -> StochasticPolicy {
    let mut probs = Vec::with_capacity(horizon * num_states * num_actions);
    for _ in 0..horizon * num_states {
        probs.extend(random_simplex(num_actions, 0.0, rng));
    }
    StochasticPolicy::new(horizon, num_states, num_actions, probs).expect("rows normalize")
}

/// Every check on `instances` random pairs.
pub fn run_suite<R: Rng + ?Sized>(instances: usize, limits: InstanceLimits, rng: &mut R) -> Result<TheoryReport, TheoryError> {
    let mut report = TheoryReport::default();
    for i in 0..instances {
        let pair = random_support_pair(limits, rng);
        let policy = random_full_support_policy(pair.horizon(), pair.num_states(), pair.num_actions(), rng);
        let name = format!("random-{i}-S{}A{}H{}", pair.num_states(), pair.num_actions(), pair.horizon());
        let kl = trajectory_kl(&pair, &policy)?;
        report.push(TheoryEntry::new("kl_decomposition", &name, Relation::Equal, kl.enumerated, kl.occupancy));
        report.push(check_pinsker_gap(&pair, &policy, &name)?);
        report.entries.extend(check_theorem(&pair, &name)?);
        report.entries.extend(check_jensen_bound(&pair, &policy, &name)?);
        report.push(check_mi_identity(&pair, &policy, &name)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{build_wall_gridworld, GridworldSpec, DOWN, LEFT, RIGHT};
    use crate::rng::from_seed;
    use approx::assert_abs_diff_eq;

    fn bernoulli_pair(p: f64, q: f64) -> DomainPair {
        let src = TabularMdp::new(2, 1, vec![p, 1.0 - p, 0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0], 1).unwrap();
        let tgt = TabularMdp::new(2, 1, vec![q, 1.0 - q, 0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0], 1).unwrap();
        DomainPair::new(src, tgt).unwrap()
    }

    #[test]
    fn identical_domains_have_zero_kl() {
        let mut rng = from_seed(1);
        let pair = random_support_pair(InstanceLimits::default(), &mut rng);
        let same = DomainPair::new(pair.source.clone(), pair.source.clone()).unwrap();
        let pi = random_full_support_policy(same.horizon(), same.num_states(), same.num_actions(), &mut rng);
        let kl = trajectory_kl(&same, &pi).unwrap();
        assert_eq!(kl.enumerated, 0.0);
        assert_eq!(kl.occupancy, 0.0);
    }

    #[test]
    fn bernoulli_kl_closed_form() {
        let pair = bernoulli_pair(0.9, 0.5);
        let pi = StochasticPolicy::uniform(1, 2, 1);
        let kl = trajectory_kl(&pair, &pi).unwrap();
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert_abs_diff_eq!(kl.enumerated, expect, epsilon = 1e-15);
        assert_abs_diff_eq!(kl.occupancy, expect, epsilon = 1e-15);
    }

    #[test]
    fn enumeration_refuses_large_instances() {
        let spec = GridworldSpec::wall_default();
        let pair = build_wall_gridworld(&spec).unwrap();
        let pi = StochasticPolicy::uniform(spec.horizon, spec.num_states(), 5);
        assert!(matches!(trajectory_kl(&pair, &pi), Err(TheoryError::TooManyTrajectories { .. })));
    }

    #[test]
    fn count_matches_enumeration() {
        let mut rng = from_seed(2);
        let pair = random_support_pair(InstanceLimits::default(), &mut rng);
        let pi = random_full_support_policy(pair.horizon(), pair.num_states(), pair.num_actions(), &mut rng);
        let mut n = 0usize;
        let mut mass = 0.0;
        for_each_trajectory(&pair.source, &pi, |q, _| {
            n += 1;
            mass += q;
        })
        .unwrap();
        assert_eq!(n as f64, count_trajectories(&pair.source, &pi));
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn detour_policy_has_zero_epsilon() {
        let spec = GridworldSpec { slip_prob: 0.0, ..GridworldSpec::wall_default() };
        let pair = build_wall_gridworld(&spec).unwrap();
        let na = 5;
        let mut table = vec![0.0; spec.num_states() * na];
        for s in 0..spec.num_states() {
            let a = match spec.cell_of(s) {
                Some(c) if c.row == 0 && c.col + 1 < spec.width => RIGHT,
                Some(c) if c.col + 1 == spec.width && c.row + 1 < spec.height => DOWN,
                _ => LEFT,
            };
            table[s * na + a] = 1.0;
        }
        let pi = StochasticPolicy::stationary(spec.horizon, spec.num_states(), na, &table).unwrap();
        assert_eq!(epsilon_of_policy(&pair, &pi).unwrap(), 0.0);
        // the direct route pays an infinite price
        let down = StochasticPolicy::stationary(
            spec.horizon,
            spec.num_states(),
            na,
            &(0..spec.num_states() * na).map(|i| if i % na == DOWN { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(epsilon_of_policy(&pair, &down).unwrap(), f64::INFINITY);
    }

    #[test]
    fn identical_domains_make_bounds_tight() {
        let mut rng = from_seed(3);
        let pair = random_support_pair(InstanceLimits::default(), &mut rng);
        let same = DomainPair::new(pair.source.clone(), pair.source.clone()).unwrap();
        let pi = random_full_support_policy(same.horizon(), same.num_states(), same.num_actions(), &mut rng);
        let gap = check_pinsker_gap(&same, &pi, "same").unwrap();
        assert_eq!((gap.lhs, gap.rhs), (0.0, 0.0));
        let th = check_theorem(&same, "same").unwrap();
        assert!(th[0].passed());
        assert_abs_diff_eq!(th[0].slack, 0.0, epsilon = 1e-12);
        let mi = check_mi_identity(&same, &pi, "same").unwrap();
        assert_eq!((mi.lhs, mi.rhs), (0.0, 0.0));
    }

    #[test]
    fn jensen_gap_on_bernoulli_toy() {
        // the second-step reward depends on where the first step lands
        let src = TabularMdp::new(2, 1, vec![0.5, 0.5, 0.5, 0.5], vec![0.0, 1.0], vec![1.0, 0.0], 2).unwrap();
        let tgt = TabularMdp::new(2, 1, vec![0.2, 0.8, 0.2, 0.8], vec![0.0, 1.0], vec![1.0, 0.0], 2).unwrap();
        let pair = DomainPair::new(src, tgt).unwrap();
        let pi = StochasticPolicy::uniform(2, 2, 1);
        let out = check_jensen_bound(&pair, &pi, "toy").unwrap();
        // target: second-step reward is 1 with prob 0.8
        let risk = (0.2 + 0.8 * 1f64.exp()).ln();
        assert_abs_diff_eq!(out[0].lhs, risk, epsilon = 1e-12);
        assert!(out[0].passed());
        // source: mean of Σ r + Δr over the four equally likely paths
        let d = |p: f64| (p / 0.5f64).ln();
        let mean = 0.5 * 1.0 + 0.5 * (d(0.2) + d(0.8)) + 0.5 * (d(0.2) + d(0.8));
        assert_abs_diff_eq!(out[1].rhs, mean, epsilon = 1e-12);
        assert!(out[1].slack > 0.0);
    }

    #[test]
    fn deterministic_jensen_is_tight() {
        let src = TabularMdp::new(1, 1, vec![1.0], vec![0.3], vec![1.0], 3).unwrap();
        let pair = DomainPair::new(src.clone(), src).unwrap();
        let out = check_jensen_bound(&pair, &StochasticPolicy::uniform(3, 1, 1), "det").unwrap();
        assert_abs_diff_eq!(out[1].lhs, out[1].rhs, epsilon = 1e-12);
    }

    #[test]
    fn mi_identity_two_point() {
        let pair = bernoulli_pair(0.9, 0.5);
        let e = check_mi_identity(&pair, &StochasticPolicy::uniform(1, 2, 1), "toy").unwrap();
        // target-half expectation of log(0.5/0.9) and log(0.5/0.1)
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(e.lhs, expect, epsilon = 1e-12);
        assert!(e.passed());
    }

    #[test]
    fn wall_gridworld_checks() {
        let spec = GridworldSpec::wall_default();
        let pair = build_wall_gridworld(&spec).unwrap();
        let th = check_theorem(&pair, "wall").unwrap();
        assert!(th.iter().all(|e| e.passed()), "{th:?}");
        let mi = check_mi_identity(&pair, &StochasticPolicy::uniform(spec.horizon, spec.num_states(), 5), "wall").unwrap();
        assert!(mi.passed(), "{mi:?}");
    }

    #[test]
    fn return_range_bounds_enumerated_returns() {
        let mut rng = from_seed(4);
        for _ in 0..20 {
            let pair = random_support_pair(InstanceLimits::default(), &mut rng);
            let pi = random_full_support_policy(pair.horizon(), pair.num_states(), pair.num_actions(), &mut rng);
            let range = return_range(&[&pair.source], &pi, true);
            let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
            for_each_trajectory(&pair.source, &pi, |_, steps| {
                let g: f64 = steps.iter().enumerate().map(|(t, &(s, a, _))| pair.source.reward(s, a) - pi.prob(t, s, a).ln()).sum();
                hi = hi.max(g);
                lo = lo.min(g);
            })
            .unwrap();
            assert_abs_diff_eq!(range.max, hi, epsilon = 1e-12);
            assert_abs_diff_eq!(range.min, lo, epsilon = 1e-12);
        }
    }

    #[test]
    fn report_csv_and_summary() {
        let mut rng = from_seed(5);
        let report = run_suite(3, InstanceLimits::default(), &mut rng).unwrap();
        assert_eq!(report.failures(), 0, "{}", report.summary());
        let csv = report.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert_eq!(csv.lines().count(), report.entries.len() + 1);
        assert!(report.summary().contains("theorem: 3 checked, 0 failed"));
    }

    #[test]
    fn slack_rules() {
        assert_eq!(slack(Relation::LessEq, 1.0, 2.0), 1.0);
        assert_eq!(slack(Relation::GreaterEq, 1.0, 2.0), -1.0);
        assert_eq!(slack(Relation::Equal, 1.0, 2.0), -1.0);
        assert!(passes(-1e-10, 0.5, 0.5));
        assert!(!passes(-1e-6, 0.5, 0.5));
        assert!(passes(slack(Relation::GreaterEq, 0.0, f64::NEG_INFINITY), 0.0, f64::NEG_INFINITY));
    }
}
