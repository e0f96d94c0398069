//! The reward correction `Δr(s, a, s') = log p_target(s'|s,a) - log p_source(s'|s,a)`.
//!
//! Three estimators share one contract:
//!
//! - [`true_delta_r`] reads both transition tables (the oracle);
//! - [`TabularClassifierPair`] counts transitions per domain;
//! - [`NetClassifierPair`] trains two small feed-forward classifiers.
//!
//! Classifier-based estimates go through [`classifier_delta_r`], which
//! evaluates the four-term logit expression
//! `log q(t|s,a,s') - log q(t|s,a) - log q(s|s,a,s') + log q(s|s,a)`.

mod net;
mod tabular;

pub use net::{
    gradient_check, train_net_pair, Example, GradientCheck, Mlp, NetClassifierPair, NetConfig,
    NetTrainer, OneHotEncoder, OptimizerState, Standardizer,
};
pub use tabular::{fit_tabular, BayesClassifier, TabularClassifierPair};

use thiserror::Error;

use crate::mdp::DomainPair;

/// Default clamp for learned and counted corrections, in nats.
pub const DEFAULT_CLAMP: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum CorrectionError {
    #[error("transition ({s}, {a}, {s_next}) outside both supports")]
    OutsideSupport { s: usize, a: usize, s_next: usize },
    #[error("classifier has not been fitted")]
    Unfitted,
    #[error("index out of range: ({s}, {a}, {s_next})")]
    OutOfRange { s: usize, a: usize, s_next: usize },
    #[error("classifier training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("empty buffer: {0}")]
    EmptyBuffer(&'static str),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Where a correction comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Oracle,
    Tabular,
    Learned,
}

/// A correction defined on tabular transitions.
pub trait DeltaR {
    fn delta_r(&self, s: usize, a: usize, s_next: usize) -> f64;
    fn provenance(&self) -> Provenance;
    fn clamp_bound(&self) -> Option<f64>;
}

/// Clips to `[-bound, bound]` when a bound is set.
#[inline]
pub fn clamp_delta(x: f64, bound: Option<f64>) -> f64 {
    match bound {
        Some(b) => x.clamp(-b, b),
        None => x,
    }
}

/// Exact `log p_target - log p_source`; `-inf` where only the source can move.
pub fn true_delta_r(pair: &DomainPair, s: usize, a: usize, s_next: usize) -> Result<f64, CorrectionError> {
    let ns = pair.num_states();
    if s >= ns || s_next >= ns || a >= pair.num_actions() {
        return Err(CorrectionError::OutOfRange { s, a, s_next });
    }
    let pt = pair.target.prob(s, a, s_next);
    let ps = pair.source.prob(s, a, s_next);
    if pt <= 0.0 && ps <= 0.0 {
        return Err(CorrectionError::OutsideSupport { s, a, s_next });
    }
    Ok(pt.ln() - ps.ln())
}

/// Oracle correction read from known dynamics.
#[derive(Debug, Clone, Copy)]
pub struct OracleDeltaR<'a> {
    pub pair: &'a DomainPair,
    pub clamp: Option<f64>,
}

impl DeltaR for OracleDeltaR<'_> {
    /// Triples outside both supports never occur in data and map to 0.
    fn delta_r(&self, s: usize, a: usize, s_next: usize) -> f64 {
        true_delta_r(self.pair, s, a, s_next).map_or(0.0, |d| clamp_delta(d, self.clamp))
    }

    fn provenance(&self) -> Provenance {
        Provenance::Oracle
    }

    fn clamp_bound(&self) -> Option<f64> {
        self.clamp
    }
}

/// Binary domain classifier over tabular transitions. Log-probabilities are
/// returned as `[log q(source | ·), log q(target | ·)]`.
pub trait DomainClassifier {
    fn sas_log_probs(&self, s: usize, a: usize, s_next: usize) -> Result<[f64; 2], CorrectionError>;
    fn sa_log_probs(&self, s: usize, a: usize) -> Result<[f64; 2], CorrectionError>;
}

/// Four-term classifier estimate of `Δr`, clipped to `clamp`.
pub fn classifier_delta_r<C: DomainClassifier + ?Sized>(
    classifier: &C,
    s: usize,
    a: usize,
    s_next: usize,
    clamp: Option<f64>,
) -> Result<f64, CorrectionError> {
    let [sas_source, sas_target] = classifier.sas_log_probs(s, a, s_next)?;
    let [sa_source, sa_target] = classifier.sa_log_probs(s, a)?;
    let raw = sas_target - sa_target - sas_source + sa_source;
    Ok(clamp_delta(raw, clamp))
}

/// Reduced estimators used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingleClassifierMode {
    /// Only the `(s, a, s')` classifier; the `(s, a)` terms are dropped.
    SasOnly,
    /// Neither classifier sees the action: the `(s, s')` logit minus the `(s)` logit.
    ActionUnconditioned,
}

/// Classifiers that can also answer action-free queries.
pub trait MarginalClassifier {
    fn ss_log_probs(&self, s: usize, s_next: usize) -> Result<[f64; 2], CorrectionError>;
    fn s_log_probs(&self, s: usize) -> Result<[f64; 2], CorrectionError>;
}

pub fn single_classifier_delta_r<C>(
    classifier: &C,
    mode: SingleClassifierMode,
    s: usize,
    a: usize,
    s_next: usize,
    clamp: Option<f64>,
) -> Result<f64, CorrectionError>
where
    C: DomainClassifier + MarginalClassifier + ?Sized,
{
    let raw = match mode {
        SingleClassifierMode::SasOnly => {
            let [src, tgt] = classifier.sas_log_probs(s, a, s_next)?;
            tgt - src
        }
        SingleClassifierMode::ActionUnconditioned => {
            let [ss_src, ss_tgt] = classifier.ss_log_probs(s, s_next)?;
            let [s_src, s_tgt] = classifier.s_log_probs(s)?;
            ss_tgt - s_tgt - ss_src + s_src
        }
    };
    Ok(clamp_delta(raw, clamp))
}
