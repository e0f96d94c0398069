use crate::domains::Domain;
use crate::mdp::{DomainPair, Transition};

use super::{CorrectionError, DeltaR, DomainClassifier, MarginalClassifier, Provenance};

/// Counting classifiers: `q(target | cell) = (n_t + λ) / (n_t + n_s + 2λ)`.
///
/// Counts are stored as reals so that exact joint weights can stand in for
/// an infinite sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularClassifierPair {
    num_states: usize,
    num_actions: usize,
    counts_sas_source: Vec<f64>,
    counts_sas_target: Vec<f64>,
    counts_sa_source: Vec<f64>,
    counts_sa_target: Vec<f64>,
    smoothing: f64,
    clamp: Option<f64>,
}

impl TabularClassifierPair {
    pub fn new(num_states: usize, num_actions: usize, smoothing: f64) -> Result<Self, CorrectionError> {
        if !(smoothing > 0.0) || !smoothing.is_finite() {
            return Err(CorrectionError::Config(format!("smoothing {smoothing} must be positive")));
        }
        let sas = num_states * num_actions * num_states;
        let sa = num_states * num_actions;
        Ok(Self {
            num_states,
            num_actions,
            counts_sas_source: vec![0.0; sas],
            counts_sas_target: vec![0.0; sas],
            counts_sa_source: vec![0.0; sa],
            counts_sa_target: vec![0.0; sa],
            smoothing,
            clamp: None,
        })
    }

    /// Sets the clamp used when this pair acts as a [`DeltaR`].
    pub fn with_clamp(mut self, clamp: Option<f64>) -> Self {
        self.clamp = clamp;
        self
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    fn sas_idx(&self, s: usize, a: usize, s_next: usize) -> usize {
        (s * self.num_actions + a) * self.num_states + s_next
    }

    fn check(&self, s: usize, a: usize, s_next: usize) -> Result<(), CorrectionError> {
        if s >= self.num_states || s_next >= self.num_states || a >= self.num_actions {
            return Err(CorrectionError::OutOfRange { s, a, s_next });
        }
        Ok(())
    }

    /// Adds `weight` observations of `(s, a, s')` from `domain`.
    pub fn add(&mut self, domain: Domain, s: usize, a: usize, s_next: usize, weight: f64) -> Result<(), CorrectionError> {
        self.check(s, a, s_next)?;
        let i = self.sas_idx(s, a, s_next);
        let j = s * self.num_actions + a;
        match domain {
            Domain::Source => {
                self.counts_sas_source[i] += weight;
                self.counts_sa_source[j] += weight;
            }
            Domain::Target => {
                self.counts_sas_target[i] += weight;
                self.counts_sa_target[j] += weight;
            }
        }
        Ok(())
    }

    pub fn observe(&mut self, domain: Domain, tr: &Transition) -> Result<(), CorrectionError> {
        self.add(domain, tr.s, tr.a, tr.s_next, 1.0)
    }

    pub fn total(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Source => self.counts_sa_source.iter().sum(),
            Domain::Target => self.counts_sa_target.iter().sum(),
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.total(Domain::Source) > 0.0 && self.total(Domain::Target) > 0.0
    }

    fn log_pair(&self, n_source: f64, n_target: f64) -> [f64; 2] {
        let l = self.smoothing;
        let z = (n_source + n_target + 2.0 * l).ln();
        [(n_source + l).ln() - z, (n_target + l).ln() - z]
    }

    /// Mean cross-entropy of the fitted classifiers on their own data,
    /// target and source halves summed: `(ℓ_SAS, ℓ_SA)`.
    pub fn losses(&self) -> (f64, f64) {
        let (ns_tot, nt_tot) = (self.total(Domain::Source), self.total(Domain::Target));
        if ns_tot == 0.0 || nt_tot == 0.0 {
            return (f64::NAN, f64::NAN);
        }
        let loss = |src: &[f64], tgt: &[f64]| {
            let (mut ls, mut lt) = (0.0, 0.0);
            for (&n_s, &n_t) in src.iter().zip(tgt) {
                if n_s == 0.0 && n_t == 0.0 {
                    continue;
                }
                let [lp_s, lp_t] = self.log_pair(n_s, n_t);
                ls -= n_s * lp_s;
                lt -= n_t * lp_t;
            }
            ls / ns_tot + lt / nt_tot
        };
        (
            loss(&self.counts_sas_source, &self.counts_sas_target),
            loss(&self.counts_sa_source, &self.counts_sa_target),
        )
    }
}

/// Counts both buffers into a fresh pair.
pub fn fit_tabular(
    source: &[Transition],
    target: &[Transition],
    num_states: usize,
    num_actions: usize,
    smoothing: f64,
) -> Result<TabularClassifierPair, CorrectionError> {
    if source.is_empty() {
        return Err(CorrectionError::EmptyBuffer("source"));
    }
    if target.is_empty() {
        return Err(CorrectionError::EmptyBuffer("target"));
    }
    let mut pair = TabularClassifierPair::new(num_states, num_actions, smoothing)?;
    for tr in source {
        pair.observe(Domain::Source, tr)?;
    }
    for tr in target {
        pair.observe(Domain::Target, tr)?;
    }
    Ok(pair)
}

impl DomainClassifier for TabularClassifierPair {
    fn sas_log_probs(&self, s: usize, a: usize, s_next: usize) -> Result<[f64; 2], CorrectionError> {
        self.check(s, a, s_next)?;
        if !self.is_fitted() {
            return Err(CorrectionError::Unfitted);
        }
        let i = self.sas_idx(s, a, s_next);
        Ok(self.log_pair(self.counts_sas_source[i], self.counts_sas_target[i]))
    }

    fn sa_log_probs(&self, s: usize, a: usize) -> Result<[f64; 2], CorrectionError> {
        self.check(s, a, 0)?;
        if !self.is_fitted() {
            return Err(CorrectionError::Unfitted);
        }
        let j = s * self.num_actions + a;
        Ok(self.log_pair(self.counts_sa_source[j], self.counts_sa_target[j]))
    }
}

impl MarginalClassifier for TabularClassifierPair {
    fn ss_log_probs(&self, s: usize, s_next: usize) -> Result<[f64; 2], CorrectionError> {
        self.check(s, 0, s_next)?;
        if !self.is_fitted() {
            return Err(CorrectionError::Unfitted);
        }
        let (mut n_s, mut n_t) = (0.0, 0.0);
        for a in 0..self.num_actions {
            let i = self.sas_idx(s, a, s_next);
            n_s += self.counts_sas_source[i];
            n_t += self.counts_sas_target[i];
        }
        Ok(self.log_pair(n_s, n_t))
    }

    fn s_log_probs(&self, s: usize) -> Result<[f64; 2], CorrectionError> {
        self.check(s, 0, 0)?;
        if !self.is_fitted() {
            return Err(CorrectionError::Unfitted);
        }
        let range = s * self.num_actions..(s + 1) * self.num_actions;
        let n_s: f64 = self.counts_sa_source[range.clone()].iter().sum();
        let n_t: f64 = self.counts_sa_target[range].iter().sum();
        Ok(self.log_pair(n_s, n_t))
    }
}

impl DeltaR for TabularClassifierPair {
    /// Falls back to 0 before both buffers have data.
    fn delta_r(&self, s: usize, a: usize, s_next: usize) -> f64 {
        super::classifier_delta_r(self, s, a, s_next, self.clamp).unwrap_or(0.0)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Tabular
    }

    fn clamp_bound(&self) -> Option<f64> {
        self.clamp
    }
}

/// Exact posteriors under the joint `d ~ Bernoulli(½)`, `(s, a) ~ w`
/// shared by both domains, `s' ~ p_d(·|s, a)`.
#[derive(Debug, Clone)]
pub struct BayesClassifier<'a> {
    pair: &'a DomainPair,
    /// Unnormalized `(s, a)` weights, row-major.
    sa_weights: Vec<f64>,
}

impl<'a> BayesClassifier<'a> {
    pub fn new(pair: &'a DomainPair, sa_weights: Vec<f64>) -> Self {
        assert_eq!(sa_weights.len(), pair.num_states() * pair.num_actions());
        Self { pair, sa_weights }
    }

    /// Joint probability `P(d, s, a, s')`.
    pub fn joint(&self, domain: Domain, s: usize, a: usize, s_next: usize) -> f64 {
        let total: f64 = self.sa_weights.iter().sum();
        let w = self.sa_weights[s * self.pair.num_actions() + a] / total;
        let mdp = match domain {
            Domain::Source => &self.pair.source,
            Domain::Target => &self.pair.target,
        };
        0.5 * w * mdp.prob(s, a, s_next)
    }

    /// Exact counts a classifier would see with `scale` samples per domain.
    pub fn as_counts(&self, smoothing: f64, scale: f64) -> Result<TabularClassifierPair, CorrectionError> {
        let (ns, na) = (self.pair.num_states(), self.pair.num_actions());
        let mut out = TabularClassifierPair::new(ns, na, smoothing)?;
        for s in 0..ns {
            for a in 0..na {
                for s2 in 0..ns {
                    for d in [Domain::Source, Domain::Target] {
                        let j = self.joint(d, s, a, s2);
                        if j > 0.0 {
                            out.add(d, s, a, s2, 2.0 * scale * j)?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn log_posterior(p_source: f64, p_target: f64) -> [f64; 2] {
    let z = (p_source + p_target).ln();
    [p_source.ln() - z, p_target.ln() - z]
}

impl DomainClassifier for BayesClassifier<'_> {
    fn sas_log_probs(&self, s: usize, a: usize, s_next: usize) -> Result<[f64; 2], CorrectionError> {
        let ps = self.joint(Domain::Source, s, a, s_next);
        let pt = self.joint(Domain::Target, s, a, s_next);
        if ps + pt <= 0.0 {
            return Err(CorrectionError::OutsideSupport { s, a, s_next });
        }
        Ok(log_posterior(ps, pt))
    }

    fn sa_log_probs(&self, s: usize, a: usize) -> Result<[f64; 2], CorrectionError> {
        if self.sa_weights[s * self.pair.num_actions() + a] <= 0.0 {
            return Err(CorrectionError::OutsideSupport { s, a, s_next: 0 });
        }
        Ok([0.5f64.ln(), 0.5f64.ln()])
    }
}

impl MarginalClassifier for BayesClassifier<'_> {
    fn ss_log_probs(&self, s: usize, s_next: usize) -> Result<[f64; 2], CorrectionError> {
        let (mut ps, mut pt) = (0.0, 0.0);
        for a in 0..self.pair.num_actions() {
            ps += self.joint(Domain::Source, s, a, s_next);
            pt += self.joint(Domain::Target, s, a, s_next);
        }
        if ps + pt <= 0.0 {
            return Err(CorrectionError::OutsideSupport { s, a: 0, s_next });
        }
        Ok(log_posterior(ps, pt))
    }

    fn s_log_probs(&self, _s: usize) -> Result<[f64; 2], CorrectionError> {
        Ok([0.5f64.ln(), 0.5f64.ln()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::{classifier_delta_r, single_classifier_delta_r, true_delta_r, SingleClassifierMode};
    use crate::domains::{build_action_flip_gridworld, GridworldSpec, NUM_GRID_ACTIONS};

    fn tr(s: usize, a: usize, s_next: usize) -> Transition {
        Transition { s, a, s_next, r: 0.0, t: 0, done: false }
    }

    #[test]
    fn equal_counts_give_half() {
        let data = vec![tr(0, 0, 1), tr(1, 1, 0)];
        let c = fit_tabular(&data, &data, 2, 2, 0.5).unwrap();
        let [ls, lt] = c.sas_log_probs(0, 0, 1).unwrap();
        assert!((ls - 0.5f64.ln()).abs() < 1e-15 && (lt - 0.5f64.ln()).abs() < 1e-15);
        for (s, a, s2) in [(0, 0, 1), (1, 1, 0), (0, 1, 1)] {
            assert_eq!(classifier_delta_r(&c, s, a, s2, None).unwrap(), 0.0);
        }
    }

    #[test]
    fn smoothed_posterior_arithmetic() {
        let target: Vec<_> = (0..9).map(|_| tr(0, 0, 0)).collect();
        let source = vec![tr(0, 0, 0)];
        let c = fit_tabular(&source, &target, 1, 1, 0.5).unwrap();
        let [_, lt] = c.sas_log_probs(0, 0, 0).unwrap();
        assert!((lt.exp() - 9.5 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn empty_buffers_and_bad_smoothing_rejected() {
        assert_eq!(fit_tabular(&[], &[tr(0, 0, 0)], 1, 1, 0.5), Err(CorrectionError::EmptyBuffer("source")));
        assert_eq!(fit_tabular(&[tr(0, 0, 0)], &[], 1, 1, 0.5), Err(CorrectionError::EmptyBuffer("target")));
        assert!(TabularClassifierPair::new(1, 1, 0.0).is_err());
        let empty = TabularClassifierPair::new(1, 1, 0.5).unwrap();
        assert_eq!(classifier_delta_r(&empty, 0, 0, 0, None), Err(CorrectionError::Unfitted));
    }

    #[test]
    fn antisymmetric_under_domain_swap() {
        let a = vec![tr(0, 0, 1), tr(0, 0, 1), tr(0, 1, 0), tr(1, 0, 0)];
        let b = vec![tr(0, 0, 0), tr(0, 0, 1), tr(1, 1, 1)];
        let ab = fit_tabular(&a, &b, 2, 2, 0.5).unwrap();
        let ba = fit_tabular(&b, &a, 2, 2, 0.5).unwrap();
        for s in 0..2 {
            for act in 0..2 {
                for s2 in 0..2 {
                    let x = classifier_delta_r(&ab, s, act, s2, None).unwrap();
                    let y = classifier_delta_r(&ba, s, act, s2, None).unwrap();
                    assert!((x + y).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn sas_only_differs_by_sa_logit() {
        let a = vec![tr(0, 0, 1), tr(0, 0, 1), tr(0, 1, 0), tr(1, 0, 0)];
        let b = vec![tr(0, 0, 0), tr(0, 0, 1)];
        let c = fit_tabular(&a, &b, 2, 2, 0.5).unwrap();
        let full = classifier_delta_r(&c, 0, 0, 1, None).unwrap();
        let sas_only = single_classifier_delta_r(&c, SingleClassifierMode::SasOnly, 0, 0, 1, None).unwrap();
        let [sa_s, sa_t] = c.sa_log_probs(0, 0).unwrap();
        assert!((sas_only - full - (sa_t - sa_s)).abs() < 1e-14);
    }

    #[test]
    fn bayes_counts_match_oracle_on_flip_grid() {
        let spec = GridworldSpec::flip_default();
        let pair = build_action_flip_gridworld(&spec).unwrap();
        let w = vec![1.0; pair.num_states() * NUM_GRID_ACTIONS];
        let bayes = BayesClassifier::new(&pair, w);
        let counted = bayes.as_counts(0.5, 1e15).unwrap();
        let f = spec.state_of(spec.flip_cell.unwrap());
        for s in 0..pair.num_states() {
            for a in 0..NUM_GRID_ACTIONS {
                for s2 in 0..pair.num_states() {
                    if pair.source.prob(s, a, s2) > 0.0 && pair.target.prob(s, a, s2) > 0.0 {
                        let truth = true_delta_r(&pair, s, a, s2).unwrap();
                        assert!((classifier_delta_r(&bayes, s, a, s2, None).unwrap() - truth).abs() < 1e-12);
                        assert!((classifier_delta_r(&counted, s, a, s2, None).unwrap() - truth).abs() < 1e-9);
                    }
                }
            }
        }
        // uniform data: the action-free estimate sees no difference at the flip cell
        for s2 in 0..pair.num_states() {
            if let Ok(d) = single_classifier_delta_r(&counted, SingleClassifierMode::ActionUnconditioned, f, 0, s2, None) {
                if pair.source.row(f, 0)[s2] > 0.0 {
                    assert!(d.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn losses_are_finite_positive() {
        let a = vec![tr(0, 0, 1), tr(0, 1, 0)];
        let b = vec![tr(0, 0, 0)];
        let (l_sas, l_sa) = fit_tabular(&a, &b, 2, 2, 0.5).unwrap().losses();
        assert!(l_sas > 0.0 && l_sas.is_finite());
        assert!(l_sa > 0.0 && l_sa.is_finite());
    }
}
