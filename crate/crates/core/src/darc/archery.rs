//! Single-shot archery: learn `Δr(θ, s')` from shots in both domains, then
//! compare the plain source objective, the corrected source objective and
//! the target objective over a grid of angles.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::correction::{clamp_delta, train_net_pair, CorrectionError, Example, NetClassifierPair, NetConfig, DEFAULT_CLAMP};
use crate::domains::{angle_grid, archery_log_density, archery_reward, archery_sample, log_mean_exp, ArcherySpec, Domain};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ArcheryConfig {
    pub spec: ArcherySpec,
    /// Training shots per domain, angles uniform over the spec's range.
    pub episodes_per_domain: usize,
    pub net: NetConfig,
    pub grid_points: usize,
    /// Wind draws per angle; the same draws are reused at every angle.
    pub objective_samples: usize,
    pub clamp: Option<f64>,
    pub seed: u64,
}

impl Default for ArcheryConfig {
    fn default() -> Self {
        Self {
            spec: ArcherySpec::default(),
            episodes_per_domain: 10_000,
            net: NetConfig::archery(),
            grid_points: 81,
            objective_samples: 20_000,
            clamp: Some(DEFAULT_CLAMP),
            seed: 0,
        }
    }
}

/// Objectives `log E[exp(reward)]` on the angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcheryCurves {
    pub theta: Vec<f64>,
    /// Target wind, plain reward.
    pub target: Vec<f64>,
    /// Source wind, plain reward.
    pub source: Vec<f64>,
    /// Source wind, reward plus learned correction.
    pub source_modified: Vec<f64>,
    /// Source wind, reward plus exact correction.
    pub oracle_modified: Vec<f64>,
    /// Classifier losses `(ℓ_SAS, ℓ_SA)` averaged over the last 100 steps.
    pub final_loss: (f64, f64),
    pub classifier: NetClassifierPair,
}

/// Grid point with the largest value; the first one on ties.
pub fn argmax(theta: &[f64], values: &[f64]) -> f64 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    theta[best]
}

impl ArcheryCurves {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,target,source,source_modified,oracle_modified\n");
        for i in 0..self.theta.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.theta[i], self.target[i], self.source[i], self.source_modified[i], self.oracle_modified[i]
            )
            .unwrap();
        }
        out
    }

    pub fn argmax_target(&self) -> f64 {
        argmax(&self.theta, &self.target)
    }

    pub fn argmax_source(&self) -> f64 {
        argmax(&self.theta, &self.source)
    }

    pub fn argmax_modified(&self) -> f64 {
        argmax(&self.theta, &self.source_modified)
    }

    /// Target objective at the grid point nearest `theta`.
    pub fn target_at(&self, theta: f64) -> f64 {
        let i = (0..self.theta.len())
            .min_by(|&a, &b| (self.theta[a] - theta).abs().total_cmp(&(self.theta[b] - theta).abs()))
            .expect("non-empty grid");
        self.target[i]
    }
}

fn shots<R: Rng + ?Sized>(domain: Domain, cfg: &ArcheryConfig, rng: &mut R) -> Vec<Example> {
    let (lo, hi) = cfg.spec.angle_range;
    (0..cfg.episodes_per_domain)
        .map(|_| {
            let theta = rng.random_range(lo..=hi);
            let s_prime = archery_sample(theta, domain, &cfg.spec, rng);
            Example { sa: vec![theta], sas: vec![theta, s_prime] }
        })
        .collect()
}

/// Trains the classifiers and evaluates the four curves.
pub fn run_archery(cfg: &ArcheryConfig) -> Result<ArcheryCurves, CorrectionError> {
    cfg.spec.validate().map_err(|e| CorrectionError::Config(e.to_string()))?;
    if cfg.objective_samples == 0 || cfg.grid_points == 0 {
        return Err(CorrectionError::Config("archery needs samples and grid points".into()));
    }
    let source = shots(Domain::Source, cfg, &mut stream(cfg.seed, Stream::SourceRollout));
    let target = shots(Domain::Target, cfg, &mut stream(cfg.seed, Stream::TargetRollout));
    let (mut classifier, history) = train_net_pair(&source, &target, &cfg.net, None, &mut stream(cfg.seed, Stream::Classifier))?;
    classifier.clamp = cfg.clamp;
    let tail = &history[history.len().saturating_sub(100)..];
    let final_loss = (
        tail.iter().map(|l| l.0).sum::<f64>() / tail.len() as f64,
        tail.iter().map(|l| l.1).sum::<f64>() / tail.len() as f64,
    );

    // common random numbers: one set of wind draws per domain, reused at every angle
    let mut rng = stream(cfg.seed, Stream::Archery);
    let mut winds = |domain: Domain| -> Vec<f64> {
        let (mu, sigma) = cfg.spec.wind(domain);
        let normal = Normal::new(mu, sigma).expect("validated wind std");
        (0..cfg.objective_samples).map(|_| normal.sample(&mut rng)).collect()
    };
    let source_winds = winds(Domain::Source);
    let target_winds = winds(Domain::Target);

    let theta = angle_grid(&cfg.spec, cfg.grid_points);
    let mut curves = ArcheryCurves {
        theta: theta.clone(),
        target: Vec::new(),
        source: Vec::new(),
        source_modified: Vec::new(),
        oracle_modified: Vec::new(),
        final_loss,
        classifier,
    };
    for &th in &theta {
        let landings_t: Vec<f64> = target_winds.iter().map(|&f| cfg.spec.landing(th, f)).collect();
        let landings_s: Vec<f64> = source_winds.iter().map(|&f| cfg.spec.landing(th, f)).collect();
        let plain_t: Vec<f64> = landings_t.iter().map(|&s| archery_reward(s)).collect();
        let plain_s: Vec<f64> = landings_s.iter().map(|&s| archery_reward(s)).collect();
        let learned: Vec<f64> = landings_s
            .iter()
            .map(|&s| archery_reward(s) + curves.classifier.delta_r_features(&[th], &[th, s]))
            .collect();
        let oracle: Vec<f64> = landings_s
            .iter()
            .map(|&s| {
                let d = archery_log_density(th, s, Domain::Target, &cfg.spec) - archery_log_density(th, s, Domain::Source, &cfg.spec);
                archery_reward(s) + clamp_delta(d, cfg.clamp)
            })
            .collect();
        curves.target.push(log_mean_exp(&plain_t));
        curves.source.push(log_mean_exp(&plain_s));
        curves.source_modified.push(log_mean_exp(&learned));
        curves.oracle_modified.push(log_mean_exp(&oracle));
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[-1.0, 0.0, 1.0], &[1.0, 3.0, 3.0]), 0.0);
    }

    #[test]
    fn small_run_produces_finite_curves() {
        let cfg = ArcheryConfig {
            episodes_per_domain: 500,
            net: NetConfig { steps: 50, batch_size: 128, ..NetConfig::archery() },
            grid_points: 9,
            objective_samples: 500,
            ..ArcheryConfig::default()
        };
        let c = run_archery(&cfg).unwrap();
        assert_eq!(c.theta.len(), 9);
        for v in c.target.iter().chain(&c.source).chain(&c.source_modified).chain(&c.oracle_modified) {
            assert!(v.is_finite());
        }
        assert!(c.to_csv().lines().count() == 10);
        // the exact correction turns the source objective into the target one (up to sampling)
        assert!((c.argmax_target() - argmax(&c.theta, &c.oracle_modified)).abs() <= 0.5 + 1e-12);
    }
}
