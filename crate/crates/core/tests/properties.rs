use darc_core::correction::{classifier_delta_r, true_delta_r, BayesClassifier, TabularClassifierPair};
use darc_core::domains::{build_action_flip_gridworld, build_wall_gridworld, Cell, Domain, GridworldSpec};
use darc_core::maxent::{
    entropy_reg_return, entropy_reg_return_parts, policy_from_soft_q, soft_value_iteration, PlainReward, TransitionReward,
};
use darc_core::mdp::{check_support, occupancy_measure, sample_trajectory, trajectory_log_prob, validate_mdp, TabularMdp};
use darc_core::rng::from_seed;
use darc_core::theory::{for_each_trajectory, random_full_support_policy, random_support_pair, InstanceLimits};
use darc_core::{DomainPair, ReplayBuffer, StochasticPolicy, Transition};
use proptest::prelude::*;

fn instance(seed: u64) -> (DomainPair, StochasticPolicy) {
    let mut rng = from_seed(seed);
    let pair = random_support_pair(InstanceLimits::default(), &mut rng);
    let pi = random_full_support_policy(pair.horizon(), pair.num_states(), pair.num_actions(), &mut rng);
    (pair, pi)
}

struct Scaled<'a>(&'a TabularMdp, f64);

impl TransitionReward for Scaled<'_> {
    fn reward(&self, _t: usize, s: usize, a: usize, _s_next: usize) -> f64 {
        self.1 * self.0.reward(s, a)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_pairs_are_valid_with_support(seed in any::<u64>()) {
        let (mut pair, pi) = instance(seed);
        prop_assert!(validate_mdp(&pair.source).is_empty());
        prop_assert!(validate_mdp(&pair.target).is_empty());
        prop_assert!(check_support(&mut pair).ok);
        for t in 0..pi.horizon() {
            for s in 0..pi.num_states() {
                prop_assert!((pi.row(t, s).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn text_format_round_trips_bit_exact(seed in any::<u64>()) {
        let (pair, _) = instance(seed);
        let back = TabularMdp::from_text(&pair.source.to_text()).unwrap();
        prop_assert_eq!(back, pair.source);
    }

    #[test]
    fn trajectory_probabilities_sum_to_one(seed in any::<u64>()) {
        let (pair, pi) = instance(seed);
        let mut total = 0.0;
        for_each_trajectory(&pair.source, &pi, |q, _| total += q).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-9, "total {}", total);
    }

    #[test]
    fn occupancy_slices_are_distributions(seed in any::<u64>()) {
        let (pair, pi) = instance(seed);
        let occ = occupancy_measure(&pair.target, &pi).unwrap();
        for t in 0..occ.horizon() {
            prop_assert!((occ.slice(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_trajectories_are_reproducible(seed in any::<u64>()) {
        let (pair, pi) = instance(seed);
        let a = sample_trajectory(&pair.source, &pi, &mut from_seed(seed ^ 1)).unwrap();
        let b = sample_trajectory(&pair.source, &pi, &mut from_seed(seed ^ 1)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(trajectory_log_prob(&pair.source, &pi, &a).unwrap().is_finite());
    }

    #[test]
    fn soft_value_is_log_partition_over_trajectories(seed in any::<u64>(), deterministic in any::<bool>()) {
        // Exact for deterministic dynamics; with stochastic dynamics the
        // backup averages V over s' and Jensen makes it a lower bound.
        let (pair, _) = instance(seed);
        let mdp = &pair.source;
        let (ns, na, h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
        let mut transitions = mdp.transitions().to_vec();
        if deterministic {
            for row in transitions.chunks_mut(ns) {
                let best = (0..ns).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                row.iter_mut().enumerate().for_each(|(i, p)| *p = if i == best { 1.0 } else { 0.0 });
            }
        }
        let uniform = StochasticPolicy::uniform(h, ns, na);
        let log_actions = h as f64 * (na as f64).ln();
        for s0 in 0..ns {
            let mut init = vec![0.0; ns];
            init[s0] = 1.0;
            let from_s0 = TabularMdp::new(ns, na, transitions.clone(), mdp.rewards().to_vec(), init, h).unwrap();
            let v = soft_value_iteration(&from_s0, &PlainReward(&from_s0)).value(0, s0);
            let mut terms = Vec::new();
            for_each_trajectory(&from_s0, &uniform, |p, steps| {
                let ret: f64 = steps.iter().map(|&(s, a, _)| mdp.reward(s, a)).sum();
                terms.push(p.ln() + log_actions + ret);
            })
            .unwrap();
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            let tol = 1e-9 * v.abs().max(1.0);
            if deterministic {
                prop_assert!((v - log_z).abs() < tol, "V {} log Z {}", v, log_z);
            } else {
                prop_assert!(v <= log_z + tol, "V {} log Z {}", v, log_z);
            }
        }
    }

    #[test]
    fn soft_optimal_policy_beats_perturbations(seed in any::<u64>()) {
        let (pair, _) = instance(seed);
        let mdp = &pair.target;
        let pi = policy_from_soft_q(&soft_value_iteration(mdp, &PlainReward(mdp))).unwrap();
        let best = entropy_reg_return(mdp, &pi, &PlainReward(mdp)).unwrap();
        let mixed = entropy_reg_return(mdp, &pi.mix_uniform(0.01), &PlainReward(mdp)).unwrap();
        prop_assert!(mixed <= best + 1e-12, "mixed {} best {}", mixed, best);
    }

    #[test]
    fn doubling_rewards_leaves_entropy_term(seed in any::<u64>()) {
        let (pair, pi) = instance(seed);
        let mdp = &pair.source;
        let one = entropy_reg_return_parts(mdp, &pi, &Scaled(mdp, 1.0)).unwrap();
        let two = entropy_reg_return_parts(mdp, &pi, &Scaled(mdp, 2.0)).unwrap();
        prop_assert_eq!(one.entropy, two.entropy);
        prop_assert!((two.reward - 2.0 * one.reward).abs() < 1e-12 * one.reward.abs().max(1.0));
    }

    #[test]
    fn bayes_classifiers_recover_exact_correction(seed in any::<u64>()) {
        let (pair, _) = instance(seed);
        let bayes = BayesClassifier::new(&pair, vec![1.0; pair.num_states() * pair.num_actions()]);
        for s in 0..pair.num_states() {
            for a in 0..pair.num_actions() {
                for s2 in 0..pair.num_states() {
                    if pair.source.prob(s, a, s2) > 0.0 && pair.target.prob(s, a, s2) > 0.0 {
                        let est = classifier_delta_r(&bayes, s, a, s2, None).unwrap();
                        let exact = true_delta_r(&pair, s, a, s2).unwrap();
                        prop_assert!((est - exact).abs() < 1e-9);
                        let swapped = pair.swapped();
                        prop_assert!((true_delta_r(&swapped, s, a, s2).unwrap() + exact).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn counted_correction_respects_clamp(
        obs in proptest::collection::vec((0usize..3, 0usize..2, 0usize..3, any::<bool>()), 1..60),
        bound in 0.1f64..5.0,
    ) {
        let mut clf = TabularClassifierPair::new(3, 2, 0.5).unwrap();
        clf.add(Domain::Source, 0, 0, 0, 1.0).unwrap();
        clf.add(Domain::Target, 0, 0, 0, 1.0).unwrap();
        for &(s, a, s2, target) in &obs {
            let d = if target { Domain::Target } else { Domain::Source };
            clf.add(d, s, a, s2, 1.0).unwrap();
        }
        for s in 0..3 {
            for a in 0..2 {
                for s2 in 0..3 {
                    let v = classifier_delta_r(&clf, s, a, s2, Some(bound)).unwrap();
                    prop_assert!(v.abs() <= bound);
                }
            }
        }
    }

    #[test]
    fn buffer_never_exceeds_capacity(cap in 1usize..20, pushes in 0usize..80) {
        let mut buf = ReplayBuffer::new(Some(cap));
        for i in 0..pushes {
            buf.push(Transition { s: i % 3, a: 0, s_next: 0, r: i as f64, t: 0, done: false });
            prop_assert!(buf.len() <= cap);
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
        prop_assert_eq!(buf.inserted(), pushes as u64);
    }

    #[test]
    fn gridworld_builders_give_valid_pairs(
        w in 3usize..7, h in 3usize..7, slip in 0.01f64..0.5, wall_len in 1usize..3,
    ) {
        let goal = Cell { row: h - 1, col: 0 };
        let walls: Vec<Cell> = (0..wall_len.min(w - 1)).map(|c| Cell { row: 1, col: c }).collect();
        let spec = GridworldSpec {
            width: w,
            height: h,
            start: Cell { row: 0, col: 0 },
            goal,
            wall_cells: walls.iter().copied().collect(),
            slip_prob: slip,
            ..GridworldSpec::wall_default()
        };
        let flip = GridworldSpec { flip_cell: Some(Cell { row: 1, col: w - 1 }), ..spec.clone() };
        for mut pair in [build_wall_gridworld(&spec).unwrap(), build_action_flip_gridworld(&flip).unwrap()] {
            prop_assert!(validate_mdp(&pair.source).is_empty());
            prop_assert!(validate_mdp(&pair.target).is_empty());
            prop_assert!(check_support(&mut pair).ok);
        }
        let pair = build_wall_gridworld(&spec).unwrap();
        for c in &walls {
            let wall = spec.state_of(*c);
            // rows of the wall cells themselves are never reached in the target
            let open = (0..pair.num_states()).filter(|&s| spec.cell_of(s).is_none_or(|c| !walls.contains(&c)));
            for s in open {
                for a in 0..pair.num_actions() {
                    prop_assert_eq!(pair.target.prob(s, a, wall), 0.0);
                }
            }
        }
    }
}

/// Chi-square sanity check of the sampler against exact trajectory probabilities.
#[test]
fn sampler_frequencies_match_exact_probabilities() {
    let mut rng = from_seed(41);
    let pair = random_support_pair(InstanceLimits { max_states: 2, max_actions: 2, max_horizon: 3 }, &mut rng);
    let pi = random_full_support_policy(pair.horizon(), pair.num_states(), pair.num_actions(), &mut rng);
    let mut exact = Vec::new();
    for_each_trajectory(&pair.source, &pi, |q, steps| exact.push((steps.to_vec(), q))).unwrap();
    assert!(exact.len() <= 50);
    let n = 10_000;
    let mut counts = vec![0usize; exact.len()];
    for _ in 0..n {
        let traj = sample_trajectory(&pair.source, &pi, &mut rng).unwrap();
        let key: Vec<_> = traj.steps().iter().map(|tr| (tr.s, tr.a, tr.s_next)).collect();
        let i = exact.iter().position(|(k, _)| *k == key).expect("sampled trajectory was enumerated");
        counts[i] += 1;
    }
    let chi2: f64 = exact
        .iter()
        .zip(&counts)
        .filter(|((_, q), _)| *q > 0.0)
        .map(|((_, q), &c)| {
            let e = q * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // generous bound: the 0.999 quantile for up to 50 degrees of freedom is below 90
    assert!(chi2 < 90.0, "chi2 {chi2} over {} cells", exact.len());
}
