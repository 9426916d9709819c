mod common;

use common::*;
use proptest::prelude::*;
use softseq::arm::{arm_dist, value_table};
use softseq::bijection::{
    elbo, forward_backward, kl_bound_check, map_q_to_r, map_r_to_q, map_with_reference, prefix_marginals,
    softargmax_kl_lemma_check, verify_bijection, ReferencePolicy,
};
use softseq::dist::{kl_exact, policy_to_seq};
use softseq::ebm::{ebm_dist, log_partition_dp};
use softseq::seqspace::Transition;
use softseq::{Mode, RewardTable};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn same_distribution(t in small_tree(4), seed in any::<u64>()) {
        let r = rewards(&t, seed);
        let q = map_r_to_q(&r);
        prop_assert!(ebm_dist(&r).unwrap().max_prob_diff(&arm_dist(&q).unwrap()) < 1e-10);
        prop_assert!((log_partition_dp(&r).root - value_table(&q).root).abs() < 1e-9);
        prop_assert!(verify_bijection(&r, 1e-9).passed());
    }

    #[test]
    fn round_trips(t in small_tree(4), seed in any::<u64>()) {
        let r = rewards(&t, seed);
        prop_assert!(map_q_to_r(&map_r_to_q(&r)).max_abs_diff(&r) < 1e-9);
        let q = logits(&t, seed);
        prop_assert!(map_r_to_q(&map_q_to_r(&q)).max_abs_diff(&q) < 1e-9);
    }

    #[test]
    fn forbidden_edges_survive(t in small_tree(4), seed in any::<u64>()) {
        let r = rewards_with_holes(&t, seed);
        let q = map_r_to_q(&r);
        prop_assert!(ebm_dist(&r).unwrap().max_prob_diff(&arm_dist(&q).unwrap()) < 1e-10);
        prop_assert!(verify_bijection(&r, 1e-9).passed());
    }

    #[test]
    fn backward_values_are_soft_values(t in small_tree(4), seed in any::<u64>()) {
        let r = rewards(&t, seed);
        let fb = forward_backward(&r);
        let v = value_table(&map_r_to_q(&r));
        for s in t.states() {
            prop_assert!((fb.log_beta[s.0] - v.get(s)).abs() < 1e-9);
        }
    }

    #[test]
    fn marginal_flow_conservation(t in small_tree(4), seed in any::<u64>()) {
        let r = rewards_with_holes(&t, seed);
        let g = prefix_marginals(&r);
        let fb = forward_backward(&r);
        for s in t.states() {
            let out: f64 = g.row(s).iter().sum();
            let reach = fb.log_prefix_mass(s).exp();
            prop_assert!((out - reach).abs() < 1e-10, "{out} vs {reach}");
            if let Some((parent, a)) = t.parent(s) {
                prop_assert!((g.get(parent, a) - reach).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn elbo_gap_is_kl(t in small_tree(4), seed in any::<u64>()) {
        let r = rewards(&t, seed);
        let q = valid_logits(&t, seed.wrapping_add(1));
        let e = elbo(&r, &q).unwrap();
        prop_assert!(e.gap >= -1e-12);
        let kl = kl_exact(&arm_dist(&q).unwrap(), &ebm_dist(&r).unwrap()).unwrap();
        prop_assert!((e.gap - kl).abs() < 1e-10);
        prop_assert!(elbo(&r, &map_r_to_q(&r)).unwrap().gap.abs() < 1e-9);
    }

    #[test]
    fn kl_bound(t in small_tree(3), seed in any::<u64>(), eps in 1e-4f64..0.5) {
        let r = rewards(&t, seed);
        let mut noise = rng(seed.wrapping_add(7));
        let q = softseq::LogitTable::new(map_r_to_q(&r).map(|_, _, v| {
            v + eps * rand::Rng::random_range(&mut noise, -1.0..=1.0)
        }));
        let (kl, bound) = kl_bound_check(&r, &q).unwrap();
        prop_assert!(kl <= bound);
    }

    #[test]
    fn lemma(f in prop::collection::vec(-20.0f64..20.0, 2..64), seed in any::<u64>()) {
        let mut g_rng = rng(seed);
        let g: Vec<f64> = f.iter().map(|x| x + rand::Rng::random_range(&mut g_rng, -3.0..3.0)).collect();
        let (kl, bound) = softargmax_kl_lemma_check(&f, &g).unwrap();
        prop_assert!(kl >= -1e-12 && kl <= bound);
    }

    #[test]
    fn reference_measure(t in small_tree(3), seed in any::<u64>()) {
        let r = rewards(&t, seed);
        let reference = ReferencePolicy::new(policy(&t, seed.wrapping_add(3)));
        let mapped = map_with_reference(&r, &reference).unwrap();
        let total = policy_to_seq(&mapped.total_policy().unwrap());
        let qref = reference.logits();
        let combined = RewardTable::new(r.map(|s, a, v| v + qref.get(s, a)));
        prop_assert!(total.max_prob_diff(&ebm_dist(&combined).unwrap()) < 1e-10);
    }
}

/// Every path has the same length without EOS, so a uniform reference only
/// adds a constant to each response score.
#[test]
fn uniform_reference_reduces_to_plain_mapping() {
    let t = tree(3, 3, Mode::FixedLen);
    let r = rewards(&t, 4);
    let reference = ReferencePolicy::new(softseq::NextTokenPolicy::uniform(&t));
    let mapped = map_with_reference(&r, &reference).unwrap();
    let plain = policy_to_seq(&softseq::arm::policy_of(&map_r_to_q(&r)).unwrap());
    let total = policy_to_seq(&mapped.total_policy().unwrap());
    assert!(total.max_prob_diff(&plain) < 1e-12);
}

#[test]
fn marginals_match_gradient() {
    let t = tree(2, 3, Mode::VariableLen);
    let r = rewards(&t, 11);
    let g = prefix_marginals(&r);
    for s in t.states() {
        for a in 0..t.n_actions() {
            if t.transition(s, a) == Transition::Dangling {
                assert_eq!(g.get(s, a), 0.0);
                continue;
            }
            let fd = central_difference(
                |d| {
                    let mut rp = r.clone();
                    rp.set(s, a, r.get(s, a) + d);
                    log_partition_dp(&rp).root
                },
                1e-5,
            );
            assert!((fd - g.get(s, a)).abs() < 1e-6);
        }
    }
}
