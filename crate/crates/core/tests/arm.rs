mod common;

use common::*;
use proptest::prelude::*;
use softseq::arm::{
    arm_dist, enforce_terminal, grad_path_partition, is_terminal_valid, nll_arm, path_partition, path_score,
    policy_of, total_mass,
};
use softseq::{Error, LogitTable, Mode};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn enforced_tables_are_distributions(t in small_tree(4), seed in any::<u64>(), scale in 0.1f64..6.0) {
        let q: LogitTable = enforce_terminal(&LogitTable::random(&t, &mut rng(seed), scale));
        prop_assert!(is_terminal_valid(&q));
        prop_assert!((total_mass(&q) - 1.0).abs() < 1e-9);
        let p = arm_dist(&q).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nll_three_ways(t in small_tree(4), seed in any::<u64>()) {
        let q = valid_logits(&t, seed);
        let p = arm_dist(&q).unwrap();
        for y in t.sequence_ids() {
            let tokens = t.sequence(y);
            let nll = nll_arm(&q, &tokens).unwrap();
            let split = path_partition(&q, &tokens).unwrap() - path_score(&q, &tokens).unwrap();
            prop_assert!((nll - split).abs() < 1e-12);
            prop_assert!((nll + p.logp_of(y)).abs() < 1e-12);
        }
    }

    #[test]
    fn row_shift_keeps_policy(t in small_tree(4), seed in any::<u64>(), shift_seed in any::<u64>()) {
        let q = valid_logits(&t, seed);
        let shifts: LogitTable = LogitTable::random(&t, &mut rng(shift_seed), 10.0);
        let shifted = LogitTable::new(q.map(|s, _, v| v + shifts.get(s, 0)));
        let (a, b) = (policy_of(&q).unwrap(), policy_of(&shifted).unwrap());
        for (x, y) in a.table().as_slice().iter().zip(b.table().as_slice()) {
            let (px, py) = (x.exp(), y.exp());
            prop_assert!((px - py).abs() < 1e-12);
        }
    }

    #[test]
    fn path_gradient_is_local(t in small_tree(3), seed in any::<u64>()) {
        let q = logits(&t, seed);
        for y in t.sequence_ids() {
            let tokens = t.sequence(y);
            let g = grad_path_partition(&q, &tokens).unwrap().to_dense(&t);
            let on_path: Vec<_> = t.path(&tokens).unwrap().iter().map(|p| p.0).collect();
            for s in t.states() {
                for a in 0..t.n_actions() {
                    if q.get(s, a) == f64::NEG_INFINITY {
                        continue;
                    }
                    let fd = central_difference(
                        |d| {
                            let mut qp = q.clone();
                            qp.set(s, a, q.get(s, a) + d);
                            path_partition(&qp, &tokens).unwrap()
                        },
                        1e-5,
                    );
                    prop_assert!((fd - g.get(s, a)).abs() < 1e-6);
                    if !on_path.contains(&s) {
                        prop_assert_eq!(g.get(s, a), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn leaking_table_is_rejected() {
    let t = tree(1, 2, Mode::VariableLen);
    let q: LogitTable = LogitTable::zeros(&t);
    assert!(!is_terminal_valid(&q));
    assert!((total_mass(&q) - 0.75).abs() < 1e-15);
    assert!(matches!(arm_dist(&q), Err(Error::Validity { .. })));
    assert!((total_mass(&enforce_terminal(&q)) - 1.0).abs() < 1e-15);
}

#[test]
fn dead_row_on_path_is_degenerate() {
    let t = tree(2, 2, Mode::FixedLen);
    let mut q: LogitTable = LogitTable::zeros(&t);
    let s = t.child(softseq::StateId::ROOT, 0).unwrap();
    q.row_mut(s).fill(f64::NEG_INFINITY);
    assert!(matches!(arm_dist(&q), Err(Error::DegenerateState { .. })));
    q.set(softseq::StateId::ROOT, 0, f64::NEG_INFINITY);
    assert!(arm_dist(&q).is_ok());
}
