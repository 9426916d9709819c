//! Energy-based models over the response space.
//!
//! The sequence score is the sum of immediate rewards along the path,
//! `R(y) = sum_t r(s_t, y_t)`, and `p(y) = exp(R(y) - A)` with `A` the
//! log-partition over all responses.

use crate::dist::SeqDistribution;
use crate::error::{Error, Result};
use crate::scalar::{logsumexp, Scalar};
use crate::seqspace::{Mode, PrefixTree, SequenceId, StateId, Transition};
use crate::table::{EdgeTable, RewardTable};

/// Per-state soft values and the root log-partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftValues<S: Scalar = f64> {
    pub root: S,
    pub values: Vec<S>,
}

impl<S: Scalar> SoftValues<S> {
    #[inline]
    pub fn get(&self, s: StateId) -> S {
        self.values[s.0]
    }
}

/// `R(y)` for a token list.
pub fn sequence_score<S: Scalar>(r: &RewardTable<S>, tokens: &[usize]) -> Result<S> {
    let path = r.tree().path(tokens)?;
    Ok(path_sum(r, &path))
}

fn path_sum<S: Scalar>(r: &EdgeTable<S>, path: &[(StateId, usize)]) -> S {
    path.iter().fold(S::zero(), |acc, &(s, a)| acc + r.get(s, a))
}

/// Scores of all responses in canonical order, accumulated top-down.
pub fn sequence_scores<S: Scalar>(r: &RewardTable<S>) -> Vec<S> {
    edge_path_sums(r)
}

/// Sum of table entries along every response path, in canonical order.
pub(crate) fn edge_path_sums<S: Scalar>(r: &EdgeTable<S>) -> Vec<S> {
    let tree = r.tree();
    let mut prefix = vec![S::zero(); tree.state_count()];
    let mut scores = vec![S::neg_infinity(); tree.sequence_count()];
    for d in 0..tree.max_len() {
        for s in tree.states_at_depth(d) {
            let sid = StateId(s);
            let base = prefix[s];
            for (a, &w) in r.row(sid).iter().enumerate() {
                match tree.transition_at(sid, d, a) {
                    Transition::Child(c) => prefix[c.0] = base + w,
                    Transition::Terminal(y) => scores[y.0] = base + w,
                    Transition::Dangling => {}
                }
            }
        }
    }
    scores
}

/// Rewards that carry a whole sequence score on the finishing edge.
///
/// Only defined with an EOS column; see [`install_sequence_scores`] for the
/// fixed-length counterpart.
pub fn lift_terminal<S: Scalar>(tree: &PrefixTree, scores: &[S]) -> Result<RewardTable<S>> {
    if tree.mode() != Mode::VariableLen {
        return Err(Error::FixedLenUnsupported);
    }
    install_sequence_scores(tree, scores)
}

/// Places `scores[y]` on the edge that finishes `y` and zero elsewhere.
///
/// With EOS this is the terminal lifting; in fixed-length mode the scores
/// sit on the final-depth edges. Either way `sequence_score` of the result
/// reproduces `scores` exactly.
pub fn install_sequence_scores<S: Scalar>(tree: &PrefixTree, scores: &[S]) -> Result<RewardTable<S>> {
    if scores.len() != tree.sequence_count() {
        return Err(Error::Shape(format!(
            "expected {} sequence scores, got {}",
            tree.sequence_count(),
            scores.len()
        )));
    }
    Ok(RewardTable::from_fn(tree, |s, a| match tree.transition(s, a) {
        Transition::Terminal(y) => scores[y.0],
        _ => S::zero(),
    }))
}

/// `A = log sum_y exp R(y)` by enumerating every response and summing its
/// path independently.
pub fn log_partition_bruteforce<S: Scalar>(r: &RewardTable<S>) -> S {
    let tree = r.tree();
    let scores: Vec<S> = tree
        .sequence_ids()
        .map(|y| path_sum(r, &tree.path_of(y)))
        .collect();
    logsumexp(scores.iter().copied())
}

/// Soft values `V(s) = LSE_a [r(s, a) + V(s ⊕ a)]` bottom-up; the root value
/// is the log-partition.
pub fn log_partition_dp<S: Scalar>(r: &RewardTable<S>) -> SoftValues<S> {
    let tree = r.tree();
    let mut values = vec![S::neg_infinity(); tree.state_count()];
    let mut buf = vec![S::neg_infinity(); tree.n_actions()];
    for d in (0..tree.max_len()).rev() {
        for s in tree.states_at_depth(d) {
            let sid = StateId(s);
            for (a, slot) in buf.iter_mut().enumerate() {
                *slot = match tree.transition_at(sid, d, a) {
                    Transition::Child(c) => r.get(sid, a) + values[c.0],
                    Transition::Terminal(_) => r.get(sid, a),
                    Transition::Dangling => S::neg_infinity(),
                };
            }
            values[s] = logsumexp(buf.iter().copied());
        }
    }
    SoftValues {
        root: values[0],
        values,
    }
}

/// The highest-scoring response and its score.
///
/// Ties prefer the shortest response, then the lexicographically smallest.
pub fn best_path<S: Scalar>(r: &RewardTable<S>) -> Result<(Vec<usize>, S)> {
    let tree = r.tree();
    // (best value, shortest optimal completion length) per state
    let mut best = vec![(S::neg_infinity(), usize::MAX); tree.state_count()];
    let mut choice = vec![usize::MAX; tree.state_count()];
    for d in (0..tree.max_len()).rev() {
        for s in tree.states_at_depth(d) {
            let sid = StateId(s);
            let mut here = (S::neg_infinity(), usize::MAX);
            let mut pick = usize::MAX;
            for a in 0..tree.n_actions() {
                let cand = match tree.transition_at(sid, d, a) {
                    Transition::Child(c) if best[c.0].1 != usize::MAX => {
                        (r.get(sid, a) + best[c.0].0, best[c.0].1 + 1)
                    }
                    Transition::Terminal(_) => (r.get(sid, a), 1),
                    _ => continue,
                };
                if cand.0 == S::neg_infinity() {
                    continue;
                }
                if pick == usize::MAX || cand.0 > here.0 || (cand.0 == here.0 && cand.1 < here.1) {
                    here = cand;
                    pick = a;
                }
            }
            best[s] = here;
            choice[s] = pick;
        }
    }
    if choice[0] == usize::MAX {
        return Err(Error::NoFeasiblePath);
    }
    let mut tokens = Vec::new();
    let mut s = StateId::ROOT;
    loop {
        let a = choice[s.0];
        tokens.push(a);
        match tree.transition(s, a) {
            Transition::Child(c) => s = c,
            _ => break,
        }
    }
    Ok((tokens, best[0].0))
}

/// `p(y) = exp(R(y) - A)`.
pub fn ebm_dist<S: Scalar>(r: &RewardTable<S>) -> Result<SeqDistribution<S>> {
    let scores = sequence_scores(r);
    let a = log_partition_dp(r).root;
    if !a.is_finite() {
        return Err(Error::NoFeasiblePath);
    }
    let logp = scores.into_iter().map(|x| x - a).collect();
    SeqDistribution::from_logp(r.tree(), logp)
}

/// Negative log-likelihood `A - R(y)`.
pub fn nll_ebm<S: Scalar>(r: &RewardTable<S>, tokens: &[usize]) -> Result<S> {
    Ok(log_partition_dp(r).root - sequence_score(r, tokens)?)
}

/// Gradient of the log-partition with respect to the sequence scores: the
/// model probabilities, indexed by sequence id.
pub fn grad_log_partition<S: Scalar>(r: &RewardTable<S>) -> Vec<S> {
    let a = log_partition_dp(r).root;
    sequence_scores(r).into_iter().map(|x| (x - a).exp()).collect()
}

/// Probability of one sequence id under the EBM.
pub fn ebm_prob<S: Scalar>(r: &RewardTable<S>, y: SequenceId) -> S {
    let a = log_partition_dp(r).root;
    (path_sum(r, &r.tree().path_of(y)) - a).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqspace::VocabSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree(v: usize, t: usize) -> PrefixTree {
        PrefixTree::new(VocabSpec::variable(v, t)).unwrap()
    }

    #[test]
    fn zero_rewards_score_zero() {
        let t = tree(2, 3);
        let r = RewardTable::<f64>::zeros(&t);
        for y in t.sequences() {
            assert_eq!(sequence_score(&r, &y).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_edge_reward() {
        let t = tree(1, 2);
        let mut r = RewardTable::<f64>::zeros(&t);
        r.set(StateId::ROOT, 1, 1.5);
        assert_eq!(sequence_score(&r, &[1]).unwrap(), 1.5);
        assert_eq!(sequence_score(&r, &[0, 1]).unwrap(), 0.0);
        assert!(sequence_score(&r, &[0]).is_err());
    }

    #[test]
    fn scores_match_independent_path_sums() {
        let t = tree(3, 3);
        let r = RewardTable::<f64>::random(&t, &mut ChaCha8Rng::seed_from_u64(3), 1.0);
        let all = sequence_scores(&r);
        for (i, y) in t.sequences().iter().enumerate() {
            // walk the prefix by hand
            let mut s = StateId::ROOT;
            let mut total = 0.0;
            for &tok in y {
                total += r.get(s, tok);
                if let Some(c) = t.child(s, tok) {
                    s = c;
                }
            }
            assert!((all[i] - total).abs() < 1e-14);
            assert_eq!(sequence_score(&r, y).unwrap(), total);
        }
    }

    #[test]
    fn lift_terminal_cases() {
        let t = tree(1, 2);
        let r = lift_terminal(&t, &[0.0f64, 0.0]).unwrap();
        assert_eq!(r, RewardTable::zeros(&t));
        let r = lift_terminal(&t, &[0.0f64, 7.0]).unwrap();
        let leaf = t.state_of_prefix(&[0]).unwrap();
        assert_eq!(r.get(leaf, 1), 7.0);
        assert_eq!(r.get(StateId::ROOT, 0), 0.0);
        assert_eq!(r.get(StateId::ROOT, 1), 0.0);
        let fixed = PrefixTree::new(VocabSpec::fixed(2, 2)).unwrap();
        assert_eq!(
            lift_terminal(&fixed, &[0.0f64; 4]).unwrap_err(),
            Error::FixedLenUnsupported
        );
    }

    #[test]
    fn lift_terminal_round_trip() {
        let t = tree(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..7).map(|_| crate::table::normal(&mut rng)).collect();
        let r = lift_terminal(&t, &scores).unwrap();
        for (i, y) in t.sequences().iter().enumerate() {
            assert_eq!(sequence_score(&r, y).unwrap(), scores[i]);
        }
    }

    #[test]
    fn log_partition_small_cases() {
        let t = tree(1, 2);
        let r = RewardTable::<f64>::zeros(&t);
        assert!((log_partition_bruteforce(&r) - 2f64.ln()).abs() < 1e-15);
        let v = log_partition_dp(&r);
        assert!((v.root - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v.get(t.state_of_prefix(&[0]).unwrap()), 0.0);
        let fixed = PrefixTree::new(VocabSpec::fixed(8, 4)).unwrap();
        let a = log_partition_bruteforce(&RewardTable::<f64>::zeros(&fixed));
        assert!((a - 8.317766166719343).abs() < 1e-12);
    }

    #[test]
    fn full_length_only_when_early_eos_forbidden() {
        let t = tree(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = RewardTable::<f64>::random(&t, &mut rng, 1.0);
        for s in t.states() {
            if t.depth(s) < 2 {
                r.set(s, 2, f64::NEG_INFINITY);
            }
        }
        let full: Vec<f64> = t
            .sequences()
            .iter()
            .filter(|y| y.len() == 3)
            .map(|y| sequence_score(&r, y).unwrap())
            .collect();
        let expected = logsumexp(full.iter().copied());
        assert!((log_partition_dp(&r).root - expected).abs() < 1e-12);
    }

    #[test]
    fn best_path_tie_breaking() {
        let t = tree(1, 2);
        let (y, v) = best_path(&RewardTable::<f64>::zeros(&t)).unwrap();
        assert_eq!((y, v), (vec![1], 0.0));
        let t = tree(2, 2);
        let mut r = RewardTable::<f64>::zeros(&t);
        r.set(StateId::ROOT, 0, 5.0);
        assert_eq!(best_path(&r).unwrap(), (vec![0, 2], 5.0));
        let r = RewardTable::<f64>::from_fn(&t, |_, _| f64::NEG_INFINITY);
        assert_eq!(best_path(&r).unwrap_err(), Error::NoFeasiblePath);
        // equal-length ties resolve lexicographically
        let mut r = RewardTable::<f64>::zeros(&t);
        r.set(StateId::ROOT, 2, -1.0);
        assert_eq!(best_path(&r).unwrap().0, vec![0, 2]);
    }

    #[test]
    fn ebm_distribution_cases() {
        let t = tree(1, 2);
        let p = ebm_dist(&RewardTable::<f64>::zeros(&t)).unwrap();
        assert!(p.logp().iter().all(|lp| (lp - 0.5f64.ln()).abs() < 1e-15));
        let r = lift_terminal(&t, &[9f64.ln(), 0.0]).unwrap();
        let probs = ebm_dist(&r).unwrap().probs();
        assert!((probs[0] - 0.9).abs() < 1e-15 && (probs[1] - 0.1).abs() < 1e-15);
        let dead = RewardTable::<f64>::from_fn(&t, |_, _| f64::NEG_INFINITY);
        assert!(ebm_dist(&dead).is_err());
    }

    #[test]
    fn nll_cases() {
        let t = tree(3, 3);
        let r = RewardTable::<f64>::zeros(&t);
        assert!((nll_ebm(&r, &[0, 1, 3]).unwrap() - 13f64.ln()).abs() < 1e-14);
        // mass 1 - eps on one sequence
        let eps = 1e-3;
        let mut scores = vec![(eps / 12.0f64).ln(); 13];
        scores[4] = (1.0 - eps).ln();
        let r = lift_terminal(&t, &scores).unwrap();
        let y = t.sequence(SequenceId(4));
        assert!((nll_ebm(&r, &y).unwrap() + (1.0 - eps).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_zero_table_is_uniform() {
        let t = tree(2, 3);
        let g = grad_log_partition(&RewardTable::<f64>::zeros(&t));
        assert!(g.iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-15));
        let mut scores = vec![0.0; 7];
        scores[3] = 30.0;
        let g = grad_log_partition(&lift_terminal(&t, &scores).unwrap());
        assert!(g[3] > 1.0 - 1e-12);
    }

    #[test]
    fn generic_over_f32() {
        let t = tree(2, 3);
        let r = RewardTable::<f32>::random(&t, &mut ChaCha8Rng::seed_from_u64(1), 1.0);
        let diff = (log_partition_dp(&r).root - log_partition_bruteforce(&r)).abs();
        assert!(diff < 1e-5);
    }
}
