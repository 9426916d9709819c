//! The correspondence between reward tables and logit tables.
//!
//! `map_r_to_q` adds the soft value of the next state to every non-finishing
//! reward, sweeping the tree bottom-up; `map_q_to_r` subtracts it again and
//! needs only one pass. Under this pair the energy-based model of `r` and the
//! autoregressive model of `q` define the same sequence distribution, and the
//! root soft value is the log-partition.
//!
//! The module also carries the forward/backward variables of the tree, the
//! prefix marginals (the gradient of the log-partition with respect to `r`),
//! the evidence lower bound and the softargmax KL bounds.

use serde::{Deserialize, Serialize};

use crate::arm::{arm_dist, policy_of, value_table};
use crate::dist::{kl_exact, NextTokenPolicy};
use crate::ebm::{ebm_dist, log_partition_bruteforce, log_partition_dp, sequence_scores, SoftValues};
use crate::error::{Error, Result};
use crate::scalar::{inf_aware_abs_diff, log_softargmax, logsumexp_slice, Scalar};
use crate::seqspace::{StateId, Transition};
use crate::table::{EdgeTable, LogitTable, RewardTable};

/// `q = M(r)` together with the soft values `V_q` it materializes.
pub fn map_r_to_q_with_values<S: Scalar>(r: &RewardTable<S>) -> (LogitTable<S>, SoftValues<S>) {
    let tree = r.tree();
    let mut q = EdgeTable::filled(tree, S::neg_infinity());
    let mut values = vec![S::neg_infinity(); tree.state_count()];
    for d in (0..tree.max_len()).rev() {
        for s in tree.states_at_depth(d) {
            let sid = StateId(s);
            for a in 0..tree.n_actions() {
                let v = match tree.transition_at(sid, d, a) {
                    Transition::Terminal(_) => r.get(sid, a),
                    Transition::Child(c) => r.get(sid, a) + values[c.0],
                    Transition::Dangling => S::neg_infinity(),
                };
                q.set(sid, a, v);
            }
            values[s] = logsumexp_slice(q.row(sid));
        }
    }
    let soft = SoftValues {
        root: values[0],
        values,
    };
    (LogitTable::new(q), soft)
}

/// `q = M(r)`.
pub fn map_r_to_q<S: Scalar>(r: &RewardTable<S>) -> LogitTable<S> {
    map_r_to_q_with_values(r).0
}

/// `r = M^-1(q)`: every entry depends only on `q(s, .)` and the child row.
///
/// A `-inf` logit maps to a `-inf` reward, as does a finite logit whose child
/// row is entirely `-inf`.
pub fn map_q_to_r<S: Scalar>(q: &LogitTable<S>) -> RewardTable<S> {
    let tree = q.tree();
    let values = value_table(q).values;
    RewardTable::from_fn(tree, |s, a| {
        let x = q.get(s, a);
        match tree.transition(s, a) {
            Transition::Terminal(_) => x,
            Transition::Child(c) => {
                if x == S::neg_infinity() || values[c.0] == S::neg_infinity() {
                    S::neg_infinity()
                } else {
                    x - values[c.0]
                }
            }
            Transition::Dangling => S::neg_infinity(),
        }
    })
}

/// One named residual against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Residuals of the EBM/ARM correspondence for one reward table.
///
/// * `max_prob_diff`: largest per-sequence `|p_ebm - p_arm|` for `q = M(r)`.
/// * `log_partition_gap`: `|A (enumerated) - V_q(root)|`.
/// * `round_trip_r`: `|M^-1(M(r)) - r|`, over edges with finite `M(r)`; the
///   other edges carry no sequence mass and are not recoverable.
/// * `round_trip_q`: `|M(M^-1(q)) - q|`.
pub fn verify_bijection<S: Scalar>(r: &RewardTable<S>, tol: f64) -> Report {
    let (q, values) = map_r_to_q_with_values(r);
    let prob_diff = match (ebm_dist(r), arm_dist(&q)) {
        (Ok(pe), Ok(pa)) => pe.max_prob_diff(&pa).as_f64(),
        _ => f64::INFINITY,
    };
    let a = log_partition_bruteforce(r);
    let part_gap = inf_aware_abs_diff(a, values.root).as_f64();
    let r_back = map_q_to_r(&q);
    let mut rt_r = S::zero();
    for (i, (&orig, &back)) in r.as_slice().iter().zip(r_back.as_slice()).enumerate() {
        if q.as_slice()[i] != S::neg_infinity() {
            rt_r = rt_r.max(inf_aware_abs_diff(orig, back));
        }
    }
    let rt_q = map_r_to_q(&r_back).max_abs_diff(&q).as_f64();
    Report {
        checks: vec![
            Check::at_most("max_prob_diff", prob_diff, tol),
            Check::at_most("log_partition_gap", part_gap, tol),
            Check::at_most("round_trip_r", rt_r.as_f64(), tol),
            Check::at_most("round_trip_q", rt_q, tol),
        ],
    }
}

/// A reference next-token policy and its log-probabilities as logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy<S: Scalar = f64> {
    policy: NextTokenPolicy<S>,
}

impl<S: Scalar> ReferencePolicy<S> {
    pub fn new(policy: NextTokenPolicy<S>) -> Self {
        Self { policy }
    }

    pub fn policy(&self) -> &NextTokenPolicy<S> {
        &self.policy
    }

    /// `q_ref(s, a) = log pi_ref(a | s)`.
    pub fn logits(&self) -> LogitTable<S> {
        LogitTable::new(self.policy.table().clone())
    }
}

/// Residual logits under a reference measure and the total logits they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMapping<S: Scalar = f64> {
    pub residual: LogitTable<S>,
    pub total: LogitTable<S>,
}

impl<S: Scalar> ReferenceMapping<S> {
    pub fn total_policy(&self) -> Result<NextTokenPolicy<S>> {
        policy_of(&self.total)
    }
}

/// Maps `r` relative to a reference policy: the residual satisfies
/// `q(s, a) = r(s, a) + V_{q + q_ref}(s ⊕ a)`, where the soft value is the
/// log-expectation of `exp q` under `pi_ref`.
pub fn map_with_reference<S: Scalar>(r: &RewardTable<S>, reference: &ReferencePolicy<S>) -> Result<ReferenceMapping<S>> {
    let qref = reference.logits();
    r.assert_same_tree(&qref)?;
    let tree = r.tree();
    let mut q = EdgeTable::filled(tree, S::neg_infinity());
    let mut total = EdgeTable::filled(tree, S::neg_infinity());
    let mut values = vec![S::neg_infinity(); tree.state_count()];
    for d in (0..tree.max_len()).rev() {
        for s in tree.states_at_depth(d) {
            let sid = StateId(s);
            for a in 0..tree.n_actions() {
                let v = match tree.transition_at(sid, d, a) {
                    Transition::Terminal(_) => r.get(sid, a),
                    Transition::Child(c) => r.get(sid, a) + values[c.0],
                    Transition::Dangling => S::neg_infinity(),
                };
                q.set(sid, a, v);
                total.set(sid, a, v + qref.get(sid, a));
            }
            values[s] = logsumexp_slice(total.row(sid));
        }
    }
    Ok(ReferenceMapping {
        residual: LogitTable::new(q),
        total: LogitTable::new(total),
    })
}

/// Forward and backward variables of the tree, in log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackward<S: Scalar = f64> {
    /// Accumulated reward of the unique path to each state.
    pub log_alpha: Vec<S>,
    /// Log of the total weight of all completions from each state.
    pub log_beta: Vec<S>,
    pub log_z: S,
}

impl<S: Scalar> ForwardBackward<S> {
    /// `log(alpha(s) * beta(s) / Z)`: probability of the prefix of `s`.
    pub fn log_prefix_mass(&self, s: StateId) -> S {
        self.log_alpha[s.0] + self.log_beta[s.0] - self.log_z
    }
}

pub fn forward_backward<S: Scalar>(r: &RewardTable<S>) -> ForwardBackward<S> {
    let tree = r.tree();
    let log_beta = log_partition_dp(r).values;
    let mut log_alpha = vec![S::neg_infinity(); tree.state_count()];
    log_alpha[0] = S::zero();
    for d in 0..tree.max_len() {
        for s in tree.states_at_depth(d) {
            let sid = StateId(s);
            for a in 0..tree.n_actions() {
                if let Transition::Child(c) = tree.transition_at(sid, d, a) {
                    log_alpha[c.0] = log_alpha[s] + r.get(sid, a);
                }
            }
        }
    }
    ForwardBackward {
        log_z: log_beta[0],
        log_alpha,
        log_beta,
    }
}

/// `G(s, a)`: probability that a response starts with `prefix(s) ⊕ a`.
///
/// Equal to the derivative of the log-partition with respect to `r(s, a)`.
pub fn prefix_marginals<S: Scalar>(r: &RewardTable<S>) -> EdgeTable<S> {
    let fb = forward_backward(r);
    let tree = r.tree();
    EdgeTable::from_fn(tree, |s, a| {
        let cont = match tree.transition(s, a) {
            Transition::Terminal(_) => S::zero(),
            Transition::Child(c) => fb.log_beta[c.0],
            Transition::Dangling => return S::zero(),
        };
        let lg = fb.log_alpha[s.0] + r.get(s, a) + cont - fb.log_z;
        if lg == S::neg_infinity() {
            S::zero()
        } else {
            lg.exp()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Elbo<S: Scalar = f64> {
    /// `E_{Y ~ p_q}[R(Y) - log p_q(Y)]`.
    pub bound: S,
    /// `A - bound`, equal to `KL(p_q || p_ebm)`.
    pub gap: S,
}

/// Exact evidence lower bound of the log-partition of `r` under the ARM `q`.
pub fn elbo<S: Scalar>(r: &RewardTable<S>, q: &LogitTable<S>) -> Result<Elbo<S>> {
    r.assert_same_tree(q)?;
    let p = arm_dist(q)?;
    let scores = sequence_scores(r);
    let mut bound = S::zero();
    for (i, (&lp, &score)) in p.logp().iter().zip(&scores).enumerate() {
        if lp == S::neg_infinity() {
            continue;
        }
        if score == S::neg_infinity() {
            return Err(Error::SupportViolation(format!(
                "sequence {:?} has ARM mass but -inf reward",
                r.tree().sequence(crate::seqspace::SequenceId(i))
            )));
        }
        bound = bound + lp.exp() * (score - lp);
    }
    let a = log_partition_dp(r).root;
    Ok(Elbo { bound, gap: a - bound })
}

/// `KL(softargmax f || softargmax g)` and the bound `2 |f - g|_inf`.
pub fn softargmax_kl_lemma_check<S: Scalar>(f: &[S], g: &[S]) -> Result<(S, S)> {
    if f.len() != g.len() || f.is_empty() {
        return Err(Error::Shape(format!(
            "vectors must have equal nonzero length, got {} and {}",
            f.len(),
            g.len()
        )));
    }
    if f.iter().chain(g).any(|v| !v.is_finite()) {
        return Err(Error::Shape("entries must be finite".into()));
    }
    let lf = log_softargmax(f);
    let lg = log_softargmax(g);
    let kl = lf
        .iter()
        .zip(&lg)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum::<S>();
    let sup = f
        .iter()
        .zip(g)
        .map(|(&a, &b)| (a - b).abs())
        .fold(S::zero(), S::max);
    Ok((kl, S::lit(2.0) * sup))
}

/// `KL(p_ebm(r) || p_arm(q))` and the bound `2 T max |M(r) - q|`.
///
/// The maximum runs over every state of the tree; a `-inf` in one table
/// facing a finite value in the other makes the bound infinite.
pub fn kl_bound_check<S: Scalar>(r: &RewardTable<S>, q: &LogitTable<S>) -> Result<(S, S)> {
    r.assert_same_tree(q)?;
    let pe = ebm_dist(r)?;
    let pa = arm_dist(q)?;
    let kl = kl_exact(&pe, &pa)?;
    let sup = map_r_to_q(r).max_abs_diff(q);
    let horizon = S::lit(r.tree().max_len() as f64);
    Ok((kl, S::lit(2.0) * horizon * sup))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::enforce_terminal;
    use crate::seqspace::{PrefixTree, VocabSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_worked_case() {
        let t = PrefixTree::new(VocabSpec::variable(1, 2)).unwrap();
        let r = RewardTable::<f64>::zeros(&t);
        let (q, v) = map_r_to_q_with_values(&r);
        assert_eq!(q.get(StateId::ROOT, 1), 0.0);
        assert_eq!(q.get(StateId::ROOT, 0), 0.0);
        assert!((v.root - 2f64.ln()).abs() < 1e-15);
        assert_eq!(map_q_to_r(&q), r);
    }

    #[test]
    fn zero_table_report_is_exact() {
        let t = PrefixTree::new(VocabSpec::variable(2, 3)).unwrap();
        let rep = verify_bijection(&RewardTable::<f64>::zeros(&t), 1e-12);
        assert!(rep.passed());
        for c in &rep.checks {
            assert!(c.value < 1e-15, "{c:?}");
        }
    }

    #[test]
    fn forbidden_edges_still_verify() {
        let t = PrefixTree::new(VocabSpec::variable(3, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let r = RewardTable::<f64>::random_with_forbidden(&t, &mut rng, 1.0, 0.3);
            let rep = verify_bijection(&r, 1e-9);
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn forward_backward_small() {
        let t = PrefixTree::new(VocabSpec::variable(1, 2)).unwrap();
        let fb = forward_backward(&RewardTable::<f64>::zeros(&t));
        assert!((fb.log_beta[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(fb.log_beta[1], 0.0);
        assert_eq!(fb.log_alpha[1], 0.0);
        let g = prefix_marginals(&RewardTable::<f64>::zeros(&t));
        assert!((g.get(StateId::ROOT, 0) - 0.5).abs() < 1e-15);
        assert!((g.get(StateId::ROOT, 1) - 0.5).abs() < 1e-15);
        assert!((g.get(StateId(1), 1) - 0.5).abs() < 1e-15);
        assert_eq!(g.get(StateId(1), 0), 0.0);
    }

    #[test]
    fn elbo_is_tight_at_the_mapping() {
        let t = PrefixTree::new(VocabSpec::variable(2, 3)).unwrap();
        let r = RewardTable::<f64>::random(&t, &mut ChaCha8Rng::seed_from_u64(2), 1.0);
        let e = elbo(&r, &map_r_to_q(&r)).unwrap();
        assert!(e.gap.abs() < 1e-12);
        let q0 = enforce_terminal(&LogitTable::zeros(&t));
        assert!(elbo(&r, &q0).unwrap().gap > 1e-6);
    }

    #[test]
    fn lemma_check_cases() {
        assert_eq!(softargmax_kl_lemma_check(&[0.3f64, -1.0], &[0.3, -1.0]).unwrap(), (0.0, 0.0));
        let (kl, b) = softargmax_kl_lemma_check(&[0.3f64, -1.0, 2.0], &[1.3, 0.0, 3.0]).unwrap();
        assert!(kl.abs() < 1e-15);
        assert!((b - 2.0).abs() < 1e-15);
        assert!(softargmax_kl_lemma_check::<f64>(&[1.0], &[1.0, 2.0]).is_err());
        assert!(softargmax_kl_lemma_check::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn kl_bound_cases() {
        let t = PrefixTree::new(VocabSpec::variable(3, 3)).unwrap();
        let r = RewardTable::<f64>::random(&t, &mut ChaCha8Rng::seed_from_u64(6), 1.0);
        let q = map_r_to_q(&r);
        let (kl, bound) = kl_bound_check(&r, &q).unwrap();
        assert!(kl.abs() < 1e-12 && bound == 0.0);
        // per-state constants change q but not its policy
        let shifted = LogitTable::new(q.map(|s, _, v| v + s.0 as f64 * 0.1));
        let (kl, bound) = kl_bound_check(&r, &shifted).unwrap();
        assert!(kl.abs() < 1e-12);
        assert!(bound > 0.0);
    }
}
