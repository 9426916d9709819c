//! Sequence-level and next-token distributions.
//!
//! A [`SeqDistribution`] stores `log p(y)` for every response in canonical
//! order; a [`NextTokenPolicy`] stores `log pi(a | s)` for every tree state.
//! The chain rule maps one onto the other: [`policy_to_seq`] multiplies
//! conditionals along each path, [`seq_to_policy`] marginalizes prefixes
//! bottom-up and conditions. Everything is kept in log domain.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::scalar::{kl_term, logsumexp_slice, Scalar};
use crate::seqspace::{PrefixTree, SequenceId, StateId, Transition};
use crate::table::EdgeTable;

/// Normalization tolerance for `f64` tables.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Samples drawn per independent random block.
pub const SAMPLE_BLOCK: usize = 4096;

pub(crate) fn norm_tol<S: Scalar>() -> S {
    S::lit(NORMALIZATION_TOL).max(S::epsilon() * S::lit(1e4))
}

/// Log-probabilities over the response space.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqDistribution<S: Scalar = f64> {
    tree: PrefixTree,
    logp: Vec<S>,
}

impl<S: Scalar> SeqDistribution<S> {
    /// Wraps a normalized log-probability table indexed by sequence id.
    pub fn from_logp(tree: &PrefixTree, logp: Vec<S>) -> Result<Self> {
        if logp.len() != tree.sequence_count() {
            return Err(Error::Shape(format!(
                "expected {} sequence entries, got {}",
                tree.sequence_count(),
                logp.len()
            )));
        }
        if logp.iter().any(|v| v.is_nan() || *v == S::infinity()) {
            return Err(Error::Shape("log-probabilities must be finite or -inf".into()));
        }
        let total = logsumexp_slice(&logp);
        if !(total.abs() <= norm_tol()) {
            return Err(Error::Validity {
                mass: total.exp().as_f64(),
            });
        }
        Ok(Self {
            tree: tree.clone(),
            logp,
        })
    }

    /// Normalizes arbitrary log-weights (softargmax over sequences).
    pub fn from_log_weights(tree: &PrefixTree, weights: Vec<S>) -> Result<Self> {
        let lse = logsumexp_slice(&weights);
        if !lse.is_finite() {
            return Err(Error::Validity { mass: 0.0 });
        }
        let logp = weights.into_iter().map(|w| w - lse).collect();
        Self::from_logp(tree, logp)
    }

    pub fn uniform(tree: &PrefixTree) -> Self {
        let n = tree.sequence_count();
        let lp = -S::lit(n as f64).ln();
        Self {
            tree: tree.clone(),
            logp: vec![lp; n],
        }
    }

    pub(crate) fn from_parts_unchecked(tree: &PrefixTree, logp: Vec<S>) -> Self {
        Self {
            tree: tree.clone(),
            logp,
        }
    }

    #[inline]
    pub fn tree(&self) -> &PrefixTree {
        &self.tree
    }

    #[inline]
    pub fn logp(&self) -> &[S] {
        &self.logp
    }

    #[inline]
    pub fn logp_of(&self, y: SequenceId) -> S {
        self.logp[y.0]
    }

    pub fn logp_of_tokens(&self, tokens: &[usize]) -> Result<S> {
        Ok(self.logp[self.tree.sequence_id(tokens)?.0])
    }

    pub fn probs(&self) -> Vec<S> {
        self.logp.iter().map(|v| v.exp()).collect()
    }

    /// `log sum_y p(y)`, zero for a normalized table.
    pub fn log_total_mass(&self) -> S {
        logsumexp_slice(&self.logp)
    }

    /// Largest per-sequence absolute difference in probability space.
    pub fn max_prob_diff(&self, other: &Self) -> S {
        self.logp
            .iter()
            .zip(&other.logp)
            .map(|(a, b)| (a.exp() - b.exp()).abs())
            .fold(S::zero(), S::max)
    }
}

/// Next-token log-probabilities `log pi(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenPolicy<S: Scalar = f64> {
    logpi: EdgeTable<S>,
}

impl<S: Scalar> NextTokenPolicy<S> {
    /// Validates a table of log-probabilities.
    ///
    /// Every reachable state must be normalized and must not put mass on
    /// actions that leave the tree. States that cannot be reached may be left
    /// all `-inf`.
    pub fn new(logpi: EdgeTable<S>) -> Result<Self> {
        let policy = Self { logpi };
        policy.validate()?;
        Ok(policy)
    }

    pub(crate) fn from_table_unchecked(logpi: EdgeTable<S>) -> Self {
        Self { logpi }
    }

    pub fn uniform(tree: &PrefixTree) -> Self {
        let eos = tree.eos();
        let last = tree.max_len() - 1;
        let logpi = EdgeTable::from_fn(tree, |s, a| {
            let n = tree.n_actions();
            match (eos, tree.depth(s) == last) {
                (Some(e), true) => {
                    if a == e {
                        S::zero()
                    } else {
                        S::neg_infinity()
                    }
                }
                _ => -S::lit(n as f64).ln(),
            }
        });
        Self { logpi }
    }

    fn validate(&self) -> Result<()> {
        let tree = self.logpi.tree();
        let reach = log_reach(self);
        let tol = norm_tol::<S>();
        for s in tree.states() {
            let row = self.logpi.row(s);
            if row.iter().any(|v| v.is_nan() || *v == S::infinity()) {
                return Err(Error::Shape(format!("non-finite log-probability at state {}", s.0)));
            }
            let total = logsumexp_slice(row);
            if total == S::neg_infinity() && reach[s.0] == S::neg_infinity() {
                continue;
            }
            if !(total.abs() <= tol) {
                return Err(Error::Validity {
                    mass: total.exp().as_f64(),
                });
            }
            let depth = tree.depth(s);
            for (a, &lp) in row.iter().enumerate() {
                if lp != S::neg_infinity() && tree.transition_at(s, depth, a) == Transition::Dangling {
                    return Err(Error::Validity {
                        mass: (S::one() - lp.exp()).as_f64(),
                    });
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn tree(&self) -> &PrefixTree {
        self.logpi.tree()
    }

    #[inline]
    pub fn table(&self) -> &EdgeTable<S> {
        &self.logpi
    }

    #[inline]
    pub fn logpi(&self, s: StateId, a: usize) -> S {
        self.logpi.get(s, a)
    }

    #[inline]
    pub fn row(&self, s: StateId) -> &[S] {
        self.logpi.row(s)
    }

    /// Sup-norm distance between two policies, restricted to the states this
    /// policy reaches with positive probability.
    pub fn max_abs_diff_on_reachable(&self, other: &Self) -> S {
        let reach = log_reach(self);
        let mut worst = S::zero();
        for s in self.tree().states() {
            if reach[s.0] == S::neg_infinity() {
                continue;
            }
            for (a, b) in self.row(s).iter().zip(other.row(s)) {
                worst = worst.max(crate::scalar::inf_aware_abs_diff(*a, *b));
            }
        }
        worst
    }
}

/// `log P(reach s)` under the policy, computed top-down.
pub fn log_reach<S: Scalar>(pi: &NextTokenPolicy<S>) -> Vec<S> {
    let tree = pi.tree();
    let mut reach = vec![S::neg_infinity(); tree.state_count()];
    reach[0] = S::zero();
    for d in 0..tree.max_len() {
        for s in tree.states_at_depth(d) {
            let base = reach[s];
            for a in 0..tree.n_actions() {
                if let Transition::Child(c) = tree.transition_at(StateId(s), d, a) {
                    reach[c.0] = base + pi.logpi(StateId(s), a);
                }
            }
        }
    }
    reach
}

/// Builds the next-token conditionals of `p` by backward prefix marginalization.
///
/// Fails with [`Error::ZeroMassPrefix`] when some prefix has zero marginal
/// mass, since its conditionals are undefined.
pub fn seq_to_policy<S: Scalar>(p: &SeqDistribution<S>) -> Result<NextTokenPolicy<S>> {
    let tree = p.tree();
    let n_act = tree.n_actions();
    let mut mass = vec![S::neg_infinity(); tree.state_count()];
    let mut edge = EdgeTable::filled(tree, S::neg_infinity());
    for d in (0..tree.max_len()).rev() {
        for s in tree.states_at_depth(d) {
            let sid = StateId(s);
            let row = edge.row_mut(sid);
            for (a, slot) in row.iter_mut().enumerate().take(n_act) {
                *slot = match tree.transition_at(sid, d, a) {
                    Transition::Child(c) => mass[c.0],
                    Transition::Terminal(y) => p.logp_of(y),
                    Transition::Dangling => S::neg_infinity(),
                };
            }
            mass[s] = logsumexp_slice(row);
        }
    }
    if let Some(s) = mass.iter().position(|m| *m == S::neg_infinity()) {
        return Err(Error::ZeroMassPrefix {
            prefix: tree.prefix_of_state(StateId(s)),
        });
    }
    let logpi = edge.map(|s, _, e| {
        if e == S::neg_infinity() {
            e
        } else {
            e - mass[s.0]
        }
    });
    Ok(NextTokenPolicy::from_table_unchecked(logpi))
}

/// `log p(y) = sum_t log pi(y_t | y_<t)`.
pub fn policy_to_seq<S: Scalar>(pi: &NextTokenPolicy<S>) -> SeqDistribution<S> {
    SeqDistribution::from_parts_unchecked(pi.tree(), chain_logp(pi.table()))
}

/// Chain-rule products of a table of per-state log-conditionals; the table
/// need not be normalized.
pub(crate) fn chain_logp<S: Scalar>(logpi: &EdgeTable<S>) -> Vec<S> {
    let tree = logpi.tree();
    let mut reach = vec![S::neg_infinity(); tree.state_count()];
    let mut logp = vec![S::neg_infinity(); tree.sequence_count()];
    reach[0] = S::zero();
    for d in 0..tree.max_len() {
        for s in tree.states_at_depth(d) {
            let sid = StateId(s);
            let base = reach[s];
            for (a, &lp) in logpi.row(sid).iter().enumerate() {
                match tree.transition_at(sid, d, a) {
                    Transition::Child(c) => reach[c.0] = base + lp,
                    Transition::Terminal(y) => logp[y.0] = base + lp,
                    Transition::Dangling => {}
                }
            }
        }
    }
    logp
}

fn draw_action<S: Scalar, R: Rng + ?Sized>(row: &[S], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (a, lp) in row.iter().enumerate() {
        let p = lp.exp().as_f64();
        if p > 0.0 {
            cum += p;
            last_positive = a;
            if u < cum {
                return a;
            }
        }
    }
    last_positive
}

/// Draws one response, calling `visit` on every `(state, action)` taken.
fn sample_path<S: Scalar, R: Rng + ?Sized>(
    pi: &NextTokenPolicy<S>,
    rng: &mut R,
    mut visit: impl FnMut(StateId, usize),
) -> SequenceId {
    let tree = pi.tree();
    let mut s = StateId::ROOT;
    let mut depth = 0;
    loop {
        let a = draw_action(pi.row(s), rng);
        visit(s, a);
        match tree.transition_at(s, depth, a) {
            Transition::Child(c) => {
                s = c;
                depth += 1;
            }
            Transition::Terminal(y) => return y,
            Transition::Dangling => unreachable!("validated policies put no mass on dangling actions"),
        }
    }
}

/// Runs `per_sample` for `n` draws in fixed-size blocks, in parallel, and
/// returns the results in draw order. Output is independent of thread count.
fn blocked<T: Send>(
    n: usize,
    stream: RandomStream,
    per_sample: impl Fn(&mut rand_chacha::ChaCha8Rng) -> T + Sync,
) -> Vec<T> {
    let blocks = n.div_ceil(SAMPLE_BLOCK);
    let chunks: Vec<Vec<T>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream.block_rng(b as u64);
            let len = SAMPLE_BLOCK.min(n - b * SAMPLE_BLOCK);
            (0..len).map(|_| per_sample(&mut rng)).collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// `n` i.i.d. ancestral samples as token lists.
pub fn sample<S: Scalar>(pi: &NextTokenPolicy<S>, stream: RandomStream, n: usize) -> Vec<Vec<usize>> {
    sample_ids(pi, stream, n)
        .into_iter()
        .map(|y| pi.tree().sequence(y))
        .collect()
}

/// Like [`sample`] but returns sequence ids.
pub fn sample_ids<S: Scalar>(pi: &NextTokenPolicy<S>, stream: RandomStream, n: usize) -> Vec<SequenceId> {
    blocked(n, stream, |rng| sample_path(pi, rng, |_, _| {}))
}

/// `H(p) = -sum_y p(y) log p(y)` in nats.
pub fn entropy_exact<S: Scalar>(p: &SeqDistribution<S>) -> S {
    -p.logp()
        .iter()
        .filter(|v| **v != S::neg_infinity())
        .map(|&v| v.exp() * v)
        .sum::<S>()
}

/// Entropy of one next-token row.
pub fn row_entropy<S: Scalar>(row: &[S]) -> S {
    -row.iter()
        .filter(|v| **v != S::neg_infinity())
        .map(|&v| v.exp() * v)
        .sum::<S>()
}

/// Sequence entropy through the chain rule: the per-state next-token
/// entropies weighted by the probability of reaching each state.
pub fn entropy_chain<S: Scalar>(pi: &NextTokenPolicy<S>) -> S {
    let reach = log_reach(pi);
    pi.tree()
        .states()
        .filter(|s| reach[s.0] != S::neg_infinity())
        .map(|s| reach[s.0].exp() * row_entropy(pi.row(s)))
        .sum()
}

/// `KL(p || p0)` by direct summation over responses.
pub fn kl_exact<S: Scalar>(p: &SeqDistribution<S>, p0: &SeqDistribution<S>) -> Result<S> {
    if p.tree() != p0.tree() {
        return Err(Error::Shape("distributions over different spaces".into()));
    }
    let mut total = S::zero();
    for (i, (&a, &b)) in p.logp().iter().zip(p0.logp()).enumerate() {
        total = total
            + kl_term(a, b).ok_or_else(|| {
                Error::SupportViolation(format!(
                    "sequence {:?} has mass under p but not under p0",
                    p.tree().sequence(SequenceId(i))
                ))
            })?;
    }
    Ok(total)
}

/// KL between two next-token rows, `None` when absolute continuity fails.
pub fn row_kl<S: Scalar>(row: &[S], row0: &[S]) -> Option<S> {
    let mut total = S::zero();
    for (&a, &b) in row.iter().zip(row0) {
        total = total + kl_term(a, b)?;
    }
    Some(total)
}

fn state_kls<S: Scalar>(pi: &NextTokenPolicy<S>, pi0: &NextTokenPolicy<S>) -> Result<Vec<Option<S>>> {
    if pi.tree() != pi0.tree() {
        return Err(Error::Shape("policies over different spaces".into()));
    }
    Ok(pi
        .tree()
        .states()
        .map(|s| row_kl(pi.row(s), pi0.row(s)))
        .collect())
}

/// `KL(p_pi || p_pi0)` as the reach-weighted sum of per-state KLs.
pub fn kl_chain<S: Scalar>(pi: &NextTokenPolicy<S>, pi0: &NextTokenPolicy<S>) -> Result<S> {
    let kls = state_kls(pi, pi0)?;
    let reach = log_reach(pi);
    let mut total = S::zero();
    for s in pi.tree().states() {
        if reach[s.0] == S::neg_infinity() {
            continue;
        }
        let k = kls[s.0].ok_or_else(|| support_at(pi.tree(), s))?;
        total = total + reach[s.0].exp() * k;
    }
    Ok(total)
}

fn support_at(tree: &PrefixTree, s: StateId) -> Error {
    Error::SupportViolation(format!(
        "next-token distribution at prefix {:?} is not absolutely continuous",
        tree.prefix_of_state(s)
    ))
}

/// Monte-Carlo estimate of `KL(p_pi || p_pi0)` with standard error.
///
/// Prefixes are drawn from `pi`; each draw contributes the exact per-state KL
/// of every state it visits, so only the path is random.
pub fn kl_mc<S: Scalar>(
    pi: &NextTokenPolicy<S>,
    pi0: &NextTokenPolicy<S>,
    stream: RandomStream,
    n: usize,
) -> Result<(S, S)> {
    let kls = state_kls(pi, pi0)?;
    let draws = blocked(n, stream, |rng| {
        let mut acc = Some(S::zero());
        let mut bad = None;
        sample_path(pi, rng, |s, _| match (acc, kls[s.0]) {
            (Some(a), Some(k)) => acc = Some(a + k),
            _ => {
                acc = None;
                bad.get_or_insert(s);
            }
        });
        acc.ok_or_else(|| bad.expect("violating state recorded"))
    });
    let values = draws
        .into_iter()
        .map(|d| d.map_err(|s| support_at(pi.tree(), s)))
        .collect::<Result<Vec<S>>>()?;
    Ok(mean_and_stderr(&values))
}

/// Mean and standard error, shifted by the first value so that identical
/// draws give their common value exactly and zero error.
pub(crate) fn mean_and_stderr<S: Scalar>(values: &[S]) -> (S, S) {
    if values.is_empty() {
        return (S::zero(), S::zero());
    }
    let n = S::lit(values.len() as f64);
    let shift = values[0];
    let mut sum = S::zero();
    let mut sum_sq = S::zero();
    for &v in values {
        let d = v - shift;
        sum = sum + d;
        sum_sq = sum_sq + d * d;
    }
    let mean_d = sum / n;
    if values.len() < 2 {
        return (shift + mean_d, S::zero());
    }
    let var = ((sum_sq - n * mean_d * mean_d) / (n - S::one())).max(S::zero());
    (shift + mean_d, (var / n).sqrt())
}
