//! Autoregressive models: next-token logits normalized per state.

use crate::dist::{chain_logp, NextTokenPolicy, SeqDistribution};
use crate::ebm::SoftValues;
use crate::error::{Error, Result};
use crate::scalar::{log_softargmax, logsumexp_slice, Scalar};
use crate::seqspace::{Mode, StateId, Transition};
use crate::table::{EdgeTable, LogitTable};

/// Largest deviation of total mass from one that [`arm_dist`] accepts.
pub const VALIDITY_TOL: f64 = 1e-6;

/// Forces EOS at the horizon: rows at depth `T - 1` become `EOS: 0`, every
/// other action `-inf`. No-op in fixed-length mode.
pub fn enforce_terminal<S: Scalar>(q: &LogitTable<S>) -> LogitTable<S> {
    let mut out = q.clone();
    let tree = q.tree().clone();
    let Some(eos) = tree.eos() else {
        return out;
    };
    let last = tree.max_len() - 1;
    for s in tree.states_at_depth(last) {
        for (a, slot) in out.row_mut(StateId(s)).iter_mut().enumerate() {
            *slot = if a == eos { S::zero() } else { S::neg_infinity() };
        }
    }
    out
}

/// Whether every horizon row puts all its mass on EOS.
pub fn is_terminal_valid<S: Scalar>(q: &LogitTable<S>) -> bool {
    let tree = q.tree();
    if tree.mode() == Mode::FixedLen {
        return true;
    }
    let last = tree.max_len() - 1;
    tree.states_at_depth(last).all(|s| {
        q.row(StateId(s)).iter().enumerate().all(|(a, &v)| {
            tree.transition_at(StateId(s), last, a) != Transition::Dangling || v == S::neg_infinity()
        })
    })
}

/// Per-state soft values `V_q(s) = LSE_a q(s, a)`.
pub fn value_table<S: Scalar>(q: &LogitTable<S>) -> SoftValues<S> {
    let values: Vec<S> = q.rows().map(logsumexp_slice).collect();
    SoftValues {
        root: values[0],
        values,
    }
}

fn row_softargmax<S: Scalar>(q: &LogitTable<S>) -> EdgeTable<S> {
    let tree = q.tree();
    let rows = q.rows().map(log_softargmax).collect();
    EdgeTable::from_rows(tree, rows).expect("shape preserved")
}

fn check_degenerate<S: Scalar>(logpi: &EdgeTable<S>) -> Result<()> {
    let tree = logpi.tree();
    let mut reachable = vec![false; tree.state_count()];
    reachable[0] = true;
    for d in 0..tree.max_len() {
        for s in tree.states_at_depth(d) {
            if !reachable[s] {
                continue;
            }
            let sid = StateId(s);
            let row = logpi.row(sid);
            if row.iter().all(|v| *v == S::neg_infinity()) {
                return Err(Error::DegenerateState {
                    prefix: tree.prefix_of_state(sid),
                });
            }
            for (a, &lp) in row.iter().enumerate() {
                if let Transition::Child(c) = tree.transition_at(sid, d, a) {
                    if lp != S::neg_infinity() {
                        reachable[c.0] = true;
                    }
                }
            }
        }
    }
    Ok(())
}

/// `pi_q(. | s) = softargmax(q(s, .))`.
///
/// Reachable all `-inf` rows are a [`Error::DegenerateState`]; horizon rows
/// with mass off EOS are a [`Error::Validity`] error.
pub fn policy_of<S: Scalar>(q: &LogitTable<S>) -> Result<NextTokenPolicy<S>> {
    let logpi = row_softargmax(q);
    check_degenerate(&logpi)?;
    NextTokenPolicy::new(logpi)
}

/// `sum_y p_q(y)` with the chain rule applied to the raw per-row softargmax.
/// Below one when horizon rows leak mass to non-EOS tokens.
pub fn total_mass<S: Scalar>(q: &LogitTable<S>) -> S {
    chain_logp(&row_softargmax(q))
        .into_iter()
        .map(|v| v.exp())
        .sum()
}

/// The sequence distribution of the ARM.
///
/// Fails with [`Error::Validity`] when the total mass misses one by more than
/// [`VALIDITY_TOL`], which happens without terminal enforcement.
pub fn arm_dist<S: Scalar>(q: &LogitTable<S>) -> Result<SeqDistribution<S>> {
    let logpi = row_softargmax(q);
    check_degenerate(&logpi)?;
    let logp = chain_logp(&logpi);
    let mass: S = logp.iter().map(|v| v.exp()).sum();
    if !((mass - S::one()).abs() <= S::lit(VALIDITY_TOL)) {
        return Err(Error::Validity {
            mass: mass.as_f64(),
        });
    }
    SeqDistribution::from_logp(q.tree(), logp)
}

/// Log-partition along the path: `sum_t V_q(s_t)`.
pub fn path_partition<S: Scalar>(q: &LogitTable<S>, tokens: &[usize]) -> Result<S> {
    let path = q.tree().path(tokens)?;
    Ok(path
        .iter()
        .fold(S::zero(), |acc, &(s, _)| acc + logsumexp_slice(q.row(s))))
}

/// `Q_q(y) = sum_t q(s_t, y_t)`.
pub fn path_score<S: Scalar>(q: &LogitTable<S>, tokens: &[usize]) -> Result<S> {
    let path = q.tree().path(tokens)?;
    Ok(path.iter().fold(S::zero(), |acc, &(s, a)| acc + q.get(s, a)))
}

/// Teacher-forcing loss `A_q(y) - Q_q(y) = -log p_q(y)`.
pub fn nll_arm<S: Scalar>(q: &LogitTable<S>, tokens: &[usize]) -> Result<S> {
    let path = q.tree().path(tokens)?;
    Ok(path.iter().fold(S::zero(), |acc, &(s, a)| {
        acc + logsumexp_slice(q.row(s)) - q.get(s, a)
    }))
}

/// Gradient of a path log-partition: the policy rows at the states on the
/// path, zero everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGradient<S: Scalar = f64> {
    pub rows: Vec<(StateId, Vec<S>)>,
}

impl<S: Scalar> PathGradient<S> {
    pub fn get(&self, s: StateId, a: usize) -> S {
        self.rows
            .iter()
            .find(|(st, _)| *st == s)
            .map_or(S::zero(), |(_, row)| row[a])
    }

    /// Dense table with zeros off the path.
    pub fn to_dense(&self, tree: &crate::seqspace::PrefixTree) -> EdgeTable<S> {
        let mut out = EdgeTable::filled(tree, S::zero());
        for (s, row) in &self.rows {
            out.row_mut(*s).copy_from_slice(row);
        }
        out
    }
}

pub fn grad_path_partition<S: Scalar>(q: &LogitTable<S>, tokens: &[usize]) -> Result<PathGradient<S>> {
    let path = q.tree().path(tokens)?;
    let rows = path
        .into_iter()
        .map(|(s, _)| (s, log_softargmax(q.row(s)).into_iter().map(|v| v.exp()).collect()))
        .collect();
    Ok(PathGradient { rows })
}
