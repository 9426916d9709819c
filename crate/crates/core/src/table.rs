//! Per-(state, action) score tables.
//!
//! [`RewardTable`] holds the immediate rewards of an energy-based model and
//! [`LogitTable`] the next-token logits of an autoregressive model. Both are
//! thin wrappers around [`EdgeTable`], a dense row-major table with one row
//! per tree state and one column per action.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{inf_aware_abs_diff, Scalar};
use crate::seqspace::{PrefixTree, SequenceId, StateId, Transition};

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTable<S: Scalar = f64> {
    tree: PrefixTree,
    data: Vec<S>,
}

impl<S: Scalar> EdgeTable<S> {
    pub fn filled(tree: &PrefixTree, value: S) -> Self {
        Self {
            tree: tree.clone(),
            data: vec![value; tree.state_count() * tree.n_actions()],
        }
    }

    pub fn from_fn(tree: &PrefixTree, mut f: impl FnMut(StateId, usize) -> S) -> Self {
        let a = tree.n_actions();
        let mut data = Vec::with_capacity(tree.state_count() * a);
        for s in tree.states() {
            for action in 0..a {
                data.push(f(s, action));
            }
        }
        Self {
            tree: tree.clone(),
            data,
        }
    }

    /// Wraps row-major data of shape `state_count x n_actions`.
    pub fn from_rows(tree: &PrefixTree, rows: Vec<Vec<S>>) -> Result<Self> {
        if rows.len() != tree.state_count() {
            return Err(Error::Shape(format!(
                "expected {} rows, got {}",
                tree.state_count(),
                rows.len()
            )));
        }
        let a = tree.n_actions();
        let mut data = Vec::with_capacity(rows.len() * a);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != a {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {a}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        Ok(Self {
            tree: tree.clone(),
            data,
        })
    }

    #[inline]
    pub fn tree(&self) -> &PrefixTree {
        &self.tree
    }

    #[inline]
    pub fn get(&self, s: StateId, action: usize) -> S {
        self.data[s.0 * self.tree.n_actions() + action]
    }

    #[inline]
    pub fn set(&mut self, s: StateId, action: usize, value: S) {
        let a = self.tree.n_actions();
        self.data[s.0 * a + action] = value;
    }

    #[inline]
    pub fn row(&self, s: StateId) -> &[S] {
        let a = self.tree.n_actions();
        &self.data[s.0 * a..(s.0 + 1) * a]
    }

    #[inline]
    pub fn row_mut(&mut self, s: StateId) -> &mut [S] {
        let a = self.tree.n_actions();
        &mut self.data[s.0 * a..(s.0 + 1) * a]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[S]> {
        self.data.chunks(self.tree.n_actions())
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn map(&self, mut f: impl FnMut(StateId, usize, S) -> S) -> Self {
        Self::from_fn(&self.tree, |s, a| f(s, a, self.get(s, a)))
    }

    /// Sup-norm distance; matching infinities count as zero, mismatched ones
    /// as infinite.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.tree, other.tree, "tables over different trees");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| inf_aware_abs_diff(a, b))
            .fold(S::zero(), S::max)
    }

    pub(crate) fn assert_same_tree(&self, other: &Self) -> Result<()> {
        if self.tree != other.tree {
            return Err(Error::Shape(format!(
                "tables over different spaces: {} vs {}",
                self.tree.spec(),
                other.tree.spec()
            )));
        }
        Ok(())
    }
}

/// Immediate rewards `r(s, a)` of an energy-based model.
///
/// Actions that leave the tree without finishing a response (vocabulary tokens
/// at the horizon in variable-length mode) carry no sequence and are stored as
/// `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable<S: Scalar = f64>(EdgeTable<S>);

impl<S: Scalar> RewardTable<S> {
    pub fn new(mut table: EdgeTable<S>) -> Self {
        mask_dangling(&mut table);
        Self(table)
    }

    pub fn zeros(tree: &PrefixTree) -> Self {
        Self::new(EdgeTable::filled(tree, S::zero()))
    }

    pub fn from_fn(tree: &PrefixTree, f: impl FnMut(StateId, usize) -> S) -> Self {
        Self::new(EdgeTable::from_fn(tree, f))
    }

    /// Gaussian rewards with standard deviation `scale`.
    pub fn random<R: Rng + ?Sized>(tree: &PrefixTree, rng: &mut R, scale: f64) -> Self {
        Self::from_fn(tree, |_, _| S::lit(scale * normal(rng)))
    }

    /// Gaussian rewards where each edge is independently forbidden (`-inf`)
    /// with probability `forbid_prob`. One randomly chosen response keeps its
    /// whole path finite so that the model is never empty.
    pub fn random_with_forbidden<R: Rng + ?Sized>(
        tree: &PrefixTree,
        rng: &mut R,
        scale: f64,
        forbid_prob: f64,
    ) -> Self {
        let mut r = Self::from_fn(tree, |_, _| {
            let x = scale * normal(rng);
            if rng.random::<f64>() < forbid_prob {
                S::neg_infinity()
            } else {
                S::lit(x)
            }
        });
        let keep = SequenceId(rng.random_range(0..tree.sequence_count()));
        for (s, a) in tree.path_of(keep) {
            if r.get(s, a) == S::neg_infinity() {
                r.set(s, a, S::lit(scale * normal(rng)));
            }
        }
        r
    }

    pub fn into_inner(self) -> EdgeTable<S> {
        self.0
    }
}

/// Next-token logits `q(s, a)` of an autoregressive model.
///
/// Entries are stored as given; see [`crate::arm::enforce_terminal`] for the
/// horizon rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable<S: Scalar = f64>(EdgeTable<S>);

impl<S: Scalar> LogitTable<S> {
    pub fn new(table: EdgeTable<S>) -> Self {
        Self(table)
    }

    pub fn zeros(tree: &PrefixTree) -> Self {
        Self(EdgeTable::filled(tree, S::zero()))
    }

    pub fn from_fn(tree: &PrefixTree, f: impl FnMut(StateId, usize) -> S) -> Self {
        Self(EdgeTable::from_fn(tree, f))
    }

    pub fn random<R: Rng + ?Sized>(tree: &PrefixTree, rng: &mut R, scale: f64) -> Self {
        Self::from_fn(tree, |_, _| S::lit(scale * normal(rng)))
    }

    pub fn into_inner(self) -> EdgeTable<S> {
        self.0
    }
}

macro_rules! deref_table {
    ($t:ident) => {
        impl<S: Scalar> Deref for $t<S> {
            type Target = EdgeTable<S>;
            fn deref(&self) -> &EdgeTable<S> {
                &self.0
            }
        }

        impl<S: Scalar> DerefMut for $t<S> {
            fn deref_mut(&mut self) -> &mut EdgeTable<S> {
                &mut self.0
            }
        }
    };
}

deref_table!(RewardTable);
deref_table!(LogitTable);

fn mask_dangling<S: Scalar>(table: &mut EdgeTable<S>) {
    let tree = table.tree().clone();
    if tree.eos().is_none() {
        return;
    }
    let last = tree.max_len() - 1;
    for s in tree.states_at_depth(last) {
        for a in 0..tree.n_actions() {
            if tree.transition_at(StateId(s), last, a) == Transition::Dangling {
                table.set(StateId(s), a, S::neg_infinity());
            }
        }
    }
}

#[inline]
pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqspace::VocabSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reward_tables_mask_dangling_actions() {
        let tree = PrefixTree::new(VocabSpec::variable(2, 2)).unwrap();
        let r = RewardTable::<f64>::zeros(&tree);
        let leaf = tree.state_of_prefix(&[1]).unwrap();
        assert_eq!(r.row(leaf), &[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]);
        assert_eq!(r.row(StateId::ROOT), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn logit_tables_keep_entries() {
        let tree = PrefixTree::new(VocabSpec::variable(2, 2)).unwrap();
        let q = LogitTable::<f64>::zeros(&tree);
        assert!(q.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forbidden_edges_keep_root_feasible() {
        let tree = PrefixTree::new(VocabSpec::variable(1, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let r = RewardTable::<f64>::random_with_forbidden(&tree, &mut rng, 1.0, 0.9);
            assert!(r.row(StateId::ROOT).iter().any(|v| v.is_finite()));
        }
    }

    #[test]
    fn max_abs_diff_infinity_aware() {
        let tree = PrefixTree::new(VocabSpec::variable(1, 2)).unwrap();
        let a = RewardTable::<f64>::zeros(&tree);
        let mut b = a.clone();
        assert_eq!(a.max_abs_diff(&b), 0.0);
        b.set(StateId::ROOT, 0, 0.25);
        assert_eq!(a.max_abs_diff(&b), 0.25);
        b.set(StateId::ROOT, 1, f64::NEG_INFINITY);
        assert_eq!(a.max_abs_diff(&b), f64::INFINITY);
    }

    #[test]
    fn from_rows_validates_shape() {
        let tree = PrefixTree::new(VocabSpec::fixed(2, 2)).unwrap();
        assert!(EdgeTable::<f64>::from_rows(&tree, vec![vec![0.0; 2]; 3]).is_ok());
        assert!(EdgeTable::<f64>::from_rows(&tree, vec![vec![0.0; 2]; 2]).is_err());
        assert!(EdgeTable::<f64>::from_rows(&tree, vec![vec![0.0; 3]; 3]).is_err());
    }
}
