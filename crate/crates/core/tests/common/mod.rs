#![allow(dead_code)]

use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;
use softseq::arm::{enforce_terminal, policy_of};
use softseq::seqspace::Transition;
use softseq::{LogitTable, Mode, NextTokenPolicy, PrefixTree, RandomStream, RewardTable, SeqDistribution, VocabSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    RandomStream::new(seed, 0).rng()
}

pub fn tree(v: usize, t: usize, mode: Mode) -> PrefixTree {
    PrefixTree::new(VocabSpec::new(v, t, mode).unwrap()).unwrap()
}

pub fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::VariableLen), Just(Mode::FixedLen)]
}

/// A small tree with `V, T <= max` in either mode.
pub fn small_tree(max: usize) -> impl Strategy<Value = PrefixTree> {
    (1..=max, 1..=max, mode()).prop_map(|(v, t, m)| tree(v, t, m))
}

pub fn rewards(tree: &PrefixTree, seed: u64) -> RewardTable {
    RewardTable::random(tree, &mut rng(seed), 1.0)
}

pub fn rewards_with_holes(tree: &PrefixTree, seed: u64) -> RewardTable {
    RewardTable::random_with_forbidden(tree, &mut rng(seed), 1.0, 0.25)
}

/// Random logits with dangling entries set to `-inf`.
pub fn logits(tree: &PrefixTree, seed: u64) -> LogitTable {
    let q: LogitTable = LogitTable::random(tree, &mut rng(seed), 1.0);
    LogitTable::new(q.map(|s, a, v| match tree.transition(s, a) {
        Transition::Dangling => f64::NEG_INFINITY,
        _ => v,
    }))
}

pub fn valid_logits(tree: &PrefixTree, seed: u64) -> LogitTable {
    enforce_terminal(&LogitTable::random(tree, &mut rng(seed), 1.5))
}

pub fn policy(tree: &PrefixTree, seed: u64) -> NextTokenPolicy {
    policy_of(&valid_logits(tree, seed)).unwrap()
}

pub fn full_support(tree: &PrefixTree, seed: u64) -> SeqDistribution {
    let mut r = rng(seed);
    let w = (0..tree.sequence_count())
        .map(|_| 2.0 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r))
        .collect();
    SeqDistribution::from_log_weights(tree, w).unwrap()
}

pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Independent oracle: every response by recursive expansion, in canonical
/// order (length first for variable length, lexicographic for fixed length).
pub fn oracle_sequences(spec: VocabSpec) -> Vec<Vec<usize>> {
    let v = spec.vocab_size;
    let t = spec.max_len;
    let mut out = Vec::new();
    match spec.mode {
        Mode::FixedLen => {
            let mut cur = vec![Vec::new()];
            for _ in 0..t {
                cur = cur
                    .into_iter()
                    .flat_map(|p| (0..v).map(move |a| [p.clone(), vec![a]].concat()))
                    .collect();
            }
            out = cur;
        }
        Mode::VariableLen => {
            let mut layer = vec![Vec::new()];
            for _ in 0..t {
                for p in &layer {
                    out.push([p.clone(), vec![v]].concat());
                }
                layer = layer
                    .into_iter()
                    .flat_map(|p| (0..v).map(move |a| [p.clone(), vec![a]].concat()))
                    .collect();
            }
        }
    }
    out
}
