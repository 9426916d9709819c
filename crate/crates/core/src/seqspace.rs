//! Token alphabet, finite response space and the prefix-tree state index.
//!
//! States are the EOS-free prefixes of length `0..max_len`, numbered
//! breadth-first with ascending token order. Within one depth the states are
//! therefore in lexicographic order, which makes the numbering arithmetic:
//! the state for prefix `p` at depth `d` is `offset(d) + base_V(p)`.
//!
//! Canonical sequence order is length-then-lexicographic in variable-length
//! mode and lexicographic in fixed-length mode. In variable-length mode every
//! response `p ⊕ EOS` is identified with the state of `p`, so sequence ids and
//! state ids coincide. In fixed-length mode the sequence `p ⊕ y` has id
//! `base_V(p) * V + y`.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of states (and sequences) held in memory.
pub const DEFAULT_STATE_BUDGET: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Responses end with EOS and have length `1..=max_len` including it.
    #[serde(rename = "variable")]
    VariableLen,
    /// Responses are exactly `max_len` vocabulary tokens, no EOS.
    #[serde(rename = "fixed")]
    FixedLen,
}

/// Vocabulary size, maximal response length and length mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub vocab_size: usize,
    pub max_len: usize,
    pub mode: Mode,
}

impl VocabSpec {
    pub fn new(vocab_size: usize, max_len: usize, mode: Mode) -> Result<Self> {
        let spec = Self {
            vocab_size,
            max_len,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn variable(vocab_size: usize, max_len: usize) -> Self {
        Self::new(vocab_size, max_len, Mode::VariableLen).expect("valid variable-length spec")
    }

    pub fn fixed(vocab_size: usize, max_len: usize) -> Self {
        Self::new(vocab_size, max_len, Mode::FixedLen).expect("valid fixed-length spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::InvalidSpec("vocab_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidSpec("max_len must be at least 1".into()));
        }
        Ok(())
    }

    /// The EOS token id, `vocab_size`, in variable-length mode.
    pub fn eos(&self) -> Option<usize> {
        match self.mode {
            Mode::VariableLen => Some(self.vocab_size),
            Mode::FixedLen => None,
        }
    }

    /// Size of the action set: vocabulary plus EOS when present.
    pub fn n_actions(&self) -> usize {
        match self.mode {
            Mode::VariableLen => self.vocab_size + 1,
            Mode::FixedLen => self.vocab_size,
        }
    }

    /// `sum_{d < T} V^d`, or `None` on overflow.
    pub fn state_count(&self) -> Option<u128> {
        let v = self.vocab_size as u128;
        let mut total: u128 = 0;
        let mut level: u128 = 1;
        for _ in 0..self.max_len {
            total = total.checked_add(level)?;
            level = level.checked_mul(v)?;
        }
        Some(total)
    }

    /// `|Y|` in closed form.
    pub fn sequence_count(&self) -> Option<u128> {
        match self.mode {
            Mode::VariableLen => self.state_count(),
            Mode::FixedLen => (self.vocab_size as u128).checked_pow(self.max_len as u32),
        }
    }
}

impl fmt::Display for VocabSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::VariableLen => "variable",
            Mode::FixedLen => "fixed",
        };
        write!(f, "V={} T={} {}", self.vocab_size, self.max_len, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub usize);

impl StateId {
    pub const ROOT: StateId = StateId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SequenceId(pub usize);

impl SequenceId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where an action leads from a given state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    /// Appending the token yields another tree state.
    Child(StateId),
    /// The action finishes a response.
    Terminal(SequenceId),
    /// A vocabulary token at the horizon in variable-length mode: no response
    /// continues through it.
    Dangling,
}

/// The response prefix tree of a single prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixTree {
    spec: VocabSpec,
    /// `offsets[d]` is the first state id at depth `d`; `offsets[T]` is the
    /// state count.
    offsets: Vec<usize>,
    sequence_count: usize,
}

impl PrefixTree {
    /// Builds the tree under the default state budget.
    pub fn new(spec: VocabSpec) -> Result<Self> {
        Self::with_budget(spec, DEFAULT_STATE_BUDGET)
    }

    pub fn with_budget(spec: VocabSpec, budget: usize) -> Result<Self> {
        spec.validate()?;
        let over = |required: Option<u128>| Error::Capacity {
            required: required.unwrap_or(u128::MAX),
            budget: budget as u128,
        };
        let states = spec.state_count();
        let seqs = spec.sequence_count();
        match (states, seqs) {
            (Some(s), Some(q)) if s <= budget as u128 && q <= budget as u128 => {}
            (Some(s), Some(q)) => return Err(over(Some(s.max(q)))),
            _ => return Err(over(None)),
        }
        let mut offsets = Vec::with_capacity(spec.max_len + 1);
        let mut level = 1usize;
        let mut acc = 0usize;
        for _ in 0..spec.max_len {
            offsets.push(acc);
            acc += level;
            level = level.saturating_mul(spec.vocab_size);
        }
        offsets.push(acc);
        Ok(Self {
            spec,
            offsets,
            sequence_count: seqs.unwrap() as usize,
        })
    }

    #[inline]
    pub fn spec(&self) -> &VocabSpec {
        &self.spec
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    #[inline]
    pub fn max_len(&self) -> usize {
        self.spec.max_len
    }

    #[inline]
    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.spec.n_actions()
    }

    #[inline]
    pub fn eos(&self) -> Option<usize> {
        self.spec.eos()
    }

    #[inline]
    pub fn state_count(&self) -> usize {
        self.offsets[self.spec.max_len]
    }

    #[inline]
    pub fn sequence_count(&self) -> usize {
        self.sequence_count
    }

    /// State ids at depth `d`, in lexicographic prefix order.
    #[inline]
    pub fn states_at_depth(&self, depth: usize) -> Range<usize> {
        self.offsets[depth]..self.offsets[depth + 1]
    }

    pub fn depth(&self, s: StateId) -> usize {
        debug_assert!(s.0 < self.state_count());
        self.offsets.partition_point(|&o| o <= s.0) - 1
    }

    /// Iterates over state ids.
    pub fn states(&self) -> impl DoubleEndedIterator<Item = StateId> + ExactSizeIterator {
        (0..self.state_count()).map(StateId)
    }

    pub fn transition(&self, s: StateId, action: usize) -> Transition {
        debug_assert!(action < self.n_actions());
        let depth = self.depth(s);
        self.transition_at(s, depth, action)
    }

    /// Like [`transition`](Self::transition) with the state depth supplied.
    #[inline]
    pub fn transition_at(&self, s: StateId, depth: usize, action: usize) -> Transition {
        let v = self.spec.vocab_size;
        let local = s.0 - self.offsets[depth];
        let last = depth + 1 == self.spec.max_len;
        match self.spec.mode {
            Mode::VariableLen => {
                if action == v {
                    Transition::Terminal(SequenceId(s.0))
                } else if last {
                    Transition::Dangling
                } else {
                    Transition::Child(StateId(self.offsets[depth + 1] + local * v + action))
                }
            }
            Mode::FixedLen => {
                if last {
                    Transition::Terminal(SequenceId(local * v + action))
                } else {
                    Transition::Child(StateId(self.offsets[depth + 1] + local * v + action))
                }
            }
        }
    }

    pub fn child(&self, s: StateId, token: usize) -> Option<StateId> {
        match self.transition(s, token) {
            Transition::Child(c) => Some(c),
            _ => None,
        }
    }

    /// The parent state and the token leading to `s`; `None` for the root.
    pub fn parent(&self, s: StateId) -> Option<(StateId, usize)> {
        let depth = self.depth(s);
        if depth == 0 {
            return None;
        }
        let v = self.spec.vocab_size;
        let local = s.0 - self.offsets[depth];
        Some((StateId(self.offsets[depth - 1] + local / v), local % v))
    }

    pub fn prefix_of_state(&self, s: StateId) -> Vec<usize> {
        let depth = self.depth(s);
        let local = s.0 - self.offsets[depth];
        decode(local, depth, self.spec.vocab_size)
    }

    pub fn state_of_prefix(&self, prefix: &[usize]) -> Result<StateId> {
        let v = self.spec.vocab_size;
        if prefix.len() >= self.spec.max_len || prefix.iter().any(|&t| t >= v) {
            return Err(Error::UnknownPrefix(prefix.to_vec()));
        }
        let local = prefix.iter().fold(0usize, |acc, &t| acc * v + t);
        Ok(StateId(self.offsets[prefix.len()] + local))
    }

    /// The edge `(state, action)` whose action completes the sequence.
    pub fn terminal_edge(&self, y: SequenceId) -> (StateId, usize) {
        match self.spec.mode {
            Mode::VariableLen => (StateId(y.0), self.spec.vocab_size),
            Mode::FixedLen => {
                let v = self.spec.vocab_size;
                (
                    StateId(self.offsets[self.spec.max_len - 1] + y.0 / v),
                    y.0 % v,
                )
            }
        }
    }

    /// Token list of a sequence, EOS written as `vocab_size`.
    pub fn sequence(&self, y: SequenceId) -> Vec<usize> {
        let (s, a) = self.terminal_edge(y);
        let mut tokens = self.prefix_of_state(s);
        tokens.push(a);
        tokens
    }

    pub fn sequence_id(&self, tokens: &[usize]) -> Result<SequenceId> {
        let malformed = || Error::MalformedSequence(tokens.to_vec());
        let (last, prefix) = tokens.split_last().ok_or_else(malformed)?;
        let s = self.state_of_prefix(prefix).map_err(|_| malformed())?;
        match self.spec.mode {
            Mode::VariableLen if *last == self.spec.vocab_size => Ok(SequenceId(s.0)),
            Mode::FixedLen if prefix.len() + 1 == self.spec.max_len && *last < self.spec.vocab_size => {
                match self.transition(s, *last) {
                    Transition::Terminal(id) => Ok(id),
                    _ => Err(malformed()),
                }
            }
            _ => Err(malformed()),
        }
    }

    /// The `(state, action)` pairs visited by a sequence.
    pub fn path(&self, tokens: &[usize]) -> Result<Vec<(StateId, usize)>> {
        let id = self.sequence_id(tokens)?;
        Ok(self.path_of(id))
    }

    pub fn path_of(&self, y: SequenceId) -> Vec<(StateId, usize)> {
        let (mut s, a) = self.terminal_edge(y);
        let mut path = vec![(s, a)];
        while let Some((p, t)) = self.parent(s) {
            path.push((p, t));
            s = p;
        }
        path.reverse();
        path
    }

    pub fn sequence_ids(&self) -> impl DoubleEndedIterator<Item = SequenceId> + ExactSizeIterator {
        (0..self.sequence_count).map(SequenceId)
    }

    /// All responses in canonical order.
    pub fn sequences(&self) -> Vec<Vec<usize>> {
        self.sequence_ids().map(|y| self.sequence(y)).collect()
    }
}

fn decode(mut local: usize, len: usize, v: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = local % v;
        local /= v;
    }
    out
}

/// Enumerates `Y` in canonical order under the default budget.
pub fn enumerate_sequences(spec: VocabSpec) -> Result<Vec<Vec<usize>>> {
    Ok(PrefixTree::new(spec)?.sequences())
}
