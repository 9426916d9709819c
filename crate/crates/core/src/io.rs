//! JSON documents for tables, distributions and samples.
//!
//! Log-domain values are written as JSON numbers, with `-inf` written as
//! `null`. Rows and entries follow the canonical state and sequence order of
//! [`crate::seqspace`]; tokens are integers with EOS written as `vocab_size`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dist::{NextTokenPolicy, SeqDistribution};
use crate::ebm::SoftValues;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqspace::{PrefixTree, VocabSpec};
use crate::table::{EdgeTable, LogitTable, RewardTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    Reward,
    Logits,
    SequenceDistribution,
    Policy,
}

/// Serialized form of every table-like object.
///
/// Tables and policies use `rows` (one array per state id); sequence
/// distributions use `logp` (one entry per sequence id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub kind: DocKind,
    pub space: VocabSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<Option<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp: Option<Vec<Option<f64>>>,
}

fn encode<S: Scalar>(v: S) -> Result<Option<f64>> {
    if v == S::neg_infinity() {
        Ok(None)
    } else if v.is_finite() {
        Ok(Some(v.as_f64()))
    } else {
        Err(Error::Format(format!("cannot serialize value {v}")))
    }
}

fn decode<S: Scalar>(v: Option<f64>) -> S {
    v.map_or(S::neg_infinity(), S::lit)
}

fn encode_table<S: Scalar>(table: &EdgeTable<S>) -> Result<Vec<Vec<Option<f64>>>> {
    table
        .rows()
        .map(|row| row.iter().map(|&v| encode(v)).collect())
        .collect()
}

impl Document {
    pub fn from_reward<S: Scalar>(r: &RewardTable<S>) -> Result<Self> {
        Ok(Self {
            kind: DocKind::Reward,
            space: *r.tree().spec(),
            rows: Some(encode_table(r)?),
            logp: None,
        })
    }

    pub fn from_logits<S: Scalar>(q: &LogitTable<S>) -> Result<Self> {
        Ok(Self {
            kind: DocKind::Logits,
            space: *q.tree().spec(),
            rows: Some(encode_table(q)?),
            logp: None,
        })
    }

    pub fn from_policy<S: Scalar>(pi: &NextTokenPolicy<S>) -> Result<Self> {
        Ok(Self {
            kind: DocKind::Policy,
            space: *pi.tree().spec(),
            rows: Some(encode_table(pi.table())?),
            logp: None,
        })
    }

    pub fn from_distribution<S: Scalar>(p: &SeqDistribution<S>) -> Result<Self> {
        Ok(Self {
            kind: DocKind::SequenceDistribution,
            space: *p.tree().spec(),
            rows: None,
            logp: Some(p.logp().iter().map(|&v| encode(v)).collect::<Result<_>>()?),
        })
    }

    fn expect(&self, kind: DocKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind:?} document, got {:?}", self.kind)));
        }
        Ok(())
    }

    fn table<S: Scalar>(&self, budget: usize) -> Result<EdgeTable<S>> {
        let tree = PrefixTree::with_budget(self.space, budget)?;
        let rows = self
            .rows
            .as_ref()
            .ok_or_else(|| Error::Format("missing rows".into()))?
            .iter()
            .map(|row| row.iter().map(|&v| decode(v)).collect())
            .collect();
        EdgeTable::from_rows(&tree, rows)
    }

    pub fn into_reward<S: Scalar>(&self, budget: usize) -> Result<RewardTable<S>> {
        self.expect(DocKind::Reward)?;
        Ok(RewardTable::new(self.table(budget)?))
    }

    pub fn into_logits<S: Scalar>(&self, budget: usize) -> Result<LogitTable<S>> {
        self.expect(DocKind::Logits)?;
        Ok(LogitTable::new(self.table(budget)?))
    }

    pub fn into_policy<S: Scalar>(&self, budget: usize) -> Result<NextTokenPolicy<S>> {
        self.expect(DocKind::Policy)?;
        NextTokenPolicy::new(self.table(budget)?)
    }

    pub fn into_distribution<S: Scalar>(&self, budget: usize) -> Result<SeqDistribution<S>> {
        self.expect(DocKind::SequenceDistribution)?;
        let tree = PrefixTree::with_budget(self.space, budget)?;
        let logp = self
            .logp
            .as_ref()
            .ok_or_else(|| Error::Format("missing logp".into()))?
            .iter()
            .map(|&v| decode(v))
            .collect();
        SeqDistribution::from_logp(&tree, logp)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Writes one JSON array of token ids per line.
pub fn write_samples<W: Write>(mut out: W, samples: &[Vec<usize>]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(input: R) -> Result<Vec<Vec<usize>>> {
    input
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))
        })
        .collect()
}

/// Writes `state,depth,prefix,value` rows, the prefix as space-separated
/// tokens (empty at the root) and `-inf` for dead states.
pub fn write_soft_values_csv<W: Write, S: Scalar>(
    mut out: W,
    tree: &PrefixTree,
    values: &SoftValues<S>,
) -> std::io::Result<()> {
    writeln!(out, "state,depth,prefix,value")?;
    for s in tree.states() {
        let prefix: Vec<String> = tree.prefix_of_state(s).iter().map(|t| t.to_string()).collect();
        let v = values.get(s).as_f64();
        let v = if v == f64::NEG_INFINITY { "-inf".to_string() } else { format!("{v:e}") };
        writeln!(out, "{},{},{},{}", s.0, tree.depth(s), prefix.join(" "), v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqspace::DEFAULT_STATE_BUDGET;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reward_document_shape() {
        let t = PrefixTree::new(VocabSpec::variable(1, 2)).unwrap();
        let doc = Document::from_reward(&RewardTable::<f64>::zeros(&t)).unwrap();
        let json = serde_json::to_string(&doc).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"reward","space":{"vocab_size":1,"max_len":2,"mode":"variable"},"rows":[[0.0,0.0],[null,0.0]]}"#
        );
    }

    #[test]
    fn tables_survive_json() {
        let t = PrefixTree::new(VocabSpec::variable(2, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = RewardTable::<f64>::random_with_forbidden(&t, &mut rng, 1.0, 0.2);
        let text = Document::from_reward(&r).unwrap().to_json_pretty();
        let back: RewardTable<f64> = Document::from_json(&text)
            .unwrap()
            .into_reward(DEFAULT_STATE_BUDGET)
            .unwrap();
        assert_eq!(back, r);
        assert!(Document::from_json(&text)
            .unwrap()
            .into_logits::<f64>(DEFAULT_STATE_BUDGET)
            .is_err());
    }

    #[test]
    fn distributions_survive_json() {
        let t = PrefixTree::new(VocabSpec::fixed(2, 2)).unwrap();
        let p = SeqDistribution::<f64>::uniform(&t);
        let doc = Document::from_distribution(&p).unwrap();
        let back: SeqDistribution<f64> = Document::from_json(&doc.to_json_pretty())
            .unwrap()
            .into_distribution(DEFAULT_STATE_BUDGET)
            .unwrap();
        assert_eq!(back, p);
        let pi = NextTokenPolicy::<f64>::uniform(&t);
        let back: NextTokenPolicy<f64> = Document::from_json(&Document::from_policy(&pi).unwrap().to_json_pretty())
            .unwrap()
            .into_policy(DEFAULT_STATE_BUDGET)
            .unwrap();
        assert_eq!(back, pi);
    }

    #[test]
    fn unknown_fields_and_positive_infinity_rejected() {
        assert!(Document::from_json(r#"{"kind":"reward","space":{"vocab_size":1,"max_len":1,"mode":"fixed"},"rows":[[0.0]],"x":1}"#).is_err());
        let t = PrefixTree::new(VocabSpec::fixed(1, 1)).unwrap();
        let r = RewardTable::<f64>::from_fn(&t, |_, _| f64::INFINITY);
        assert!(Document::from_reward(&r).is_err());
    }

    #[test]
    fn soft_values_csv() {
        let t = PrefixTree::new(VocabSpec::variable(1, 2)).unwrap();
        let values = crate::ebm::log_partition_dp(&RewardTable::<f64>::zeros(&t));
        let mut buf = Vec::new();
        write_soft_values_csv(&mut buf, &t, &values).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("state,depth,prefix,value\n0,0,,{:e}\n1,1,0,0e0\n", 2f64.ln())
        );
    }

    #[test]
    fn samples_jsonl() {
        let mut buf = Vec::new();
        write_samples(&mut buf, &[vec![0, 2], vec![2]]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "[0,2]\n[2]\n");
        assert_eq!(read_samples(&buf[..]).unwrap(), vec![vec![0, 2], vec![2]]);
        let mut empty = Vec::new();
        write_samples(&mut empty, &[]).unwrap();
        assert!(empty.is_empty());
    }
}
