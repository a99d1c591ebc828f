//! Line-delimited structured trace records. Serialization is canonical
//! (struct field order, no timestamps or paths), so identical runs produce
//! byte-identical traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{DecisionPath, ProtocolVariant};
use crate::sim::scenario::{ByzantineAssignment, NetworkMode};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {0}: {1}")]
    Parse(usize, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub hash: String,
    pub index: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub index: String,
    pub choice: String,
    pub round: u32,
    pub evidence: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalDecision {
    pub value: String,
    pub round: i64,
    pub path: DecisionPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliverKind {
    Block,
    Dls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceRecord {
    Config {
        variant: ProtocolVariant,
        n: u32,
        f: u32,
        mode: NetworkMode,
        delta: u64,
        gst: u64,
        seed: u64,
        horizon: u64,
        block_interval: u64,
        round_unit: u64,
        byzantine: Vec<ByzantineAssignment>,
    },
    Inject {
        tick: u64,
        to: u32,
        tx: String,
        index: String,
    },
    Block {
        tick: u64,
        creator: u32,
        seq: u64,
        hash: String,
        txs: Vec<TxRecord>,
        votes: Vec<VoteRecord>,
        attests: Vec<(String, i64)>,
    },
    Deliver {
        tick: u64,
        to: u32,
        from: u32,
        kind: DeliverKind,
        item: String,
        /// Tick at which this transmission was sent.
        sent: u64,
    },
    Decision {
        tick: u64,
        validator: u32,
        index: String,
        value: String,
        round: i64,
        path: DecisionPath,
        prior_alts: Vec<String>,
        new_alts: Vec<String>,
    },
    Fault {
        tick: u64,
        validator: u32,
        peer: u32,
        kind: String,
    },
    Final {
        validator: u32,
        blocks: usize,
        pending: usize,
        dag_digest: String,
        decisions: BTreeMap<String, FinalDecision>,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(line).map_err(|e| TraceError::Parse(k + 1, e.to_string()))?;
            records.push(r);
        }
        Ok(Trace { records })
    }

    pub fn config(&self) -> Option<&TraceRecord> {
        self.records
            .iter()
            .find(|r| matches!(r, TraceRecord::Config { .. }))
    }

    pub fn decisions(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, TraceRecord::Decision { .. }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let t = Trace {
            records: vec![
                TraceRecord::Inject {
                    tick: 3,
                    to: 1,
                    tx: "aa".into(),
                    index: "i".into(),
                },
                TraceRecord::Decision {
                    tick: 9,
                    validator: 0,
                    index: "i".into(),
                    value: "aa".into(),
                    round: -1,
                    path: DecisionPath::ObservedSet,
                    prior_alts: vec!["aa".into()],
                    new_alts: vec![],
                },
            ],
        };
        let text = t.to_jsonl();
        assert_eq!(Trace::from_jsonl(&text).unwrap(), t);
        assert_eq!(text.lines().count(), 2);
    }
}
