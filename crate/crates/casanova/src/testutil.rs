//! Shared helpers for unit tests: terse block and transaction builders.

use std::collections::BTreeSet;

use crate::types::{Block, BlockHash, ConflictIndex, Transaction, TxHash, ValidatorId, Vote};

pub fn tx(payload: &str, index: &str) -> Transaction {
    Transaction::new(payload.as_bytes().to_vec(), index.into(), BTreeSet::new())
}

pub fn tx_with_parents(payload: &str, index: &str, parents: &[TxHash]) -> Transaction {
    Transaction::new(
        payload.as_bytes().to_vec(),
        index.into(),
        parents.iter().copied().collect(),
    )
}

pub fn block(creator: u32, seq: u64, parents: &[BlockHash], txs: Vec<Transaction>) -> Block {
    Block::new(
        ValidatorId(creator),
        seq,
        parents.iter().copied().collect(),
        txs,
        vec![],
        vec![],
    )
}

pub fn block_voting(
    creator: u32,
    seq: u64,
    parents: &[BlockHash],
    txs: Vec<Transaction>,
    votes: Vec<Vote>,
) -> Block {
    Block::new(
        ValidatorId(creator),
        seq,
        parents.iter().copied().collect(),
        txs,
        votes,
        vec![],
    )
}

pub fn vote(index: &str, choice: TxHash, round: u32) -> Vote {
    Vote::new(ConflictIndex::from(index), choice, round, None)
}
