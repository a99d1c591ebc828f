//! Per-conflict-index bookkeeping for the casanova variant: the round
//! schedule anchored at the block where round 0 began, and the bounded
//! alternative set.

use std::collections::BTreeSet;

use crate::quorum::round_start_offset;
use crate::types::{ConflictIndex, TxHash};

/// A machine's view of its current lock: the value whose score reached a
/// fault-tolerant majority in the highest round so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockView {
    pub value: TxHash,
    /// -1 for pre-conflict evidence, else the voting round.
    pub round: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictState {
    index: ConflictIndex,
    /// Own block seq at which round 0 began; set at the first block
    /// produced after the conflict was discovered.
    round0_seq: Option<u64>,
    current_round: u32,
    alternatives: BTreeSet<TxHash>,
}

impl ConflictState {
    pub fn open(index: ConflictIndex, alternatives: BTreeSet<TxHash>) -> Self {
        ConflictState {
            index,
            round0_seq: None,
            current_round: 0,
            alternatives,
        }
    }

    pub fn index(&self) -> &ConflictIndex {
        &self.index
    }

    pub fn round0_seq(&self) -> Option<u64> {
        self.round0_seq
    }

    pub fn current_round(&self) -> u32 {
        self.current_round
    }

    pub fn alternatives(&self) -> &BTreeSet<TxHash> {
        &self.alternatives
    }

    /// Adds an alternative unless the bound is reached; returns false when
    /// the alternative was ignored (caller records the submitter).
    pub fn offer_alternative(&mut self, tx: TxHash, bound: u64) -> bool {
        if self.alternatives.contains(&tx) {
            return true;
        }
        if self.alternatives.len() as u64 >= bound {
            return false;
        }
        self.alternatives.insert(tx);
        true
    }

    pub fn lowest_alternative(&self) -> Option<TxHash> {
        self.alternatives.iter().next().copied()
    }

    /// If the block about to be produced at `seq` starts a voting round,
    /// advances the schedule and returns that round. Round 0 starts at the
    /// first block produced after discovery; round r starts
    /// `unit * r(r+3)/2` blocks after that.
    pub fn round_due(&mut self, seq: u64, unit: u64) -> Option<u32> {
        match self.round0_seq {
            None => {
                self.round0_seq = Some(seq);
                self.current_round = 0;
                Some(0)
            }
            Some(r0) => {
                let offset = seq - r0;
                let next = self.current_round + 1;
                if offset == unit * round_start_offset(next) {
                    self.current_round = next;
                    Some(next)
                } else {
                    None
                }
            }
        }
    }
}
