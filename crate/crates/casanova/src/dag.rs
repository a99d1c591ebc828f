//! Append-only block DAG with pending-block buffering and the incremental
//! indexes the scoring engine relies on.
//!
//! Blocks are inserted only once all parents are present, so ancestry data can
//! be built incrementally and never changes afterwards. Out-of-order arrivals
//! sit in a pending buffer until their parents land; draining happens in
//! topological order. Delivering the blocks of an execution in any order
//! yields the same final state.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use fixedbitset::FixedBitSet;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{Block, BlockHash, ConflictIndex, Transaction, TxHash, ValidatorId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DagError {
    #[error("unknown block {0:?}")]
    UnknownBlock(BlockHash),
    #[error("unknown transaction {0:?}")]
    UnknownTransaction(TxHash),
    #[error("validator {0} has equivocated; its view is undefined")]
    EquivocatorQueried(ValidatorId),
}

/// Why a block was rejected outright (buffering is not rejection).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    /// Non-genesis block without parents.
    NoParents,
    /// Block lists itself as a parent.
    SelfParent,
    /// Creator id outside `[0, N)` (or a non-genesis block claiming the
    /// genesis creator).
    BadCreator,
    /// Block `seq > 0` whose ancestry does not contain the creator's
    /// previous block: the creator's own chain is broken.
    BrokenChain,
}

#[derive(Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    /// Block stored; `satisfied` lists previously pending blocks drained by
    /// this insertion, in insertion order. `rejected` lists drained blocks
    /// that failed link validation and were discarded.
    Inserted {
        satisfied: Vec<BlockHash>,
        rejected: Vec<(BlockHash, InvalidReason)>,
    },
    /// Parents missing; buffered until they arrive.
    Buffered,
    /// Already known (stored or buffered). Idempotent no-op.
    Duplicate,
    Invalid(InvalidReason),
}

impl InsertOutcome {
    pub fn is_inserted(&self) -> bool {
        matches!(self, InsertOutcome::Inserted { .. })
    }
}

/// Result of the equivocator sweep: who still counts, and the reduced
/// parameters after provably faulty validators are removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub active: Vec<ValidatorId>,
    pub excluded: Vec<ValidatorId>,
    pub n_effective: u32,
    pub f_effective: u32,
    /// More equivocators than the fault budget allows; results are reported
    /// but the scenario is outside protocol guarantees.
    pub exceeded: bool,
    pub mask: u64,
}

/// Earliest vote record per voter for one `(index, round, choice)` key,
/// as `(seq, block hash)` of the carrying block.
pub(crate) type VoteRecord = BTreeMap<u32, (u64, BlockHash)>;

#[derive(Clone)]
pub struct Dag {
    n: u32,
    genesis: BlockHash,
    index_of: BTreeMap<BlockHash, usize>,
    blocks: Vec<Block>,
    /// Self-inclusive ancestor set per stored block, by dense index.
    ancestors: Vec<FixedBitSet>,
    /// Creators of self-or-descendants per stored block (genesis counts as
    /// created by everyone).
    score: Vec<u64>,
    leaves: BTreeSet<BlockHash>,
    /// Per validator: own blocks with no own-created descendant.
    tips: Vec<BTreeSet<BlockHash>>,
    pending: BTreeMap<BlockHash, Block>,
    /// missing parent hash -> pending blocks waiting on it
    waiting_on: BTreeMap<BlockHash, BTreeSet<BlockHash>>,
    /// (creator, seq) -> dense indexes (several only under equivocation)
    chain: BTreeMap<(u32, u64), Vec<usize>>,

    tx_content: BTreeMap<TxHash, Transaction>,
    containers: BTreeMap<TxHash, Vec<usize>>,
    alts_by_index: BTreeMap<ConflictIndex, BTreeSet<TxHash>>,
    votes: BTreeMap<(ConflictIndex, u32, TxHash), VoteRecord>,
    vote_rounds: BTreeMap<ConflictIndex, BTreeSet<u32>>,
    vote_choices: BTreeMap<(ConflictIndex, u32), BTreeSet<TxHash>>,

    /// (index, validator) -> earliest block in which the validator marked the
    /// conflict (voted or attested it), as (seq, hash). Minimal by that pair
    /// so the value is delivery-order independent even under equivocation.
    marker: BTreeMap<(ConflictIndex, u32), (u64, BlockHash)>,
    /// (index, alternative, validator) -> earliest pre-marker block by that
    /// validator descending from a container of the alternative. This is the
    /// validator's attestation toward the alternative.
    attestation: BTreeMap<(ConflictIndex, TxHash, u32), (u64, BlockHash)>,
}

impl Dag {
    pub fn new(n: u32) -> Self {
        assert!(n >= 1 && n <= 64, "validator count must be in 1..=64");
        let genesis = Block::genesis();
        let ghash = genesis.hash();
        let mut dag = Dag {
            n,
            genesis: ghash,
            index_of: BTreeMap::new(),
            blocks: Vec::new(),
            ancestors: Vec::new(),
            score: Vec::new(),
            leaves: BTreeSet::new(),
            tips: vec![BTreeSet::new(); n as usize],
            pending: BTreeMap::new(),
            waiting_on: BTreeMap::new(),
            chain: BTreeMap::new(),
            tx_content: BTreeMap::new(),
            containers: BTreeMap::new(),
            alts_by_index: BTreeMap::new(),
            votes: BTreeMap::new(),
            vote_rounds: BTreeMap::new(),
            vote_choices: BTreeMap::new(),
            marker: BTreeMap::new(),
            attestation: BTreeMap::new(),
        };
        dag.store(genesis);
        dag.leaves.insert(ghash);
        dag
    }

    pub fn validator_count(&self) -> u32 {
        self.n
    }

    pub fn all_mask(&self) -> u64 {
        if self.n == 64 {
            u64::MAX
        } else {
            (1u64 << self.n) - 1
        }
    }

    pub fn genesis_hash(&self) -> BlockHash {
        self.genesis
    }

    pub fn contains(&self, h: &BlockHash) -> bool {
        self.index_of.contains_key(h)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn block(&self, h: &BlockHash) -> Option<&Block> {
        self.index_of.get(h).map(|&i| &self.blocks[i])
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter()
    }

    pub(crate) fn idx(&self, h: &BlockHash) -> Option<usize> {
        self.index_of.get(h).copied()
    }

    pub(crate) fn block_at(&self, idx: usize) -> &Block {
        &self.blocks[idx]
    }

    pub(crate) fn ancestors_of(&self, idx: usize) -> &FixedBitSet {
        &self.ancestors[idx]
    }

    /// Offers a block to the DAG. See [`InsertOutcome`].
    pub fn insert(&mut self, b: Block) -> InsertOutcome {
        let h = b.hash();
        if self.index_of.contains_key(&h) || self.pending.contains_key(&h) {
            return InsertOutcome::Duplicate;
        }
        if let Err(reason) = self.structural_check(&b) {
            return InsertOutcome::Invalid(reason);
        }
        if !self.parents_present(&b) {
            self.buffer(b);
            return InsertOutcome::Buffered;
        }
        if let Err(reason) = self.link_check(&b) {
            return InsertOutcome::Invalid(reason);
        }
        self.commit(b);
        let mut satisfied = Vec::new();
        let mut rejected = Vec::new();
        self.drain_pending(h, &mut satisfied, &mut rejected);
        InsertOutcome::Inserted { satisfied, rejected }
    }

    fn structural_check(&self, b: &Block) -> Result<(), InvalidReason> {
        if b.creator().is_genesis() || b.creator().0 >= self.n {
            return Err(InvalidReason::BadCreator);
        }
        if b.parents().is_empty() {
            return Err(InvalidReason::NoParents);
        }
        if b.parents().contains(&b.hash()) {
            return Err(InvalidReason::SelfParent);
        }
        Ok(())
    }

    fn parents_present(&self, b: &Block) -> bool {
        b.parents().iter().all(|p| self.index_of.contains_key(p))
    }

    /// Checks requiring the full ancestry: the creator's own chain must be
    /// unbroken (its previous block is an ancestor).
    fn link_check(&self, b: &Block) -> Result<(), InvalidReason> {
        if b.seq() == 0 {
            return Ok(());
        }
        let mut anc = FixedBitSet::with_capacity(self.blocks.len());
        for p in b.parents() {
            anc.union_with(&self.ancestors[self.index_of[p]]);
        }
        let prev_linked = self
            .chain
            .get(&(b.creator().0, b.seq() - 1))
            .map(|v| v.iter().any(|&i| anc.contains(i)))
            .unwrap_or(false);
        if prev_linked {
            Ok(())
        } else {
            Err(InvalidReason::BrokenChain)
        }
    }

    fn buffer(&mut self, b: Block) {
        let h = b.hash();
        for p in b.parents() {
            if !self.index_of.contains_key(p) {
                self.waiting_on.entry(*p).or_default().insert(h);
            }
        }
        self.pending.insert(h, b);
    }

    fn drain_pending(
        &mut self,
        inserted: BlockHash,
        satisfied: &mut Vec<BlockHash>,
        rejected: &mut Vec<(BlockHash, InvalidReason)>,
    ) {
        let mut queue = vec![inserted];
        while let Some(done) = queue.pop() {
            let Some(waiters) = self.waiting_on.remove(&done) else {
                continue;
            };
            for w in waiters {
                let ready = match self.pending.get(&w) {
                    Some(blk) => self.parents_present(blk),
                    None => continue,
                };
                if !ready {
                    continue;
                }
                let blk = self.pending.remove(&w).unwrap();
                match self.link_check(&blk) {
                    Ok(()) => {
                        self.commit(blk);
                        satisfied.push(w);
                        queue.push(w);
                    }
                    Err(reason) => rejected.push((w, reason)),
                }
            }
        }
    }

    fn commit(&mut self, b: Block) {
        for p in b.parents() {
            self.leaves.remove(p);
        }
        self.leaves.insert(b.hash());
        self.store(b);
    }

    /// Stores a block whose parents are all present and registers it in every
    /// incremental index.
    fn store(&mut self, b: Block) {
        let idx = self.blocks.len();
        let h = b.hash();
        let creator = b.creator();

        let mut anc = FixedBitSet::with_capacity(idx + 1);
        for p in b.parents() {
            let pi = self.index_of[p];
            anc.union_with(&self.ancestors[pi]);
        }
        anc.grow(idx + 1);
        anc.insert(idx);

        // Score propagation: this block's creator observed every ancestor.
        let contrib = if b.is_genesis() {
            self.all_mask()
        } else {
            1u64 << creator.0
        };
        for a in anc.ones() {
            if a < idx {
                self.score[a] |= contrib;
            }
        }
        self.score.push(contrib);

        if !creator.is_genesis() {
            let v = creator.0;
            let pos = (b.seq(), h);

            self.tips[v as usize].retain(|t| !anc.contains(self.index_of[t]));
            self.tips[v as usize].insert(h);
            self.chain.entry((v, b.seq())).or_default().push(idx);

            for tx in b.transactions() {
                let th = tx.hash();
                self.tx_content.entry(th).or_insert_with(|| tx.clone());
                self.containers.entry(th).or_default().push(idx);
                self.alts_by_index
                    .entry(tx.index().clone())
                    .or_default()
                    .insert(th);
            }
            for vote in b.votes() {
                let rec = self
                    .votes
                    .entry((vote.index.clone(), vote.round, vote.choice))
                    .or_default();
                match rec.get(&v) {
                    Some(prev) if *prev <= pos => {}
                    _ => {
                        rec.insert(v, pos);
                    }
                }
                self.vote_rounds
                    .entry(vote.index.clone())
                    .or_default()
                    .insert(vote.round);
                self.vote_choices
                    .entry((vote.index.clone(), vote.round))
                    .or_default()
                    .insert(vote.choice);
            }

            // Conflict markers first: a block that itself marks a conflict
            // does not count as an attestation toward any of its
            // alternatives.
            let mut marked: BTreeSet<&ConflictIndex> = BTreeSet::new();
            for vote in b.votes() {
                marked.insert(&vote.index);
            }
            for (i, _) in b.conflict_attestations() {
                marked.insert(i);
            }
            for i in marked {
                let key = (i.clone(), v);
                match self.marker.get(&key) {
                    Some(prev) if *prev <= pos => {}
                    _ => {
                        self.marker.insert(key, pos);
                    }
                }
            }

            // Attestations: the creator vouches for every alternative whose
            // container lies in this block's ancestry, provided it has not
            // yet marked that conflict.
            let Dag {
                alts_by_index,
                containers,
                marker,
                attestation,
                ..
            } = self;
            for (i, alts) in alts_by_index.iter() {
                if let Some(m) = marker.get(&(i.clone(), v)) {
                    if pos >= *m {
                        continue;
                    }
                }
                for alt in alts {
                    let reaches = containers
                        .get(alt)
                        .is_some_and(|cs| cs.iter().any(|&ci| anc.contains(ci)));
                    if !reaches {
                        continue;
                    }
                    let key = (i.clone(), *alt, v);
                    match attestation.get(&key) {
                        Some(prev) if *prev <= pos => {}
                        _ => {
                            attestation.insert(key, pos);
                        }
                    }
                }
            }
        }

        self.index_of.insert(h, idx);
        self.ancestors.push(anc);
        self.blocks.push(b);
    }

    pub(crate) fn creator_contribution(&self, idx: usize) -> u64 {
        let b = &self.blocks[idx];
        if b.is_genesis() {
            self.all_mask()
        } else {
            1u64 << b.creator().0
        }
    }

    /// Creators of self-or-descendants of the block at `idx`.
    pub(crate) fn score_mask(&self, idx: usize) -> u64 {
        self.score[idx]
    }

    pub fn leaves(&self) -> &BTreeSet<BlockHash> {
        &self.leaves
    }

    /// Blocks created by `u` with no `u`-created descendant; genesis when `u`
    /// has created nothing (genesis is treated as created by everyone).
    pub fn most_recent_blocks(&self, u: ValidatorId) -> BTreeSet<BlockHash> {
        let t = &self.tips[u.0 as usize];
        if t.is_empty() {
            [self.genesis].into_iter().collect()
        } else {
            t.clone()
        }
    }

    /// True iff `a` is `b` or reachable from `b` along parent edges.
    pub fn is_ancestor(&self, a: &BlockHash, b: &BlockHash) -> Result<bool, DagError> {
        let ai = self.idx(a).ok_or(DagError::UnknownBlock(*a))?;
        let bi = self.idx(b).ok_or(DagError::UnknownBlock(*b))?;
        Ok(self.ancestors[bi].contains(ai))
    }

    /// Sweeps for proven equivocators and reports the reduced validator set.
    pub fn active_set(&self, f: u32) -> ActiveSet {
        let mut active = Vec::new();
        let mut excluded = Vec::new();
        let mut mask = 0u64;
        for v in 0..self.n {
            if self.tips[v as usize].len() >= 2 {
                excluded.push(ValidatorId(v));
            } else {
                active.push(ValidatorId(v));
                mask |= 1 << v;
            }
        }
        let e = excluded.len() as u32;
        ActiveSet {
            active,
            excluded,
            n_effective: self.n - e,
            f_effective: f.saturating_sub(e),
            exceeded: e > f,
            mask,
        }
    }

    pub fn is_equivocator(&self, u: ValidatorId) -> bool {
        self.tips[u.0 as usize].len() >= 2
    }

    pub fn transaction(&self, h: &TxHash) -> Option<&Transaction> {
        self.tx_content.get(h)
    }

    pub(crate) fn container_idxs(&self, h: &TxHash) -> Option<&[usize]> {
        self.containers.get(h).map(|v| v.as_slice())
    }

    /// Alternatives of `i` whose containers are stored.
    pub fn contained_alternatives(&self, i: &ConflictIndex) -> BTreeSet<TxHash> {
        self.alts_by_index.get(i).cloned().unwrap_or_default()
    }

    /// Alternatives known for `i`: contained transactions plus hashes that
    /// appear only as vote choices.
    pub fn known_alternatives(&self, i: &ConflictIndex) -> BTreeSet<TxHash> {
        let mut alts = self.contained_alternatives(i);
        if let Some(rounds) = self.vote_rounds.get(i) {
            for r in rounds {
                if let Some(choices) = self.vote_choices.get(&(i.clone(), *r)) {
                    alts.extend(choices.iter().copied());
                }
            }
        }
        alts
    }

    pub fn conflict_indices_seen(&self) -> BTreeSet<ConflictIndex> {
        let mut out: BTreeSet<ConflictIndex> = self.alts_by_index.keys().cloned().collect();
        out.extend(self.vote_rounds.keys().cloned());
        out
    }

    pub fn vote_rounds(&self, i: &ConflictIndex) -> BTreeSet<u32> {
        self.vote_rounds.get(i).cloned().unwrap_or_default()
    }

    pub fn vote_choices_at(&self, i: &ConflictIndex, round: u32) -> BTreeSet<TxHash> {
        self.vote_choices
            .get(&(i.clone(), round))
            .cloned()
            .unwrap_or_default()
    }

    pub(crate) fn vote_record(
        &self,
        i: &ConflictIndex,
        round: u32,
        choice: &TxHash,
    ) -> Option<&VoteRecord> {
        self.votes.get(&(i.clone(), round, *choice))
    }

    pub(crate) fn attestation_of(
        &self,
        i: &ConflictIndex,
        alt: &TxHash,
        v: u32,
    ) -> Option<(u64, BlockHash)> {
        self.attestation.get(&(i.clone(), *alt, v)).copied()
    }

    /// Canonical digest of the stored state. Two DAGs that received the same
    /// blocks in any delivery order digest identically.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.n.to_le_bytes());
        for b in self.index_of.keys() {
            h.update(b.as_bytes());
        }
        h.update([0xfe]);
        for p in self.pending.keys() {
            h.update(p.as_bytes());
        }
        h.update([0xfd]);
        for l in &self.leaves {
            h.update(l.as_bytes());
        }
        h.update([0xfc]);
        for (v, t) in self.tips.iter().enumerate() {
            h.update((v as u32).to_le_bytes());
            for b in t {
                h.update(b.as_bytes());
            }
        }
        h.finalize().into()
    }

    /// DOT rendering; nodes labeled `creator:seq`, one edge per parent link.
    /// `highlight` marks blocks drawn bold (containers of decided
    /// transactions).
    pub fn to_dot(&self, highlight: &BTreeSet<BlockHash>) -> String {
        let mut nodes: Vec<&Block> = self.blocks.iter().collect();
        nodes.sort_by_key(|b| (b.creator().0, b.seq(), b.hash()));
        let mut out = String::new();
        out.push_str("digraph dag {\n  rankdir=RL;\n  node [shape=box];\n");
        for b in &nodes {
            let style = if highlight.contains(&b.hash()) {
                ", style=bold, peripheries=2"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "  \"{}\" [label=\"{}:{}\"{}];",
                b.hash().short(),
                b.creator(),
                b.seq(),
                style
            );
        }
        for b in &nodes {
            for p in b.parents() {
                let _ = writeln!(out, "  \"{}\" -> \"{}\";", b.hash().short(), p.short());
            }
        }
        out.push_str("}\n");
        out
    }
}
