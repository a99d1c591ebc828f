//! Exhaustive small-schedule safety exploration.
//!
//! The model: every validator produces at most `max_blocks` blocks; the
//! adversary chooses, before each production, which of the blocks in flight
//! that validator has received (any ancestry-closed subset), and may leave
//! messages undelivered forever. Deliveries to the same validator commute
//! (DAG insertion is order-independent) and deliveries to different
//! validators are independent, so anchoring delivery batches at production
//! points preserves every reachable machine state up to commutation.
//!
//! At every state the checker compares the formal `decide` value of each
//! correct validator — both on its actual DAG and on its fully-extended DAG
//! (everything in flight delivered). Within the fault bound decisions are
//! stable under DAG growth, so any divergence reachable by further
//! delivery-only steps already shows up in the fully-extended views; spare
//! productions cover the rest. Two distinct chosen values for one index is
//! a safety violation.
//!
//! Byzantine behaviors are enumerable here: `silent` (blocks never enter
//! the pool), `equivocator` (two half-brains fed separately by the
//! adversary), and `double-voter` (a conflicting extra vote per vote).
//! Randomized behaviors are not (they have no finite action set).

use std::collections::{BTreeMap, BTreeSet, HashSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::{Decision, MachineParams, ProtocolVariant, ValidatorMachine};
use crate::sim::scenario::Behavior;
use crate::types::{Block, BlockHash, ConflictIndex, Transaction, TxHash, ValidatorId, Vote};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExploreError {
    #[error("explore supports at most 4 validators, got {0}")]
    TooManyValidators(u32),
    #[error("explore supports at most 4 blocks per validator, got {0}")]
    TooManyBlocks(u64),
    #[error("behavior {0:?} has no finite action set to enumerate")]
    UnsupportedBehavior(Behavior),
    #[error("variant {0:?} is not supported by the explorer (side consensus is time-driven)")]
    UnsupportedVariant(ProtocolVariant),
}

#[derive(Debug, Clone)]
pub struct ExploreConfig {
    pub n: u32,
    /// Number of Byzantine validators (the highest ids). Quorums use
    /// `min(f, (n-1)/3)`: pushing `f` past the bound models a deployment
    /// whose fault assumption is violated by reality.
    pub f: u32,
    pub variant: ProtocolVariant,
    pub max_blocks: u64,
    pub behavior: Behavior,
    pub state_budget: usize,
}

impl ExploreConfig {
    pub fn new(n: u32, f: u32, variant: ProtocolVariant, max_blocks: u64) -> Self {
        ExploreConfig {
            n,
            f,
            variant,
            max_blocks,
            behavior: Behavior::Equivocator,
            state_budget: 3_000_000,
        }
    }

    fn assumed_f(&self) -> u32 {
        self.f.min((self.n.saturating_sub(1)) / 3)
    }

    fn is_byzantine(&self, v: u32) -> bool {
        v >= self.n - self.f
    }
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub index: String,
    /// (validator, chosen value, round) per diverging view.
    pub values: Vec<(u32, String, i64)>,
    /// The schedule from the initial state to the violating one.
    pub schedule: Vec<String>,
}

#[derive(Debug)]
pub struct ExploreOutcome {
    pub violation: Option<Violation>,
    pub states_explored: usize,
    pub budget_exhausted: bool,
}

/// One validator: correct nodes have one machine, an equivocator has two
/// half-brains the adversary feeds separately.
#[derive(Clone)]
struct ExpNode {
    branches: Vec<ValidatorMachine>,
    behavior: Option<Behavior>,
}

#[derive(Clone)]
struct ExpState {
    nodes: Vec<ExpNode>,
    /// Blocks the adversary may deliver, in production order (which is a
    /// topological order).
    pool: Vec<Block>,
    pool_index: BTreeMap<BlockHash, usize>,
    produced: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Transition {
    v: u32,
    branch: usize,
    deliver: Vec<usize>,
}

impl Transition {
    fn describe(&self) -> String {
        format!(
            "produce v{}{} after delivering {:?}",
            self.v,
            if self.branch > 0 { "/b" } else { "" },
            self.deliver
        )
    }
}

fn double_votes(m: &ValidatorMachine, block: Block) -> Block {
    let mut votes = block.votes().to_vec();
    let mut extra = Vec::new();
    for v in &votes {
        let alts = m.dag().known_alternatives(&v.index);
        if let Some(other) = alts.iter().find(|a| **a != v.choice) {
            extra.push(Vote::new(v.index.clone(), *other, v.round, None));
        }
    }
    if extra.is_empty() {
        return block;
    }
    votes.extend(extra);
    Block::new(
        block.creator(),
        block.seq(),
        block.parents().clone(),
        block.transactions().to_vec(),
        votes,
        block.conflict_attestations().to_vec(),
    )
}

impl ExpState {
    fn initial(cfg: &ExploreConfig, injections: &[(Transaction, u32)]) -> Self {
        let params = MachineParams::new(cfg.n, cfg.assumed_f(), cfg.variant);
        let mut nodes = Vec::new();
        for v in 0..cfg.n {
            let behavior = cfg.is_byzantine(v).then_some(cfg.behavior);
            let branches = match behavior {
                Some(Behavior::Equivocator) => vec![
                    ValidatorMachine::new(ValidatorId(v), params.clone()),
                    ValidatorMachine::new(ValidatorId(v), params.clone()),
                ],
                _ => vec![ValidatorMachine::new(ValidatorId(v), params.clone())],
            };
            nodes.push(ExpNode { branches, behavior });
        }
        for (tx, to) in injections {
            for br in &mut nodes[*to as usize].branches {
                br.handle_receive_event(tx.clone(), 0);
            }
        }
        let produced = nodes.iter().map(|n| vec![0u64; n.branches.len()]).collect();
        ExpState {
            nodes,
            pool: Vec::new(),
            pool_index: BTreeMap::new(),
            produced,
        }
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (node, counts) in self.nodes.iter().zip(&self.produced) {
            for (br, cnt) in node.branches.iter().zip(counts) {
                h.update(br.canonical_digest());
                h.update(cnt.to_le_bytes());
            }
        }
        for b in self.pool_index.keys() {
            h.update(b.as_bytes());
        }
        h.finalize().into()
    }

    /// Undelivered pool indices for one branch of one validator.
    fn undelivered(&self, v: u32, branch: usize) -> Vec<usize> {
        let dag = self.nodes[v as usize].branches[branch].dag();
        self.pool
            .iter()
            .enumerate()
            .filter(|(_, b)| b.creator().0 != v && !dag.contains(&b.hash()))
            .map(|(k, _)| k)
            .collect()
    }

    /// All ancestry-closed subsets of the undelivered blocks, as sorted
    /// index lists. A subset is deliverable iff every parent of each chosen
    /// block is already held or also chosen.
    fn closed_subsets(&self, v: u32, branch: usize) -> Vec<Vec<usize>> {
        let undelivered = self.undelivered(v, branch);
        let dag = self.nodes[v as usize].branches[branch].dag();
        let pos_of: BTreeMap<usize, usize> = undelivered
            .iter()
            .enumerate()
            .map(|(pos, k)| (*k, pos))
            .collect();
        let mut required: Vec<u64> = Vec::with_capacity(undelivered.len());
        let mut deliverable: Vec<bool> = Vec::with_capacity(undelivered.len());
        for &k in &undelivered {
            let mut req = 0u64;
            let mut ok = true;
            for p in self.pool[k].parents() {
                if dag.contains(p) {
                    continue;
                }
                match self.pool_index.get(p).and_then(|pk| pos_of.get(pk)) {
                    // parents always precede children in the pool
                    Some(&ppos) => req |= 1 << ppos,
                    // parent unavailable (its creator withheld it)
                    None => ok = false,
                }
            }
            required.push(req);
            deliverable.push(ok);
        }
        // depth-first over positions in topological order
        let mut out = Vec::new();
        let mut stack: Vec<(usize, u64)> = vec![(0, 0)];
        while let Some((pos, mask)) = stack.pop() {
            if pos == undelivered.len() {
                let subset: Vec<usize> = (0..undelivered.len())
                    .filter(|p| mask >> p & 1 == 1)
                    .map(|p| undelivered[p])
                    .collect();
                out.push(subset);
                continue;
            }
            stack.push((pos + 1, mask)); // exclude
            if deliverable[pos] && required[pos] & !mask == 0 {
                stack.push((pos + 1, mask | 1 << pos)); // include
            }
        }
        out.sort();
        out
    }

    fn transitions(&self, cfg: &ExploreConfig) -> Vec<Transition> {
        let mut out = Vec::new();
        for v in 0..cfg.n {
            let node = &self.nodes[v as usize];
            for branch in 0..node.branches.len() {
                if self.produced[v as usize][branch] >= cfg.max_blocks {
                    continue;
                }
                for deliver in self.closed_subsets(v, branch) {
                    out.push(Transition { v, branch, deliver });
                }
            }
        }
        out
    }

    fn apply(&self, _cfg: &ExploreConfig, t: &Transition) -> ExpState {
        let mut next = self.clone();
        let pool_snapshot: Vec<Block> = t.deliver.iter().map(|&k| next.pool[k].clone()).collect();
        let node = &mut next.nodes[t.v as usize];
        let machine = &mut node.branches[t.branch];
        for b in pool_snapshot {
            machine.handle_receive_block(b, 0);
        }
        let block = match node.behavior {
            Some(Behavior::DoubleVoter) => {
                let built = machine.build_block(0);
                let mutated = double_votes(machine, built);
                machine.commit_own_block(mutated.clone(), 0);
                mutated
            }
            _ => machine.handle_time_expire(0).0,
        };
        next.produced[t.v as usize][t.branch] += 1;
        let publish = node.behavior != Some(Behavior::Silent);
        if publish && !next.pool_index.contains_key(&block.hash()) {
            next.pool_index.insert(block.hash(), next.pool.len());
            next.pool.push(block);
        }
        next
    }

    /// Chosen values per (validator, index), on actual DAGs and on fully
    /// extended DAGs (everything in flight delivered).
    fn decision_views(&self, cfg: &ExploreConfig) -> BTreeMap<String, Vec<(u32, TxHash, i64)>> {
        let mut out: BTreeMap<String, Vec<(u32, TxHash, i64)>> = BTreeMap::new();
        for v in 0..cfg.n {
            if cfg.is_byzantine(v) {
                continue;
            }
            let actual = &self.nodes[v as usize].branches[0];
            let mut extended = actual.clone();
            for b in &self.pool {
                if b.creator().0 != v && !extended.dag().contains(&b.hash()) {
                    extended.handle_receive_block(b.clone(), 0);
                }
            }
            for m in [actual, &extended] {
                for i in m.dag().conflict_indices_seen() {
                    if let Decision::Chosen { value, round } = m.decide(&i) {
                        let entry = out.entry(i.as_str().to_string()).or_default();
                        if !entry.iter().any(|(v0, h, _)| *v0 == v && *h == value) {
                            entry.push((v, value, round));
                        }
                    }
                }
            }
        }
        out
    }
}

fn find_violation(
    views: &BTreeMap<String, Vec<(u32, TxHash, i64)>>,
    schedule: &[String],
) -> Option<Violation> {
    for (index, entries) in views {
        let values: BTreeSet<TxHash> = entries.iter().map(|(_, h, _)| *h).collect();
        if values.len() >= 2 {
            return Some(Violation {
                index: index.clone(),
                values: entries
                    .iter()
                    .map(|(v, h, r)| (*v, h.to_hex(), *r))
                    .collect(),
                schedule: schedule.to_vec(),
            });
        }
    }
    None
}

/// The double-spend workload: one pair of conflicting transactions split
/// between the first two correct validators (or a single transaction when
/// there is only one validator).
fn workload(cfg: &ExploreConfig) -> Vec<(Transaction, u32)> {
    let a = Transaction::new(
        b"spend-a".to_vec(),
        ConflictIndex::new("acct"),
        BTreeSet::new(),
    );
    if cfg.n == 1 {
        return vec![(a, 0)];
    }
    let b = Transaction::new(
        b"spend-b".to_vec(),
        ConflictIndex::new("acct"),
        BTreeSet::new(),
    );
    vec![(a, 0), (b, 1)]
}

pub fn explore(cfg: &ExploreConfig) -> Result<ExploreOutcome, ExploreError> {
    if cfg.n > 4 || cfg.n == 0 {
        return Err(ExploreError::TooManyValidators(cfg.n));
    }
    if cfg.max_blocks > 4 {
        return Err(ExploreError::TooManyBlocks(cfg.max_blocks));
    }
    if cfg.f > 0 && matches!(cfg.behavior, Behavior::Arbitrary | Behavior::Spammer) {
        return Err(ExploreError::UnsupportedBehavior(cfg.behavior));
    }
    if cfg.variant.uses_side_consensus() {
        return Err(ExploreError::UnsupportedVariant(cfg.variant));
    }

    let initial = ExpState::initial(cfg, &workload(cfg));
    let mut visited: HashSet<[u8; 32]> = HashSet::new();
    visited.insert(initial.digest());

    struct Frame {
        state: ExpState,
        transitions: Vec<Transition>,
        next: usize,
    }
    let views = initial.decision_views(cfg);
    if let Some(v) = find_violation(&views, &[]) {
        return Ok(ExploreOutcome {
            violation: Some(v),
            states_explored: 1,
            budget_exhausted: false,
        });
    }
    let transitions = initial.transitions(cfg);
    let mut stack = vec![Frame {
        state: initial,
        transitions,
        next: 0,
    }];
    let mut schedule: Vec<String> = Vec::new();
    let mut budget_exhausted = false;

    while let Some(frame) = stack.last_mut() {
        if frame.next >= frame.transitions.len() {
            stack.pop();
            schedule.pop();
            continue;
        }
        let t = frame.transitions[frame.next].clone();
        frame.next += 1;
        let next_state = frame.state.apply(cfg, &t);
        let digest = next_state.digest();
        if !visited.insert(digest) {
            continue;
        }
        schedule.push(t.describe());
        let views = next_state.decision_views(cfg);
        if let Some(v) = find_violation(&views, &schedule) {
            return Ok(ExploreOutcome {
                violation: Some(v),
                states_explored: visited.len(),
                budget_exhausted: false,
            });
        }
        if visited.len() >= cfg.state_budget {
            budget_exhausted = true;
            break;
        }
        let transitions = next_state.transitions(cfg);
        stack.push(Frame {
            state: next_state,
            transitions,
            next: 0,
        });
    }

    Ok(ExploreOutcome {
        violation: None,
        states_explored: visited.len(),
        budget_exhausted,
    })
}
