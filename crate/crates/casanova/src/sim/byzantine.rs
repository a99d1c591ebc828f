//! Byzantine validators as wrappers around correct machines that transform
//! outbound effects. The inner bookkeeping stays inspectable, and because
//! wrappers only ever alter their own blocks and messages, authenticity of
//! creator tags (and of messages embedded in proofs) is preserved by
//! construction.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dls::DlsMessage;
use crate::protocol::{Effect, MachineParams, ValidatorMachine};
use crate::sim::scenario::Behavior;
use crate::types::{Block, ConflictIndex, Transaction, TxHash, ValidatorId, Vote};

/// A produced block together with who should receive it.
#[derive(Debug, Clone)]
pub struct BlockOut {
    pub block: Block,
    pub recipients: Vec<ValidatorId>,
}

pub enum Node {
    Correct(ValidatorMachine),
    /// Keeps its state but never sends anything.
    Silent(ValidatorMachine),
    /// Split brain: two inner machines share an identity; each half of the
    /// peers sees one chain.
    Equivocator {
        a: ValidatorMachine,
        b: ValidatorMachine,
        junk: u64,
    },
    /// Casts a conflicting extra vote alongside every real one.
    DoubleVoter(ValidatorMachine),
    /// Stuffs fresh alternatives for a contested index into every block.
    Spammer {
        inner: ValidatorMachine,
        counter: u64,
    },
    /// Seeded mix of withholding, vote tampering and vote stripping.
    Arbitrary(ValidatorMachine),
}

impl Node {
    pub fn new(me: ValidatorId, params: MachineParams, behavior: Option<Behavior>) -> Self {
        let mk = || ValidatorMachine::new(me, params.clone());
        match behavior {
            None => Node::Correct(mk()),
            Some(Behavior::Silent) => Node::Silent(mk()),
            Some(Behavior::Equivocator) => Node::Equivocator {
                a: mk(),
                b: mk(),
                junk: 0,
            },
            Some(Behavior::DoubleVoter) => Node::DoubleVoter(mk()),
            Some(Behavior::Spammer) => Node::Spammer {
                inner: mk(),
                counter: 0,
            },
            Some(Behavior::Arbitrary) => Node::Arbitrary(mk()),
        }
    }

    pub fn is_byzantine(&self) -> bool {
        !matches!(self, Node::Correct(_))
    }

    /// The primary inner machine (branch A for the equivocator).
    pub fn machine(&self) -> &ValidatorMachine {
        match self {
            Node::Correct(m)
            | Node::Silent(m)
            | Node::DoubleVoter(m)
            | Node::Arbitrary(m)
            | Node::Spammer { inner: m, .. }
            | Node::Equivocator { a: m, .. } => m,
        }
    }

    pub fn id(&self) -> ValidatorId {
        self.machine().id()
    }

    pub fn handle_client_tx(&mut self, tx: Transaction, now: u64) {
        match self {
            Node::Correct(m)
            | Node::Silent(m)
            | Node::DoubleVoter(m)
            | Node::Arbitrary(m)
            | Node::Spammer { inner: m, .. } => m.handle_receive_event(tx, now),
            Node::Equivocator { a, b, .. } => {
                a.handle_receive_event(tx.clone(), now);
                b.handle_receive_event(tx, now);
            }
        }
    }

    pub fn handle_block(&mut self, block: Block, now: u64) -> Vec<Effect> {
        match self {
            Node::Correct(m) => m.handle_receive_block(block, now),
            Node::Silent(m) => drop_sends(m.handle_receive_block(block, now)),
            Node::DoubleVoter(m) | Node::Arbitrary(m) | Node::Spammer { inner: m, .. } => {
                m.handle_receive_block(block, now)
            }
            Node::Equivocator { a, b, .. } => {
                let eff = a.handle_receive_block(block.clone(), now);
                let _ = b.handle_receive_block(block, now);
                eff
            }
        }
    }

    pub fn handle_dls(&mut self, msg: DlsMessage, now: u64) -> Vec<Effect> {
        match self {
            Node::Correct(m) => m.handle_dls_message(msg, now),
            Node::Silent(m) => drop_sends(m.handle_dls_message(msg, now)),
            Node::DoubleVoter(m) | Node::Arbitrary(m) | Node::Spammer { inner: m, .. } => {
                m.handle_dls_message(msg, now)
            }
            Node::Equivocator { a, .. } => a.handle_dls_message(msg, now),
        }
    }

    pub fn handle_dls_tick(&mut self, i: &ConflictIndex, now: u64) -> Vec<Effect> {
        match self {
            Node::Correct(m) => m.handle_dls_tick(i, now),
            Node::Silent(m) => drop_sends(m.handle_dls_tick(i, now)),
            Node::DoubleVoter(m) | Node::Arbitrary(m) | Node::Spammer { inner: m, .. } => {
                m.handle_dls_tick(i, now)
            }
            Node::Equivocator { a, .. } => a.handle_dls_tick(i, now),
        }
    }

    /// Block production. `peers` is every other validator, ascending.
    pub fn handle_timer(
        &mut self,
        now: u64,
        peers: &[ValidatorId],
        rng: &mut ChaCha8Rng,
    ) -> (Vec<BlockOut>, Vec<Effect>) {
        match self {
            Node::Correct(m) => {
                let (block, eff) = m.handle_time_expire(now);
                (
                    vec![BlockOut {
                        block,
                        recipients: peers.to_vec(),
                    }],
                    eff,
                )
            }
            Node::Silent(m) => {
                let (block, eff) = m.handle_time_expire(now);
                (
                    vec![BlockOut {
                        block,
                        recipients: Vec::new(),
                    }],
                    drop_sends(eff),
                )
            }
            Node::Equivocator { a, b, junk } => {
                let (block_a, eff) = a.handle_time_expire(now);
                // branch B diverges by an extra junk transaction with a
                // fresh conflict-free index
                let me = b.id();
                let junk_tx = Transaction::new(
                    format!("junk-{}-{junk}", me.0).into_bytes(),
                    ConflictIndex::new(format!("junk-{}-{junk}", me.0)),
                    BTreeSet::new(),
                );
                *junk += 1;
                b.handle_receive_event(junk_tx, now);
                let (block_b, _) = b.handle_time_expire(now);
                let half = peers.len().div_ceil(2);
                (
                    vec![
                        BlockOut {
                            block: block_a,
                            recipients: peers[..half].to_vec(),
                        },
                        BlockOut {
                            block: block_b,
                            recipients: peers[half..].to_vec(),
                        },
                    ],
                    eff,
                )
            }
            Node::DoubleVoter(m) => {
                let built = m.build_block(now);
                let block = add_conflicting_votes(m, built);
                let eff = m.commit_own_block(block.clone(), now);
                (
                    vec![BlockOut {
                        block,
                        recipients: peers.to_vec(),
                    }],
                    eff,
                )
            }
            Node::Spammer { inner, counter } => {
                let built = inner.build_block(now);
                let block = add_spam_txs(inner, built, counter);
                let eff = inner.commit_own_block(block.clone(), now);
                (
                    vec![BlockOut {
                        block,
                        recipients: peers.to_vec(),
                    }],
                    eff,
                )
            }
            Node::Arbitrary(m) => {
                let built = m.build_block(now);
                let block = match rng.random_range(0..4u32) {
                    0 => built,
                    1 => add_conflicting_votes(m, built),
                    2 => strip_votes(built),
                    _ => built,
                };
                let eff = m.commit_own_block(block.clone(), now);
                let recipients = match rng.random_range(0..3u32) {
                    // withhold from one seeded peer
                    0 if !peers.is_empty() => {
                        let skip = rng.random_range(0..peers.len());
                        peers
                            .iter()
                            .enumerate()
                            .filter(|(k, _)| *k != skip)
                            .map(|(_, p)| *p)
                            .collect()
                    }
                    // stay quiet this interval
                    1 => Vec::new(),
                    _ => peers.to_vec(),
                };
                (vec![BlockOut { block, recipients }], eff)
            }
        }
    }
}

fn drop_sends(effects: Vec<Effect>) -> Vec<Effect> {
    effects
        .into_iter()
        .filter(|e| !matches!(e, Effect::DlsSend(_)))
        .collect()
}

fn rebuild(block: &Block, votes: Vec<Vote>, txs: Vec<Transaction>) -> Block {
    Block::new(
        block.creator(),
        block.seq(),
        block.parents().clone(),
        txs,
        votes,
        block.conflict_attestations().to_vec(),
    )
}

/// For every vote in the block, add a second vote in the same round for a
/// different known alternative, when one exists.
fn add_conflicting_votes(m: &ValidatorMachine, block: Block) -> Block {
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
    let txs = block.transactions().to_vec();
    rebuild(&block, votes, txs)
}

fn strip_votes(block: Block) -> Block {
    if block.votes().is_empty() {
        return block;
    }
    let txs = block.transactions().to_vec();
    rebuild(&block, Vec::new(), txs)
}

/// Stuff two fresh alternatives for the first contested index this node has
/// seen (or, before any conflict, the first index seen at all).
fn add_spam_txs(m: &ValidatorMachine, block: Block, counter: &mut u64) -> Block {
    let indices = m.dag().conflict_indices_seen();
    let target = indices
        .iter()
        .find(|i| m.dag().contained_alternatives(i).len() >= 2)
        .or_else(|| indices.iter().next())
        .cloned();
    let Some(target) = target else {
        return block;
    };
    let me = m.id();
    let mut txs = block.transactions().to_vec();
    for _ in 0..2 {
        txs.push(Transaction::new(
            format!("spam-{}-{counter}", me.0).into_bytes(),
            target.clone(),
            BTreeSet::new(),
        ));
        *counter += 1;
    }
    let votes = block.votes().to_vec();
    rebuild(&block, votes, txs)
}

/// Known alternative hashes, exposed for trace bookkeeping.
pub fn known_alt_hashes(m: &ValidatorMachine, i: &ConflictIndex) -> Vec<TxHash> {
    m.dag().known_alternatives(i).into_iter().collect()
}
